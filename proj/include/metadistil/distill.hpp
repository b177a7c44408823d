#pragma once

// Distillation with a meta-learned teacher.
//
// Each round the student is copied and given one differentiable SGD step on
// the distillation loss (the teaching experiment). The teacher then descends
// the gradient of the experimental student's quiz loss, taken through that
// step. Finally the real student takes the same step with the updated
// teacher (the pilot update). Ablations and fixed-teacher baselines share the
// same step code so that their trajectories are directly comparable.

#include "metadistil/analysis.hpp"
#include "metadistil/data.hpp"
#include "metadistil/nn.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>

namespace metadistil {

struct DistillConfig {
  Scalar alpha = 0.5;
  KdLoss kd;                       // logit-mse, temperature 2
  Scalar lambda = 0.1;             // student learning rate
  Scalar mu = 0.01;                // teacher learning rate
  std::size_t batch_size = 32;
  std::size_t quiz_batch_size = 0;  // 0: same as batch_size
  std::size_t steps = 1000;
  std::size_t eval_interval = 100;  // 0: evaluate only at the start and end
  MlpSpec teacher_spec{{2, 64, 64, 3}};
  MlpSpec student_spec{{2, 8, 3}};
  Mode mode = Mode::metadistil;
  std::uint64_t seed = 0;
  double quiz_fraction = 0.1;
  std::size_t teacher_pretrain_steps = 0;
  Scalar teacher_pretrain_lr = 0.1;
  Scalar grad_clip = 0.0;  // meta-gradient norm cap; 0 disables
  std::vector<std::size_t> snapshot_steps;
  std::size_t probe_size = 64;

  StudentObjective objective() const { return {alpha, kd}; }
  std::size_t quiz_batch() const { return quiz_batch_size == 0 ? batch_size : quiz_batch_size; }
  void validate() const;
};

/// Where a teacher came from.
struct Provenance {
  Mode mode = Mode::metadistil;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  MlpSpec student_spec;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct TeacherSnapshot {
  MlpSpec spec;
  ParamSet params;
  Provenance provenance;
};

/// Binary: "MDTS", u32 version, u32 width count, u64 widths, then every
/// parameter as little-endian float64 in entry order. Provenance goes to a
/// text sidecar at `path` + ".meta".
void save_snapshot(const TeacherSnapshot& snapshot, const std::filesystem::path& path);
TeacherSnapshot load_snapshot(const std::filesystem::path& path);
std::string encode_snapshot(const MlpSpec& spec, const ParamSet& params);
ParamSet decode_snapshot(std::string_view bytes, MlpSpec* spec_out = nullptr);

/// theta - lr * d(loss)/d(theta), built in the loss's graph so that the
/// result stays differentiable in whatever the loss depended on.
std::vector<Var> unrolled_sgd_step(Var loss, std::span<const Var> params, Scalar lr);

/// The student after one step, plus the graph state a meta-update needs.
struct InnerUpdate {
  std::shared_ptr<Graph> graph;
  std::vector<Var> teacher;  // leaves when differentiable, constants otherwise
  std::vector<Var> updated;  // theta_S' nodes
  ParamSet params;           // theta_S' values
  Scalar loss = 0.0;         // student loss before the step
  bool differentiable = false;
};

InnerUpdate inner_update(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                         const ParamSet& student, const ParamSet& teacher, bool differentiable);

struct MetaUpdate {
  ParamSet teacher;
  Scalar quiz_loss = 0.0;  // cross-entropy of theta_S' on the quiz batch
  Scalar grad_norm = 0.0;  // before any clipping
  std::vector<Tensor> gradient;
};

/// Teacher step on the plain task loss of the experimental student.
MetaUpdate meta_update(const DistillConfig& config, const Tensor& quiz_batch, std::span<const int> quiz_labels,
                       const InnerUpdate& experiment, const ParamSet& teacher);

/// Quiz cross-entropy of the experimental student, as a function of the
/// teacher; value-only, for finite-difference checks.
Scalar experimental_quiz_loss(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                              const Tensor& quiz_batch, std::span<const int> quiz_labels, const ParamSet& student,
                              const ParamSet& teacher);

/// d experimental_quiz_loss / d teacher, through the unrolled student step.
std::vector<Tensor> meta_gradient(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                                  const Tensor& quiz_batch, std::span<const int> quiz_labels,
                                  const ParamSet& student, const ParamSet& teacher);

struct PilotRound {
  ParamSet student;
  ParamSet teacher;
  StepRecord record;  // losses and gradient norm; similarity left to the caller
};

PilotRound pilot_round(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                       const Tensor& quiz_batch, std::span<const int> quiz_labels, const ParamSet& student,
                       const ParamSet& teacher);

/// Called once per step with the source rows of the training and quiz batches.
using BatchObserver = std::function<void(std::size_t step, std::span<const std::size_t> train_rows,
                                         std::span<const std::size_t> quiz_rows)>;

struct TrainingResult {
  ParamSet student;
  ParamSet teacher;
  ParamSet initial_teacher;  // after pretraining, before distillation
  RunLog log;
};

/// Pretrains (or loads) the teacher, then distils for config.steps rounds.
TrainingResult run_training(const DistillConfig& config, const SplitSet& splits,
                            const std::optional<TeacherSnapshot>& snapshot = std::nullopt,
                            const BatchObserver& observer = {});

/// Teacher after task pretraining, as run_training would start from it.
ParamSet pretrain_teacher(const DistillConfig& config, const Dataset& train);

}  // namespace metadistil
