#pragma once

// Run records and the metrics computed from them: accuracy, prediction
// loyalty, pilot-update effectiveness, teacher-student similarity drift,
// hard-example teacher losses and sweep aggregation.

#include "metadistil/data.hpp"
#include "metadistil/nn.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace metadistil {

enum class Mode { metadistil, no_pilot, vanilla_kd, static_kd, cross_teach };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);
/// True for modes whose teacher receives meta-updates.
bool updates_teacher(Mode mode);

struct StepRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double experimental_quiz_loss = 0.0;  // student after the teaching experiment
  double real_quiz_loss = 0.0;          // student after the real update
  double teacher_grad_norm = 0.0;
  double similarity_before = 0.0;  // KL(teacher || student) before the meta-update
  double similarity_after = 0.0;   // ... and after it
  double elapsed_seconds = 0.0;    // wall clock; not serialized, not compared

  friend bool operator==(const StepRecord& a, const StepRecord& b) {
    return a.step == b.step && a.train_loss == b.train_loss && a.experimental_quiz_loss == b.experimental_quiz_loss &&
           a.real_quiz_loss == b.real_quiz_loss && a.teacher_grad_norm == b.teacher_grad_norm &&
           a.similarity_before == b.similarity_before && a.similarity_after == b.similarity_after;
  }
};

struct EvalRecord {
  std::size_t step = 0;
  double student_dev_accuracy = 0.0;
  double teacher_dev_accuracy = 0.0;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct RunLog {
  Mode mode = Mode::metadistil;
  std::uint64_t seed = 0;
  std::string config_echo;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  double student_test_accuracy = 0.0;
  double teacher_test_accuracy = 0.0;
  std::vector<std::pair<std::size_t, ParamSet>> teacher_snapshots;
  std::size_t quiz_violations = 0;
  double elapsed_seconds = 0.0;
};

/// Row argmax; ties go to the lowest class index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

double accuracy(const Tensor& logits, std::span<const int> labels);
double loyalty(const Tensor& student_logits, const Tensor& teacher_logits);

/// Fraction of steps where the real student's quiz loss is strictly below the
/// experimental student's.
double pilot_effectiveness(const RunLog& log);

struct SimilarityShift {
  double before = 0.0;
  double after = 0.0;
  bool decreased = false;
};

/// Mean KL(softmax(teacher) || softmax(student)) over the probe batch, before
/// and after a teacher update, against the same student.
SimilarityShift similarity_shift(const MlpSpec& teacher_spec, const ParamSet& teacher_before,
                                 const ParamSet& teacher_after, const MlpSpec& student_spec,
                                 const ParamSet& student, const Tensor& probe);

/// Mean KL(softmax(teacher) || softmax(student)) over rows.
double output_divergence(const Tensor& teacher_logits, const Tensor& student_logits);

/// Share of steps whose teacher moved toward the student, over the first and
/// second half of the run (the first half has floor(n/2) steps).
std::pair<double, double> similarity_decrease_by_half(const RunLog& log);

struct HardExampleDelta {
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t count = 0;
};

HardExampleDelta hard_example_delta(const MlpSpec& teacher_spec, const ParamSet& teacher_before,
                                    const ParamSet& teacher_after, const Dataset& subset);

/// Rows that `better` classifies correctly and `worse` does not.
IndexList hard_example_indices(const Tensor& better_logits, const Tensor& worse_logits, std::span<const int> labels);

struct SweepRow {
  std::string parameter;
  std::string value;
  std::string mode;
  std::uint64_t seed = 0;
  double accuracy = 0.0;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepAggregate {
  std::string parameter;
  std::string value;
  std::string mode;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 when count = 1
  std::size_t count = 0;

  friend bool operator==(const SweepAggregate&, const SweepAggregate&) = default;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::vector<SweepAggregate> aggregates;

  friend bool operator==(const SweepTable&, const SweepTable&) = default;
};

/// Groups by (value, mode), ordered by first appearance of the value in
/// `value_order` (or lexicographically when empty), then by mode.
SweepTable aggregate_sweep(std::vector<SweepRow> rows, const std::vector<std::string>& value_order = {});

/// Per mode: max minus min of the group means across swept values.
std::vector<std::pair<std::string, double>> sweep_spread(const SweepTable& table);

// Serialization. Step CSV columns, in order:
// step,train_loss,experimental_quiz_loss,real_quiz_loss,teacher_grad_norm,similarity_before,similarity_after
// Wall-clock time is left out so that identical runs give identical files.
std::string steps_to_csv(const std::vector<StepRecord>& steps);
std::vector<StepRecord> steps_from_csv(const std::string& text);

// step,student_dev_accuracy,teacher_dev_accuracy
std::string evals_to_csv(const std::vector<EvalRecord>& evals);
std::vector<EvalRecord> evals_from_csv(const std::string& text);

// kind,parameter,value,mode,seed,accuracy,mean,std,count  (kind = row | aggregate)
std::string sweep_to_csv(const SweepTable& table);
SweepTable sweep_from_csv(const std::string& text);

/// JSON summary: final accuracies, pilot statistic, similarity halves.
std::string summary_json(const RunLog& log);

}  // namespace metadistil
