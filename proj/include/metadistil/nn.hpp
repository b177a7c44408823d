#pragma once

// Multi-layer perceptrons, their losses and plain SGD.
//
// Every loss is built on the autodiff graph so that it can sit inside an
// unrolled update. Value-only helpers build a throwaway graph of constants.

#include "metadistil/autodiff.hpp"
#include "metadistil/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace metadistil {

using Labels = std::vector<int>;

/// Layer widths [d_in, h_1, ..., d_out]; rectifier on hidden layers,
/// identity on the output.
struct MlpSpec {
  std::vector<std::size_t> layers;

  void validate() const;
  std::size_t layer_count() const { return layers.size() - 1; }
  std::size_t input_size() const { return layers.front(); }
  std::size_t output_size() const { return layers.back(); }
  std::size_t parameter_count() const;

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

std::string to_string(const MlpSpec& spec);

/// Named parameter tensors; per layer a [fan_in x fan_out] weight then a
/// [fan_out] bias.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> entries;

  std::size_t size() const { return entries.size(); }
  std::size_t scalar_count() const;
  const Tensor& operator[](std::size_t i) const { return entries[i].second; }
  std::vector<Tensor> tensors() const;

  /// Same names, new values.
  ParamSet with_values(std::vector<Tensor> values) const;

  bool matches(const MlpSpec& spec) const;
  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

/// Weights uniform in +-1/sqrt(fan_in), biases zero. Deterministic in seed.
ParamSet init_params(const MlpSpec& spec, std::uint64_t seed);

/// Adds every entry to `graph` as a differentiable leaf.
std::vector<Var> as_parameters(Graph& graph, const ParamSet& params);
/// Adds every entry to `graph` as a constant.
std::vector<Var> as_constants(Graph& graph, const ParamSet& params);
/// Reads current node values back into a ParamSet shaped like `like`.
ParamSet values_of(std::span<const Var> vars, const ParamSet& like);

/// Logits of the network; no softmax applied.
Var forward(const MlpSpec& spec, std::span<const Var> params, Var batch);
Tensor forward(const MlpSpec& spec, const ParamSet& params, const Tensor& batch);

/// Row-wise log-softmax, composed from primitives with a per-row max shift.
Var log_softmax(Var logits);

/// Mean negative log-likelihood of the labelled class.
Var cross_entropy(Var logits, std::span<const int> labels);
Scalar cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Distillation objectives.
///
/// logit_mse:   mean over all n*C entries of (s - t)^2.
/// softened_kl: T^2 * mean over rows of KL(softmax(t/T) || softmax(s/T)).
///              The T^2 factor keeps gradient scale comparable across T.
struct KdLoss {
  enum class Kind { logit_mse, softened_kl };
  Kind kind = Kind::logit_mse;
  Scalar temperature = 2.0;

  static KdLoss mse() { return {Kind::logit_mse, 2.0}; }
  static KdLoss kl(Scalar temperature) { return {Kind::softened_kl, temperature}; }
  void validate() const;
};

std::string to_string(KdLoss::Kind kind);
KdLoss::Kind parse_kd_kind(const std::string& name);

Var kd_loss(const KdLoss& kind, Var student_logits, Var teacher_logits);
Scalar kd_loss(const KdLoss& kind, const Tensor& student_logits, const Tensor& teacher_logits);

/// alpha * cross_entropy + (1 - alpha) * kd_loss on one batch. Both terms
/// are always built, so the result depends on the teacher even at alpha = 1.
struct StudentObjective {
  Scalar alpha = 0.5;
  KdLoss kd;
};

Var student_loss(const StudentObjective& objective, Var student_logits, Var teacher_logits,
                 std::span<const int> labels);

/// theta - lr * grad, as graph nodes that keep every upstream dependence.
std::vector<Var> sgd_step(std::span<const Var> params, const GradientMap& grads, Scalar lr);
ParamSet sgd_step(const ParamSet& params, std::span<const Tensor> grads, Scalar lr);

/// Task-loss SGD on a batch; used for teacher pretraining.
ParamSet task_step(const MlpSpec& spec, const ParamSet& params, const Tensor& batch,
                   std::span<const int> labels, Scalar lr);

}  // namespace metadistil
