#include "metadistil/nn.hpp"

#include "metadistil/error.hpp"
#include "metadistil/rng.hpp"

#include <cmath>
#include <sstream>

namespace metadistil {

void MlpSpec::validate() const {
  if (layers.size() < 2) throw ConfigError("an MLP needs at least an input and an output size");
  for (auto w : layers) {
    if (w == 0) throw ConfigError("layer sizes must be positive: " + to_string(*this));
  }
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += layers[l] * layers[l + 1] + layers[l + 1];
  return n;
}

std::string to_string(const MlpSpec& spec) {
  std::ostringstream os;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (i) os << ',';
    os << spec.layers[i];
  }
  return os.str();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries) n += t.size();
  return n;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries.size());
  for (const auto& [name, t] : entries) out.push_back(t);
  return out;
}

ParamSet ParamSet::with_values(std::vector<Tensor> values) const {
  if (values.size() != entries.size()) throw ShapeError("parameter count mismatch");
  ParamSet out;
  out.entries.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (values[i].shape() != entries[i].second.shape()) {
      throw ShapeError("parameter " + entries[i].first + " expects shape " + to_string(entries[i].second.shape()));
    }
    out.entries.emplace_back(entries[i].first, std::move(values[i]));
  }
  return out;
}

bool ParamSet::matches(const MlpSpec& spec) const {
  if (entries.size() != 2 * spec.layer_count()) return false;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    if (entries[2 * l].second.shape() != Shape{spec.layers[l], spec.layers[l + 1]}) return false;
    if (entries[2 * l + 1].second.shape() != Shape{spec.layers[l + 1]}) return false;
  }
  return true;
}

ParamSet init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamSet out;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t fan_in = spec.layers[l];
    const std::size_t fan_out = spec.layers[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<Scalar> w(fan_in * fan_out);
    for (auto& x : w) x = rng.uniform(-bound, bound);
    out.entries.emplace_back("layer" + std::to_string(l) + ".weight", Tensor({fan_in, fan_out}, w));
    out.entries.emplace_back("layer" + std::to_string(l) + ".bias", Tensor::zeros({fan_out}));
  }
  return out;
}

std::vector<Var> as_parameters(Graph& graph, const ParamSet& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params.entries) out.push_back(graph.parameter(t));
  return out;
}

std::vector<Var> as_constants(Graph& graph, const ParamSet& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params.entries) out.push_back(graph.constant(t));
  return out;
}

ParamSet values_of(std::span<const Var> vars, const ParamSet& like) {
  std::vector<Tensor> values;
  values.reserve(vars.size());
  for (Var v : vars) values.push_back(v.value());
  return like.with_values(std::move(values));
}

Var forward(const MlpSpec& spec, std::span<const Var> params, Var batch) {
  if (params.size() != 2 * spec.layer_count()) throw ShapeError("parameter list does not match " + to_string(spec));
  if (batch.value().rank() != 2 || batch.shape()[1] != spec.input_size()) {
    throw ShapeError("batch of shape " + to_string(batch.shape()) + " does not fit input size " +
                     std::to_string(spec.input_size()));
  }
  Var h = batch;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    h = add(matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < spec.layer_count()) h = relu(h);
  }
  return h;
}

Tensor forward(const MlpSpec& spec, const ParamSet& params, const Tensor& batch) {
  Graph g;
  const auto vars = as_constants(g, params);
  return forward(spec, vars, g.constant(batch)).value();
}

Var log_softmax(Var logits) {
  const Matrix& z = logits.value().matrix();
  // The shift is a constant: log-sum-exp is invariant to it, so the gradient
  // stays exact while exp() never overflows.
  Matrix peak = z.rowwise().maxCoeff();
  Var shift = logits.graph->constant(Tensor({static_cast<std::size_t>(z.rows()), 1}, std::move(peak)));
  Var shifted = sub(logits, shift);
  return sub(shifted, log(sum(exp(shifted), Axis::cols)));
}

namespace {

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ConfigError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) +
                        " classes");
    }
    m(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return Tensor({labels.size(), classes}, std::move(m));
}

}  // namespace

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[0] == 0) {
    throw ShapeError("logits " + to_string(s) + " do not match " + std::to_string(labels.size()) + " labels");
  }
  Var target = logits.graph->constant(one_hot(labels, s[1]));
  return scale(sum(mul(target, log_softmax(logits))), -1.0 / static_cast<Scalar>(s[0]));
}

Scalar cross_entropy(const Tensor& logits, std::span<const int> labels) {
  Graph g;
  return cross_entropy(g.constant(logits), labels).value().item();
}

void KdLoss::validate() const {
  if (kind == Kind::softened_kl && !(temperature > 0.0)) {
    throw ConfigError("temperature must be positive, got " + std::to_string(temperature));
  }
}

std::string to_string(KdLoss::Kind kind) {
  return kind == KdLoss::Kind::logit_mse ? "logit-mse" : "softened-kl";
}

KdLoss::Kind parse_kd_kind(const std::string& name) {
  if (name == "logit-mse") return KdLoss::Kind::logit_mse;
  if (name == "softened-kl") return KdLoss::Kind::softened_kl;
  throw ConfigError("unknown kd_kind '" + name + "' (expected logit-mse or softened-kl)");
}

Var kd_loss(const KdLoss& kind, Var student_logits, Var teacher_logits) {
  kind.validate();
  const Shape& s = student_logits.shape();
  if (s != teacher_logits.shape() || s.size() != 2) {
    throw ShapeError("kd_loss shapes differ: " + to_string(s) + " vs " + to_string(teacher_logits.shape()));
  }
  if (kind.kind == KdLoss::Kind::logit_mse) return mean(square(sub(student_logits, teacher_logits)));

  const Scalar t = kind.temperature;
  Var soft_teacher = scale(teacher_logits, 1.0 / t);
  Var soft_student = scale(student_logits, 1.0 / t);
  Var p = softmax(soft_teacher);
  Var gap = sub(log_softmax(soft_teacher), log_softmax(soft_student));
  return scale(sum(mul(p, gap)), t * t / static_cast<Scalar>(s[0]));
}

Scalar kd_loss(const KdLoss& kind, const Tensor& student_logits, const Tensor& teacher_logits) {
  Graph g;
  return kd_loss(kind, g.constant(student_logits), g.constant(teacher_logits)).value().item();
}

Var student_loss(const StudentObjective& objective, Var student_logits, Var teacher_logits,
                 std::span<const int> labels) {
  if (!(objective.alpha >= 0.0 && objective.alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(objective.alpha));
  }
  Var task = cross_entropy(student_logits, labels);
  Var distill = kd_loss(objective.kd, student_logits, teacher_logits);
  return add(scale(task, objective.alpha), scale(distill, 1.0 - objective.alpha));
}

std::vector<Var> sgd_step(std::span<const Var> params, const GradientMap& grads, Scalar lr) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (Var p : params) {
    if (!grads.contains(p)) throw ConfigError("missing gradient for parameter node " + std::to_string(p.id));
    out.push_back(sub(p, scale(grads.at(p), lr)));
  }
  return out;
}

ParamSet sgd_step(const ParamSet& params, std::span<const Tensor> grads, Scalar lr) {
  if (grads.size() != params.size()) {
    throw ConfigError("missing gradient entries: " + std::to_string(grads.size()) + " for " +
                      std::to_string(params.size()) + " parameters");
  }
  std::vector<Tensor> values;
  values.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i];
    if (grads[i].shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + params.entries[i].first);
    Matrix stepped = grads[i].matrix() * lr;
    values.emplace_back(p.shape(), Matrix(p.matrix() - stepped));
  }
  return params.with_values(std::move(values));
}

ParamSet task_step(const MlpSpec& spec, const ParamSet& params, const Tensor& batch,
                   std::span<const int> labels, Scalar lr) {
  Graph g;
  const auto vars = as_parameters(g, params);
  Var loss = cross_entropy(forward(spec, vars, g.constant(batch)), labels);
  const GradientMap grads = backward(loss, vars);
  return values_of(sgd_step(vars, grads, lr), params);
}

}  // namespace metadistil
