#pragma once

// Random tiny distillation instances and the finite-difference oracle for
// the teacher's meta-gradient.

#include "metadistil/distill.hpp"
#include "metadistil/rng.hpp"

#include <cmath>
#include <vector>

namespace metadistil::testing {

struct MetaInstance {
  DistillConfig config;
  Tensor batch;
  Labels labels;
  Tensor quiz;
  Labels quiz_labels;
  ParamSet student;
  ParamSet teacher;
};

inline Tensor uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<Scalar> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, v);
}

inline ParamSet random_params(Rng& rng, const MlpSpec& spec) {
  const ParamSet like = init_params(spec, 0);
  std::vector<Tensor> values;
  for (const auto& [name, t] : like.entries) values.push_back(uniform_tensor(rng, t.shape(), -1.0, 1.0));
  return like.with_values(std::move(values));
}

// Smallest |pre-activation| of any hidden unit, computed with plain Eigen.
inline double hidden_margin(const MlpSpec& spec, const ParamSet& p, const Tensor& x) {
  Matrix h = x.matrix();
  double margin = INFINITY;
  for (std::size_t l = 0; l + 1 < spec.layer_count(); ++l) {
    Matrix pre = h * p[2 * l].matrix();
    pre.rowwise() += p[2 * l + 1].matrix().row(0);
    margin = std::min(margin, pre.cwiseAbs().minCoeff());
    h = pre.cwiseMax(0.0);
  }
  return margin;
}

/// Widths at most 4, batches at most 4. Redraws until no hidden unit sits
/// within 1e-3 of its kink, where central differences are meaningless.
inline MetaInstance random_instance(Rng& rng, KdLoss kd, Scalar alpha) {
  while (true) {
    MetaInstance m;
    const std::size_t d = 2 + rng.below(3);
    const std::size_t c = 2 + rng.below(3);
    m.config.teacher_spec = MlpSpec{{d, 1 + rng.below(4), c}};
    m.config.student_spec = MlpSpec{{d, 1 + rng.below(4), c}};
    m.config.kd = kd;
    m.config.alpha = alpha;
    m.config.lambda = rng.uniform(0.05, 0.5);
    m.config.mu = 0.1;
    const std::size_t n = 1 + rng.below(4);
    const std::size_t nq = 1 + rng.below(4);
    m.batch = uniform_tensor(rng, {n, d}, -2.0, 2.0);
    m.quiz = uniform_tensor(rng, {nq, d}, -2.0, 2.0);
    for (std::size_t i = 0; i < n; ++i) m.labels.push_back(static_cast<int>(rng.below(c)));
    for (std::size_t i = 0; i < nq; ++i) m.quiz_labels.push_back(static_cast<int>(rng.below(c)));
    m.student = random_params(rng, m.config.student_spec);
    m.teacher = random_params(rng, m.config.teacher_spec);

    const InnerUpdate exp = inner_update(m.config, m.batch, m.labels, m.student, m.teacher, false);
    const double margin = std::min({hidden_margin(m.config.teacher_spec, m.teacher, m.batch),
                                    hidden_margin(m.config.student_spec, m.student, m.batch),
                                    hidden_margin(m.config.student_spec, exp.params, m.quiz)});
    if (margin > 1e-3) return m;
  }
}

/// Central differences of the experimental student's quiz loss over every
/// teacher coordinate, concatenated in entry order.
inline std::vector<Scalar> meta_gradient_fd(const MetaInstance& m, Scalar h) {
  std::vector<Scalar> out;
  for (std::size_t j = 0; j < m.teacher.size(); ++j) {
    auto f = [&](const Tensor& tj) {
      auto values = m.teacher.tensors();
      values[j] = tj;
      return experimental_quiz_loss(m.config, m.batch, m.labels, m.quiz, m.quiz_labels, m.student,
                                    m.teacher.with_values(values));
    };
    const Tensor g = finite_diff_grad(f, m.teacher[j], h);
    out.insert(out.end(), g.data().begin(), g.data().end());
  }
  return out;
}

inline std::vector<Scalar> flatten(const std::vector<Tensor>& tensors) {
  std::vector<Scalar> out;
  for (const auto& t : tensors) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

/// Relative error of the unrolled meta-gradient against central differences.
inline Scalar meta_gradient_error(const MetaInstance& m, Scalar h = 1e-5) {
  const auto analytic = flatten(
      meta_gradient(m.config, m.batch, m.labels, m.quiz, m.quiz_labels, m.student, m.teacher));
  return relative_error(Tensor::vector(analytic), Tensor::vector(meta_gradient_fd(m, h)));
}

}  // namespace metadistil::testing
