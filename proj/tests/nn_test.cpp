#include "metadistil/error.hpp"
#include "metadistil/nn.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace metadistil;
using metadistil::testing::Builder;
using metadistil::testing::first_order_error;
using metadistil::testing::random_tensor;

namespace {

// Brute-force KL(p || q) for a single row of logits at temperature t.
double row_kl(std::vector<double> teacher, std::vector<double> student, double t) {
  auto dist = [t](std::vector<double> z) {
    double total = 0.0;
    for (auto& v : z) total += (v = std::exp(v / t));
    for (auto& v : z) v /= total;
    return z;
  };
  const auto p = dist(std::move(teacher));
  const auto q = dist(std::move(student));
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

std::vector<double> row(const Tensor& t, Eigen::Index r) {
  std::vector<double> out(static_cast<std::size_t>(t.cols()));
  for (Eigen::Index c = 0; c < t.cols(); ++c) out[static_cast<std::size_t>(c)] = t(r, c);
  return out;
}

// Smallest |pre-activation| over all hidden units, computed directly.
double min_hidden_margin(const MlpSpec& spec, const ParamSet& p, const Tensor& x) {
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

}  // namespace

TEST(InitParams, CountZeroBiasesAndDeterminism) {
  const MlpSpec spec{{2, 4, 3}};
  EXPECT_EQ(spec.parameter_count(), 27u);
  const ParamSet p = init_params(spec, 42);
  EXPECT_EQ(p.scalar_count(), 27u);
  EXPECT_TRUE(p.matches(spec));
  EXPECT_EQ(p[1], Tensor::zeros({4}));
  EXPECT_EQ(p[3], Tensor::zeros({3}));
  EXPECT_EQ(p, init_params(spec, 42));
  EXPECT_FALSE(p == init_params(spec, 43));
  const double bound = 1.0 / std::sqrt(2.0);
  EXPECT_LE(p[0].matrix().cwiseAbs().maxCoeff(), bound);
}

TEST(InitParams, RejectsDegenerateSpecs) {
  EXPECT_THROW(init_params(MlpSpec{{3}}, 1), ConfigError);
  EXPECT_THROW(init_params(MlpSpec{{3, 0, 2}}, 1), ConfigError);
}

TEST(Forward, ZeroParamsGiveZeroLogits) {
  const MlpSpec spec{{2, 5, 3}};
  ParamSet p = init_params(spec, 1);
  std::vector<Tensor> zeros;
  for (const auto& t : p.tensors()) zeros.push_back(Tensor::zeros(t.shape()));
  p = p.with_values(zeros);
  Rng rng(3);
  EXPECT_EQ(forward(spec, p, random_tensor(rng, {4, 2})), Tensor::zeros({4, 3}));
}

TEST(Forward, SingleLinearLayer) {
  const MlpSpec spec{{1, 1}};
  const ParamSet p = init_params(spec, 1).with_values({Tensor::matrix(1, 1, {2}), Tensor::vector({1})});
  EXPECT_EQ(forward(spec, p, Tensor::matrix(1, 1, {3})), Tensor::matrix(1, 1, {7}));
}

TEST(Forward, NegativePreActivationsLeaveBiasPath) {
  const MlpSpec spec{{1, 2, 2}};
  const ParamSet p = init_params(spec, 1).with_values({
      Tensor::matrix(1, 2, {-1, -2}), Tensor::vector({-0.5, -0.1}),
      Tensor::matrix(2, 2, {3, 4, 5, 6}), Tensor::vector({0.25, -0.75}),
  });
  EXPECT_EQ(forward(spec, p, Tensor::matrix(2, 1, {1, 2})), Tensor::matrix(2, 2, {0.25, -0.75, 0.25, -0.75}));
}

TEST(Forward, ShapeMismatch) {
  const MlpSpec spec{{3, 2}};
  EXPECT_THROW(forward(spec, init_params(spec, 1), Tensor::matrix(1, 2, {1, 2})), ShapeError);
}

TEST(CrossEntropy, Examples) {
  const std::vector<int> y{1};
  EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 3, {0, 0, 0}), y), std::log(3.0), 1e-15);
  EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 3, {0, 30, 0}), y), 0.0, 1e-12);

  const Tensor a = Tensor::matrix(1, 3, {0.3, -1, 2});
  const Tensor b = Tensor::matrix(1, 3, {1, 0.5, -0.2});
  const double la = cross_entropy(a, std::vector<int>{0});
  const double lb = cross_entropy(b, std::vector<int>{2});
  const Tensor both = Tensor::matrix(2, 3, {0.3, -1, 2, 1, 0.5, -0.2});
  EXPECT_NEAR(cross_entropy(both, std::vector<int>{0, 2}), (la + lb) / 2, 1e-15);
}

TEST(CrossEntropy, OutOfRangeLabel) {
  EXPECT_THROW(cross_entropy(Tensor::matrix(1, 3, {0, 0, 0}), std::vector<int>{3}), ConfigError);
  EXPECT_THROW(cross_entropy(Tensor::matrix(1, 3, {0, 0, 0}), std::vector<int>{-1}), ConfigError);
  EXPECT_THROW(cross_entropy(Tensor::matrix(1, 3, {0, 0, 0}), std::vector<int>{0, 1}), ShapeError);
}

TEST(KdLoss, IdentityIsZero) {
  Rng rng(8);
  const Tensor z = random_tensor(rng, {4, 3});
  EXPECT_EQ(kd_loss(KdLoss::mse(), z, z), 0.0);
  EXPECT_NEAR(kd_loss(KdLoss::kl(2.0), z, z), 0.0, 1e-15);
}

TEST(KdLoss, MseExample) {
  EXPECT_DOUBLE_EQ(kd_loss(KdLoss::mse(), Tensor::matrix(1, 2, {1, 3}), Tensor::matrix(1, 2, {1, 1})), 2.0);
}

TEST(KdLoss, SoftenedKlExample) {
  // KL([0.26894, 0.73106] || [0.73106, 0.26894]) = 0.46212
  const double expected = row_kl({0, 1}, {1, 0}, 1.0);
  EXPECT_NEAR(expected, 0.46212, 1e-5);
  EXPECT_NEAR(kd_loss(KdLoss::kl(1.0), Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {0, 1})), expected, 1e-14);
}

TEST(KdLoss, Errors) {
  const Tensor a = Tensor::matrix(1, 2, {1, 0});
  const Tensor b = Tensor::matrix(1, 3, {1, 0, 0});
  EXPECT_THROW(kd_loss(KdLoss::mse(), a, b), ShapeError);
  EXPECT_THROW(kd_loss(KdLoss::kl(0.0), a, a), ConfigError);
  EXPECT_THROW(kd_loss(KdLoss::kl(-1.0), a, a), ConfigError);
}

TEST(KdLoss, TemperatureOneIsPlainKl) {
  Rng rng(13);
  for (int c = 0; c < 100; ++c) {
    const Tensor s = random_tensor(rng, {3, 4});
    const Tensor t = random_tensor(rng, {3, 4});
    double expected = 0.0;
    for (Eigen::Index r = 0; r < 3; ++r) expected += row_kl(row(t, r), row(s, r), 1.0);
    EXPECT_NEAR(kd_loss(KdLoss::kl(1.0), s, t), expected / 3.0, 1e-13);
  }
}

TEST(KdLoss, HighTemperatureApproachesQuadraticLimit) {
  // T^2 KL -> sum_i d_i^2 / (2C), d = centred teacher logits - centred student logits.
  Rng rng(17);
  for (int c = 0; c < 100; ++c) {
    const Tensor s = random_tensor(rng, {2, 3});
    const Tensor t = random_tensor(rng, {2, 3});
    double limit = 0.0;
    for (Eigen::Index r = 0; r < 2; ++r) {
      Eigen::RowVectorXd d = (t.matrix().row(r).array() - t.matrix().row(r).mean()) -
                             (s.matrix().row(r).array() - s.matrix().row(r).mean());
      limit += d.squaredNorm() / (2.0 * 3.0);
    }
    limit /= 2.0;
    const double scaled = kd_loss(KdLoss::kl(1e3), s, t);
    EXPECT_NEAR(scaled, limit, 0.05 * limit);
  }
}

TEST(Losses, NonNegative) {
  Rng rng(21);
  for (int c = 0; c < 100; ++c) {
    const Tensor s = random_tensor(rng, {4, 3}, -5, 5);
    const Tensor t = random_tensor(rng, {4, 3}, -5, 5);
    std::vector<int> y(4);
    for (auto& v : y) v = static_cast<int>(rng.below(3));
    EXPECT_GE(cross_entropy(s, y), 0.0);
    EXPECT_GT(kd_loss(KdLoss::mse(), s, t), 0.0);
    EXPECT_GT(kd_loss(KdLoss::kl(2.0), s, t), 0.0);
  }
}

TEST(KdLoss, TeacherGradientExistsAndMatchesFiniteDifferences) {
  Rng rng(31);
  for (const KdLoss kind : {KdLoss::mse(), KdLoss::kl(1.0), KdLoss::kl(2.0), KdLoss::kl(4.0)}) {
    double worst = 0.0;
    for (int c = 0; c < 100; ++c) {
      const Tensor s = random_tensor(rng, {3, 4});
      const Tensor t = random_tensor(rng, {3, 4});
      Builder b = [&](Graph&, const std::vector<Var>& v) { return kd_loss(kind, v[0], v[1]); };
      worst = std::max(worst, first_order_error(b, {s, t}));

      Graph g;
      Var vs = g.constant(s);
      Var vt = g.parameter(t);
      const Tensor dt = backward(kd_loss(kind, vs, vt), std::vector<Var>{vt}).at(vt).value();
      EXPECT_GT(dt.matrix().norm(), 0.0);
    }
    EXPECT_LE(worst, 1e-6) << to_string(kind.kind) << " T=" << kind.temperature;
  }
}

TEST(StudentLoss, AlphaEndpointsAndMidpoint) {
  Rng rng(4);
  const Tensor s = random_tensor(rng, {3, 3});
  const Tensor t = random_tensor(rng, {3, 3});
  const std::vector<int> y{0, 2, 1};
  for (const KdLoss kd : {KdLoss::mse(), KdLoss::kl(2.0)}) {
    auto loss = [&](double alpha) {
      Graph g;
      return student_loss({alpha, kd}, g.constant(s), g.constant(t), y).value().item();
    };
    const double ce = cross_entropy(s, y);
    const double kl = kd_loss(kd, s, t);
    EXPECT_EQ(loss(1.0), ce);
    EXPECT_EQ(loss(0.0), kl);
    EXPECT_DOUBLE_EQ(loss(0.5), 0.5 * ce + 0.5 * kl);
  }
  EXPECT_DOUBLE_EQ(0.5 * 1.0 + 0.5 * 2.0, 1.5);
}

TEST(StudentLoss, RejectsAlphaOutsideUnitInterval) {
  Graph g;
  Var z = g.constant(Tensor::matrix(1, 2, {0, 1}));
  EXPECT_THROW(student_loss({1.5, KdLoss::mse()}, z, z, std::vector<int>{0}), ConfigError);
  EXPECT_THROW(student_loss({-0.1, KdLoss::mse()}, z, z, std::vector<int>{0}), ConfigError);
}

TEST(StudentLoss, KeepsTeacherDependenceAtAlphaOne) {
  Graph g;
  Var s = g.parameter(Tensor::matrix(1, 2, {0, 1}));
  Var t = g.parameter(Tensor::matrix(1, 2, {1, 0}));
  Var loss = student_loss({1.0, KdLoss::mse()}, s, t, std::vector<int>{0});
  EXPECT_TRUE(g.depends_on(loss, std::vector<Var>{t}));
  EXPECT_EQ(backward(loss, std::vector<Var>{t}).at(t).value().matrix().norm(), 0.0);
}

TEST(Sgd, Examples) {
  const MlpSpec spec{{1, 1}};
  const ParamSet p = init_params(spec, 1).with_values({Tensor::matrix(1, 1, {1}), Tensor::vector({-3})});
  const std::vector<Tensor> g{Tensor::matrix(1, 1, {2}), Tensor::vector({4})};
  EXPECT_EQ(sgd_step(p, g, 0.0), p);
  const std::vector<Tensor> zero{Tensor::zeros({1, 1}), Tensor::zeros({1})};
  EXPECT_EQ(sgd_step(p, zero, 0.1), p);
  const ParamSet stepped = sgd_step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(stepped[0].item(), 0.8);
  EXPECT_DOUBLE_EQ(stepped[1].item(), -3.4);
  EXPECT_THROW(sgd_step(p, std::span<const Tensor>(g.data(), 1), 0.1), ConfigError);
}

TEST(Sgd, DifferentiableMatchesValues) {
  const MlpSpec spec{{2, 3, 2}};
  const ParamSet p = init_params(spec, 9);
  Graph g;
  const auto vars = as_parameters(g, p);
  Rng rng(2);
  Var loss = cross_entropy(forward(spec, vars, g.constant(random_tensor(rng, {4, 2}))), std::vector<int>{0, 1, 1, 0});
  const GradientMap grads = backward(loss, vars);
  std::vector<Tensor> gv;
  for (Var v : vars) gv.push_back(grads.at(v).value());
  EXPECT_EQ(values_of(sgd_step(vars, grads, 0.3), p), sgd_step(p, gv, 0.3));

  GradientMap partial;
  partial.insert(vars[0], grads.at(vars[0]));
  EXPECT_THROW(sgd_step(vars, partial, 0.3), ConfigError);
}

TEST(Composition, MlpCrossEntropyGradientMatchesFiniteDifferences) {
  Rng rng(77);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const MlpSpec spec{{2, 1 + rng.below(4), 1 + rng.below(3), 2 + rng.below(2)}};
    // Random biases too: zero biases behind a dead unit sit exactly on a kink.
    std::vector<Tensor> values;
    for (const auto& t : init_params(spec, 0).tensors()) values.push_back(random_tensor(rng, t.shape()));
    const ParamSet p = init_params(spec, 0).with_values(values);
    const Tensor x = random_tensor(rng, {3, 2});
    if (min_hidden_margin(spec, p, x) < 1e-3) {
      --c;  // resample: central differences straddle a ReLU kink
      continue;
    }
    std::vector<int> y(3);
    for (auto& v : y) v = static_cast<int>(rng.below(spec.output_size()));
    Builder b = [&](Graph& g, const std::vector<Var>& v) {
      return cross_entropy(forward(spec, v, g.constant(x)), y);
    };
    worst = std::max(worst, first_order_error(b, p.tensors()));
  }
  EXPECT_LE(worst, 1e-6);
}
