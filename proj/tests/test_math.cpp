#include <gtest/gtest.h>

#include <cmath>
#include <utility>

#include "scalar_oracle.hpp"
#include "spanmatch/checks.hpp"
#include "spanmatch/layers.hpp"

using namespace spanmatch;

TEST(Attention, SingleKeyIsReturned) {
  const std::vector<double> q{3.0, -1.0};
  const auto out = attention_aggregate(q, Matrix::from_rows({{7.0, 2.0}}));
  EXPECT_DOUBLE_EQ(out[0], 7.0);
  EXPECT_DOUBLE_EQ(out[1], 2.0);
}

TEST(Attention, IdenticalKeysGiveThatKey) {
  const std::vector<double> q{1.0, 0.0};
  const auto out = attention_aggregate(q, Matrix::from_rows({{5.0, 5.0}, {5.0, 5.0}}));
  EXPECT_NEAR(out[0], 5.0, 1e-12);
  EXPECT_NEAR(out[1], 5.0, 1e-12);
}

TEST(Attention, UnitKeysMatchScalarSoftmax) {
  // softmax([1, 0]) = [e / (e + 1), 1 / (e + 1)]
  const long double e = std::exp(1.0L);
  const double w0 = static_cast<double>(e / (e + 1.0L));
  const double w1 = static_cast<double>(1.0L / (e + 1.0L));
  const std::vector<double> q{1.0, 0.0};
  const auto out = attention_aggregate(q, Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
  EXPECT_NEAR(out[0], w0, 1e-14);
  EXPECT_NEAR(out[1], w1, 1e-14);
  EXPECT_NEAR(out[0], 0.7311, 1e-4);
  EXPECT_NEAR(out[1], 0.2689, 1e-4);
}

TEST(Attention, EmptyKeysRejected) {
  const std::vector<double> q{1.0};
  EXPECT_THROW(attention_aggregate(q, Matrix(0, 1)), InvariantError);
}

namespace {

BlockParams random_block(std::size_t d, std::size_t ff, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  BlockParams b = make_block(d, ff);
  for (Matrix* m : {&b.w1, &b.w2, &b.ln_gain, &b.ln_bias})
    for (double& v : m->values()) v = u(rng);
  return b;
}

}  // namespace

TEST(ResidualFfn, ZeroSecondLayerIsLayerNorm) {
  BlockParams b = make_block(3, 6);
  b.w1 = Matrix(3, 6, 0.5);
  const std::vector<double> x{1.0, 2.0, 4.0};
  const std::vector<double> a{0.3, -0.2, 0.9};
  const auto out = residual_ffn_block(x, a, b);
  const auto expect = oracle::layer_norm(x, {1, 1, 1}, {0, 0, 0});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(ResidualFfn, ConstantInputGivesBias) {
  BlockParams b = make_block(4, 8);
  b.ln_bias = Matrix::from_rows({{0.1, -0.2, 0.3, 0.4}});
  const std::vector<double> x(4, 2.5);
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0};
  const auto out = residual_ffn_block(x, a, b);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(out[i], b.ln_bias(0, i), 1e-12);
}

TEST(ResidualFfn, MatchesScalarRecomputation) {
  const BlockParams b = random_block(3, 5, 11);
  const std::vector<double> x{0.4, -1.3, 0.8};
  const std::vector<double> a{-0.6, 0.2, 1.1};
  const auto out = residual_ffn_block(x, a, b);
  const auto expect = oracle::ffn(x, a, b);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(Autodiff, QuadraticGradientIsTwiceParams) {
  ad::Tape tape;
  const Matrix p = Matrix::from_rows({{1.5, -2.0, 0.25}, {3.0, 0.0, -0.5}});
  ad::Var x = tape.leaf(p);
  ad::Var loss = ad::sum(ad::row_sqnorm(x));
  tape.backward(loss);
  const Matrix g = tape.grad(x);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(g.values()[i], 2.0 * p.values()[i]);
}

TEST(Autodiff, UnusedLeafHasZeroGradient) {
  ad::Tape tape;
  ad::Var used = tape.leaf(Matrix::from_rows({{1.0, 2.0}}));
  ad::Var unused = tape.leaf(Matrix::from_rows({{3.0, 4.0}}));
  tape.backward(ad::sum(used));
  const Matrix g = tape.grad(unused);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, EveryOperationMatchesFiniteDifferences) {
  const auto results = checks::gradient_checks(5);
  ASSERT_FALSE(results.empty());
  bool saw_loss = false;
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed()) << r.name << " max rel error " << r.max_rel_error;
    EXPECT_GT(r.compared, 0u) << r.name;
    saw_loss = saw_loss || r.name == "episode_loss";
  }
  EXPECT_TRUE(saw_loss);
}

namespace {

Parameters tiny_params(double fill) {
  ModelConfig c;
  c.d_w = 2;
  c.d = 2;
  c.d_ff = 2;
  Parameters p = init_parameters(c, 1);
  for (auto& [name, m] : p.named())
    for (double& v : m->values()) v = fill;
  return p;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  Parameters p = tiny_params(1.0);
  Gradients g = p.zeros_like();
  double sign = 1.0;
  for (auto& [name, m] : g.named())
    for (double& v : m->values()) v = (sign = -sign) * 0.37;
  const Parameters before = p;
  AdamState st = AdamState::for_parameters(p);
  adam_step(p, g, st, 1e-3);
  const auto pn = p.named();
  const auto bn = before.named();
  const auto gn = std::as_const(g).named();
  for (std::size_t i = 0; i < pn.size(); ++i)
    for (std::size_t k = 0; k < pn[i].second->size(); ++k) {
      const double moved = pn[i].second->values()[k] - bn[i].second->values()[k];
      EXPECT_NEAR(moved, -1e-3 * (gn[i].second->values()[k] > 0 ? 1.0 : -1.0), 1e-9);
    }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameters p = tiny_params(0.7);
  const Parameters before = p;
  AdamState st = AdamState::for_parameters(p);
  adam_step(p, p.zeros_like(), st, 0.1);
  EXPECT_EQ(p, before);
}

TEST(Adam, TwoStepsMatchHandUnrolledRecurrence) {
  Parameters p = tiny_params(0.5);
  Gradients g = p.zeros_like();
  for (auto& [name, m] : g.named())
    for (double& v : m->values()) v = 0.2;
  AdamState st = AdamState::for_parameters(p);
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, grad = 0.2;
  adam_step(p, g, st, lr);
  adam_step(p, g, st, lr);
  double x = 0.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  for (const auto& [name, mat] : p.named())
    for (double val : mat->values()) EXPECT_NEAR(val, x, 1e-15);
}
