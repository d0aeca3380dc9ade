#include <gtest/gtest.h>

#include <cmath>

#include "gldr/baselines.hpp"

using namespace gldr;

namespace {

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor<double> random_input(Shape dims, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

Tensor<double> run_bigru(const Tensor<double>& x, BiGRUParams<double>& p) {
  Graph<double> g(false);
  return bigru_forward(g.input(x), p).value();
}

void set_scalar_cell(GRUCellParams<double>& c, std::vector<double> wx,
                     std::vector<double> bx, std::vector<double> u) {
  c.input_weight.value = Tensor<double>({3, 1, 1}, std::move(wx));
  c.input_bias.value = Tensor<double>({3}, std::move(bx));
  c.recurrent.value = Tensor<double>({3, 1}, std::move(u));
}

double hand_step(double x, double h, const std::vector<double>& wx,
                 const std::vector<double>& bx, const std::vector<double>& u) {
  const double z = sig(wx[0] * x + bx[0] + u[0] * h);
  const double r = sig(wx[1] * x + bx[1] + u[1] * h);
  const double c = std::tanh(wx[2] * x + bx[2] + u[2] * (r * h));
  return (1 - z) * h + z * c;
}

}  // namespace

TEST(BiGru, ZeroWeightsGiveZeroOutput) {
  auto p = init_bigru<double>(3, 4, 1);
  for (auto* prm : p.list()) prm->value.fill(0.0);
  const auto y = run_bigru(random_input({2, 3, 6}, 2), p);
  EXPECT_EQ(y.dims(), (Shape{2, 8, 6}));
  for (double v : y.storage()) EXPECT_EQ(v, 0.0);
}

TEST(BiGru, SingleStepIsDirectionSymmetricWithTiedParams) {
  auto p = init_bigru<double>(3, 4, 1);
  p.bwd.input_weight.value = p.fwd.input_weight.value;
  p.bwd.input_bias.value = p.fwd.input_bias.value;
  p.bwd.recurrent.value = p.fwd.recurrent.value;
  const auto y = run_bigru(random_input({2, 3, 1}, 3), p);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y(b, j, 0), y(b, 4 + j, 0));
}

TEST(BiGru, TwoStepScalarHandRollout) {
  const std::vector<double> wx{0.5, -0.3, 0.8}, bx{0.1, 0.2, -0.1}, u{0.7, -0.4, 0.9};
  const std::vector<double> wx2{-0.2, 0.6, 0.4}, bx2{0.0, -0.1, 0.3}, u2{-0.5, 0.3, 0.2};
  auto p = init_bigru<double>(1, 1, 0);
  set_scalar_cell(p.fwd, wx, bx, u);
  set_scalar_cell(p.bwd, wx2, bx2, u2);
  const double x0 = 1.5, x1 = -0.7;
  const auto y = run_bigru(Tensor<double>({1, 1, 2}, {x0, x1}), p);
  const double f0 = hand_step(x0, 0.0, wx, bx, u);
  const double f1 = hand_step(x1, f0, wx, bx, u);
  const double b1 = hand_step(x1, 0.0, wx2, bx2, u2);
  const double b0 = hand_step(x0, b1, wx2, bx2, u2);
  EXPECT_NEAR(y(0, 0, 0), f0, 1e-15);
  EXPECT_NEAR(y(0, 0, 1), f1, 1e-15);
  EXPECT_NEAR(y(0, 1, 0), b0, 1e-15);
  EXPECT_NEAR(y(0, 1, 1), b1, 1e-15);
}

TEST(BiGru, EveryOutputDependsOnEveryInput) {
  auto p = init_bigru<double>(2, 3, 4);
  const std::size_t n = 9;
  const auto x = random_input({1, 2, n}, 5);
  const auto base = run_bigru(x, p);
  for (std::size_t q = 0; q < n; ++q) {
    auto xp = x;
    xp(0, 0, q) += 0.5;
    const auto y = run_bigru(xp, p);
    for (std::size_t t = 0; t < n; ++t) {
      bool changed = false;
      for (std::size_t c = 0; c < 6; ++c) changed |= y(0, c, t) != base(0, c, t);
      EXPECT_TRUE(changed) << "input " << q << " output " << t;
    }
  }
}

TEST(BiGru, ShapeErrors) {
  auto p = init_bigru<double>(3, 4, 1);
  Graph<double> g(false);
  EXPECT_THROW(bigru_forward(g.input(Tensor<double>({1, 2, 5})), p), ConfigError);
  EXPECT_THROW(bigru_forward(g.input(Tensor<double>({1, 3, 0})), p), ConfigError);
}

TEST(SelfAttention, SinglePositionAttendsToItself) {
  auto p = init_self_attention<double>(4, 1);
  const auto x = random_input({2, 4, 1}, 2);
  Graph<double> g(false);
  auto out = self_attention_forward(g.input(x), p);
  EXPECT_EQ(out.attention.dims(), (Shape{2, 1, 1}));
  for (double v : out.attention.value().storage()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(out.output.value(), x);
}

TEST(SelfAttention, IdenticalTokensGiveUniformRows) {
  auto p = init_self_attention<double>(3, 1);
  Tensor<double> x({1, 3, 5});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 5; ++t) x(0, c, t) = 0.3 * c - 0.2;
  Graph<double> g(false);
  auto a = self_attention_forward(g.input(x), p).attention.value();
  for (double v : a.storage()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(SelfAttention, OrthogonalProjectionsClosedForm) {
  auto p = init_self_attention<double>(2, 1);
  p.weight.value = Tensor<double>({2, 2, 1}, {1, 0, 0, 1});
  p.bias.value.fill(0.0);
  const auto x = Tensor<double>({1, 2, 2}, {2, 0, 0, 3});  // x0=(2,0), x1=(0,3)
  Graph<double> g(false);
  auto out = self_attention_forward(g.input(x), p);
  const auto& a = out.attention.value();
  // scores [[4,0],[0,9]]
  EXPECT_NEAR(a(0, 0, 0), std::exp(4.0) / (std::exp(4.0) + 1.0), 1e-15);
  EXPECT_NEAR(a(0, 0, 1), 1.0 / (std::exp(4.0) + 1.0), 1e-15);
  EXPECT_NEAR(a(0, 1, 1), std::exp(9.0) / (std::exp(9.0) + 1.0), 1e-15);
  EXPECT_NEAR(out.output.value()(0, 0, 0), 2.0 * a(0, 0, 0), 1e-15);
  EXPECT_NEAR(out.output.value()(0, 1, 0), 3.0 * a(0, 0, 1), 1e-15);
}

TEST(SelfAttention, RowsSumToOneOnRandomInputs) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t w = rng.between(1, 6), n = rng.between(1, 40);
    auto p = init_self_attention<double>(w, trial);
    Tensor<double> x({2, w, n});
    for (auto& v : x.storage()) v = rng.uniform(-3.0, 3.0);
    Graph<double> g(false);
    const auto a = self_attention_forward(g.input(x), p).attention.value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += a(b, i, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(SelfAttention, ShapeErrors) {
  auto p = init_self_attention<double>(3, 1);
  Graph<double> g(false);
  EXPECT_THROW(self_attention_forward(g.input(Tensor<double>({1, 4, 5})), p), ConfigError);
  EXPECT_THROW(self_attention_forward(g.input(Tensor<double>({1, 3, 0})), p), ConfigError);
}
