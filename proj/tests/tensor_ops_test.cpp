#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gldr/ops.hpp"
#include "gldr/optim.hpp"
#include "oracles.hpp"

using namespace gldr;

namespace {

Tensor<double> seq(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({1, 1, n}, std::move(v));
}

Tensor<double> random_tensor(Shape dims, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = rng.uniform(-scale, scale);
  return t;
}

Tensor<double> conv(const Tensor<double>& x, std::vector<double> k, std::size_t d) {
  const std::size_t K = k.size();
  return conv1d_forward(x, Tensor<double>({1, 1, K}, std::move(k)),
                        Tensor<double>({1}, {0.0}), d);
}

}  // namespace

TEST(Conv1d, IdentityCenterTapAnyDilation) {
  const auto x = seq({1, 2, 3, 4, 5});
  for (std::size_t d = 1; d <= 6; ++d) EXPECT_EQ(conv(x, {0, 1, 0}, d), x);
}

TEST(Conv1d, DilatedTapsHandEvaluated) {
  const auto x = seq({1, 2, 3, 4, 5});
  // y_3 = k_{-1} x_5 + k_1 x_1 with 1-based positions.
  EXPECT_DOUBLE_EQ(conv(x, {1, 0, 2}, 2)[2], 7.0);
  // y_1 = x_3 + x_1 + (padding).
  EXPECT_DOUBLE_EQ(conv(x, {1, 1, 1}, 2)[0], 4.0);
}

TEST(Conv1d, DilationTwoOutputThreeSeesPositionsOneThreeFive) {
  std::set<std::size_t> support;
  for (std::size_t p = 0; p < 5; ++p) {
    std::vector<double> v(5, 0.0);
    v[p] = 1.0;
    if (conv(seq(v), {0.3, -0.7, 1.1}, 2)[2] != 0.0) support.insert(p);
  }
  EXPECT_EQ(support, (std::set<std::size_t>{0, 2, 4}));
}

TEST(Conv1d, ConfigurationErrors) {
  const auto x = seq({1, 2, 3});
  const Tensor<double> b({1}, {0.0});
  EXPECT_THROW(conv1d_forward(x, Tensor<double>({1, 1, 2}), b, 1), ConfigError);
  EXPECT_THROW(conv1d_forward(x, Tensor<double>({1, 1, 3}), b, 0), ConfigError);
  EXPECT_THROW(conv1d_forward(x, Tensor<double>({1, 2, 3}), b, 1), ConfigError);
  auto bad = seq({1, NAN, 3});
  EXPECT_THROW(conv1d_forward(bad, Tensor<double>({1, 1, 3}), b, 1), NumericError);
}

TEST(Conv1d, MatchesNaiveOracleOnRandomCases) {
  Rng rng(2024);
  double worst = 0.0;
  for (int c = 0; c < 300; ++c) {
    const std::size_t B = rng.between(1, 3), Cin = rng.between(1, 4),
                      Cout = rng.between(1, 4), n = rng.between(1, 64);
    const std::size_t k = 2 * rng.between(0, 2) + 1, d = rng.between(1, 8);
    auto x = random_tensor({B, Cin, n}, rng);
    auto w = random_tensor({Cout, Cin, k}, rng);
    auto b = random_tensor({Cout}, rng);
    worst = std::max(worst, max_abs_diff(conv1d_forward(x, w, b, d),
                                         oracle::naive_conv1d(x, w, b, d)));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Conv1d, DilationOneIsTextbookConvolution) {
  Rng rng(5);
  for (std::size_t k : {1, 3, 5, 7}) {
    std::vector<double> xs(20), ks(k);
    for (auto& v : xs) v = rng.uniform(-1, 1);
    for (auto& v : ks) v = rng.uniform(-1, 1);
    const auto y = conv(seq(xs), ks, 1);
    const auto ref = oracle::textbook_same_conv(xs, ks);
    for (std::size_t t = 0; t < xs.size(); ++t) EXPECT_NEAR(y[t], ref[t], 1e-15);
  }
}

TEST(Conv1d, LinearInInput) {
  Rng rng(9);
  auto x = random_tensor({2, 3, 17}, rng), y = random_tensor({2, 3, 17}, rng);
  auto w = random_tensor({4, 3, 5}, rng);
  Tensor<double> zero_b({4});
  const double a = 0.7, c = -1.3;
  Tensor<double> mix(x.dims());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + c * y[i];
  auto lhs = conv1d_forward(mix, w, zero_b, 3);
  auto fx = conv1d_forward(x, w, zero_b, 3), fy = conv1d_forward(y, w, zero_b, 3);
  for (std::size_t i = 0; i < lhs.size(); ++i)
    EXPECT_NEAR(lhs[i], a * fx[i] + c * fy[i], 1e-12);
}

TEST(Conv1d, ThreadCountDoesNotChangeBits) {
  Rng rng(77);
  // The second case spans several column tiles with a ragged tail.
  for (Shape xs : {Shape{3, 5, 40}, Shape{5, 7, 1001}}) {
    auto x = random_tensor(xs, rng);
    auto w = random_tensor({6, xs[1], 3}, rng);
    auto b = random_tensor({6}, rng);
    auto dy = random_tensor({xs[0], 6, xs[2]}, rng);
    auto run = [&](std::size_t threads) {
      set_num_threads(threads);
      Tensor<double> dx(x.dims()), dw(w.dims()), db(b.dims());
      auto y = conv1d_forward(x, w, b, 4);
      conv1d_backward(x, w, 4, dy, &dx, &dw, &db);
      return std::vector<Tensor<double>>{y, dx, dw, db};
    };
    const auto serial = run(1);
    for (std::size_t threads : {2, 3, 4, 7}) EXPECT_EQ(run(threads), serial) << threads;
    set_num_threads(1);
  }
}

TEST(Glu, GateAndValueHalves) {
  Graph<double> g;
  // channels: A = [0, 2], B = [5, ln 3]
  auto x = g.input(Tensor<double>({1, 4, 1}, {0.0, 2.0, 5.0, std::log(3.0)}));
  auto y = glu(x).value();
  EXPECT_EQ(y.dims(), (Shape{1, 2, 1}));
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 1.5, 1e-15);

  auto neutral = glu(g.input(Tensor<double>({1, 2, 3}, {1, -2, 4, 0, 0, 0}))).value();
  EXPECT_EQ(neutral, Tensor<double>({1, 1, 3}, {0.5, -1.0, 2.0}));
  EXPECT_THROW(glu(g.input(Tensor<double>({1, 3, 2}))), ConfigError);
}

TEST(Linear, HandCases) {
  Graph<double> g;
  auto x = g.input(Tensor<double>({2}, {1, 2}));
  auto W = g.input(Tensor<double>({2, 2}, {1, 1, 0, 1}));
  auto b = g.input(Tensor<double>({2}, {0, 1}));
  EXPECT_EQ(linear(x, W, b).value(), Tensor<double>({2}, {3, 3}));
  auto I = g.input(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto zb = g.input(Tensor<double>({2}));
  auto rows = g.input(Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(linear(rows, I, zb).value(), rows.value());
  auto zeros = g.input(Tensor<double>({4, 2}));
  auto out = linear(zeros, W, b).value();
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(out(r, 0), 0.0);
    EXPECT_EQ(out(r, 1), 1.0);
  }
  EXPECT_THROW(linear(g.input(Tensor<double>({3})), W, b), ConfigError);
}

TEST(Embedding, LookupAndLayout) {
  Graph<double> g;
  auto table = g.input(Tensor<double>({2, 1}, {5, 7}));
  auto y = embedding(g, IdTensor({1, 2}, {1, 0}), table).value();
  EXPECT_EQ(y, Tensor<double>({1, 1, 2}, {7, 5}));

  auto eye = g.input(Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  auto oh = embedding(g, IdTensor({1, 4}, {2, 0, 1, 2}), eye).value();
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t e = 0; e < 3; ++e)
      EXPECT_EQ(oh(0, e, t), (std::vector<int>{2, 0, 1, 2}[t] == static_cast<int>(e)) ? 1.0 : 0.0);

  auto empty = embedding(g, IdTensor({1, 0}, {}), table).value();
  EXPECT_EQ(empty.dims(), (Shape{1, 1, 0}));
  EXPECT_THROW(embedding(g, IdTensor({1, 1}, {2}), table), ConfigError);
  EXPECT_THROW(embedding(g, IdTensor({1, 1}, {-1}), table), ConfigError);
}

TEST(Elementwise, Basics) {
  Graph<double> g;
  auto x = g.input(Tensor<double>({3}, {-1, 0, 2}));
  EXPECT_EQ(relu(x).value(), Tensor<double>({3}, {0, 0, 2}));
  EXPECT_EQ(sigmoid(x).value()[1], 0.5);
  auto z = g.input(Tensor<double>({3}));
  EXPECT_EQ(add(x, z).value(), x.value());
  EXPECT_EQ(mul(x, x).value(), Tensor<double>({3}, {1, 0, 4}));
  EXPECT_THROW(add(x, g.input(Tensor<double>({2}))), ConfigError);
}

TEST(Dropout, IdentityCasesAndDeterminism) {
  Graph<double> g;
  Rng rng(1);
  auto x = g.input(random_tensor({2, 3, 50}, rng));
  EXPECT_EQ(dropout(x, 0.0, true, 3).value(), x.value());
  EXPECT_EQ(dropout(x, 0.5, false, 3).value(), x.value());
  auto a = dropout(x, 0.5, true, 42).value();
  auto b = dropout(x, 0.5, true, 42).value();
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(a[i] == 0.0 || a[i] == 2.0 * x.value()[i]);
  EXPECT_THROW(dropout(x, 1.0, true, 1), ConfigError);
  EXPECT_THROW(dropout(x, -0.1, true, 1), ConfigError);
}

TEST(WordDropout, RatesAndBounds) {
  IdTensor ids({1, 10000}, std::vector<std::int64_t>(10000, 7));
  EXPECT_EQ(word_dropout(ids, 0.0, true, 1, 0), ids);
  EXPECT_EQ(word_dropout(ids, 0.3, false, 1, 0), ids);
  auto all = word_dropout(ids, 1.0, true, 1, 0);
  EXPECT_EQ(std::count(all.ids.begin(), all.ids.end(), 0), 10000);
  auto some = word_dropout(ids, 0.1, true, 12345, 0);
  const double frac = std::count(some.ids.begin(), some.ids.end(), 0) / 10000.0;
  EXPECT_GE(frac, 0.08);
  EXPECT_LE(frac, 0.12);
  EXPECT_THROW(word_dropout(ids, 1.5, true, 1, 0), ConfigError);
  EXPECT_THROW(word_dropout(ids, -0.1, true, 1, 0), ConfigError);
}

TEST(SoftmaxCrossEntropy, ClosedForms) {
  Graph<double> g;
  auto equal = g.input(Tensor<double>({1, 2}, {0.3, 0.3}));
  EXPECT_NEAR(softmax_cross_entropy(equal, {1}).value()[0], std::log(2.0), 1e-15);

  const double a = 1.7, b = -0.4;
  auto gap = g.input(Tensor<double>({1, 2}, {a, b}));
  EXPECT_NEAR(softmax_cross_entropy(gap, {0}).value()[0],
              -std::log(std::exp(a) / (std::exp(a) + std::exp(b))), 1e-15);

  auto masked = g.input(Tensor<double>({1, 4}, {3, -2, 9, 1}));
  EXPECT_EQ(softmax_cross_entropy(masked, {1}, {0, 1, 0, 0}).value()[0], 0.0);
  EXPECT_THROW(softmax_cross_entropy(masked, {2}, {0, 1, 0, 0}), ConfigError);
}

TEST(Backward, SumGivesOnes) {
  Graph<double> g;
  auto x = g.input(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  g.backward(sum(x));
  for (double v : g.grad(x).data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ConvTapCounts) {
  Graph<double> g;
  auto x = g.input(Tensor<double>({1, 1, 9}), true);
  auto w = g.input(Tensor<double>({1, 1, 3}, {1, 1, 1}));
  auto b = g.input(Tensor<double>({1}));
  g.backward(sum(conv1d(x, w, b, 2)));
  // Position p is read by outputs p-2, p, p+2 when they exist.
  const std::vector<double> expected{2, 2, 3, 3, 3, 3, 3, 2, 2};
  for (std::size_t t = 0; t < 9; ++t) EXPECT_EQ(g.grad(x)[t], expected[t]);
}

TEST(Backward, IdentityKernelPassesUpstreamGradient) {
  Graph<double> g;
  Rng rng(3);
  auto x = g.input(random_tensor({1, 1, 6}, rng), true);
  auto w = g.input(Tensor<double>({1, 1, 3}, {0, 1, 0}));
  auto b = g.input(Tensor<double>({1}));
  auto r = g.input(random_tensor({1, 1, 6}, rng));
  g.backward(sum(mul(conv1d(x, w, b, 3), r)));
  EXPECT_EQ(g.grad(x), r.value());
}

TEST(Backward, UnrecordedOpIsAnError) {
  Graph<double> g(false);
  auto x = g.input(Tensor<double>({2}, {1, 2}), true);
  auto y = sum(relu(x));
  EXPECT_THROW(g.backward(y), ConfigError);
  Graph<double> g2;
  auto v = g2.input(Tensor<double>({2}, {1, 2}), true);
  EXPECT_THROW(g2.backward(relu(v)), ConfigError);  // not scalar
}

TEST(Adam, ZeroGradientLeavesParametersAlone) {
  Parameter<double> p("p", Tensor<double>({3}, {1, -2, 3}));
  p.zero_grad();
  AdamState<double> s;
  adam_step<double>({&p}, s);
  EXPECT_EQ(p.value, Tensor<double>({3}, {1, -2, 3}));
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepClosedForm) {
  Parameter<double> p("p", Tensor<double>({1}, {0.5}));
  p.grad = Tensor<double>({1}, {1.0});
  AdamState<double> s;  // lr 1e-4, betas 0.9/0.999, eps 1e-8
  adam_step<double>({&p}, s);
  // m-hat = v-hat = 1 after bias correction.
  EXPECT_NEAR(p.value[0], 0.5 - 1e-4 / (1.0 + 1e-8), 1e-17);

  Parameter<double> q("q", Tensor<double>({1}, {0.5}));
  q.grad = Tensor<double>({1}, {1.0});
  AdamState<double> s2;
  adam_step<double>({&q}, s2);
  adam_step<double>({&p}, s);
  adam_step<double>({&q}, s2);
  EXPECT_EQ(p.value, q.value);
  EXPECT_EQ(s.step, 2u);
}

TEST(Adam, DimensionMismatch) {
  Parameter<double> p("p", Tensor<double>({2}));
  p.zero_grad();
  AdamState<double> s;
  adam_step<double>({&p}, s);
  Parameter<double> other("o", Tensor<double>({3}));
  other.zero_grad();
  EXPECT_THROW(adam_step<double>({&other}, s), ConfigError);
}

// Workers spawned by a resize must not replay the previous job.
TEST(ThreadPool, ResizeBetweenJobs) {
  for (int round = 0; round < 200; ++round) {
    set_num_threads(1 + static_cast<std::size_t>(round % 5));
    std::vector<int> hits(37, 0);
    parallel_for(hits.size(), [&](std::size_t i) { ++hits[i]; });
    for (int h : hits) ASSERT_EQ(h, 1) << "round " << round;
  }
  set_num_threads(1);
}
