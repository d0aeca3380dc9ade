#include <gtest/gtest.h>

#include <cmath>

#include "gldr/analysis.hpp"
#include "gldr/baselines.hpp"

using namespace gldr;

namespace {

Tensor<double> random_input(Shape dims, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST(CostModel, MinDepthToCover) {
  EXPECT_EQ(cost_model(EncoderKind::dilated_conv, 1024, 100, 3, 1).min_depth_to_cover, 10u);
  for (std::uint64_t n = 2; n < 5000; n += 37) {
    for (std::uint64_t k : {3, 5, 7}) {
      const auto B = doubling_blocks_to_cover(n, k);
      EXPECT_GE(1 + (k - 1) * ((1ull << B) - 1), n);
      if (B > 0) {
        EXPECT_LT(1 + (k - 1) * ((1ull << (B - 1)) - 1), n);
      }
      const double closed =
          std::ceil(std::log2(double(n - 1) / double(k - 1) + 1.0) - 1e-12);
      EXPECT_EQ(B, static_cast<std::uint64_t>(closed)) << n << " " << k;
    }
  }
  EXPECT_EQ(cost_model(EncoderKind::recurrent, 100, 8, 3, 1).min_depth_to_cover, 1u);
  EXPECT_EQ(cost_model(EncoderKind::self_attn, 100, 8, 3, 1).min_depth_to_cover, 1u);
}

TEST(CostModel, PathsAndScaling) {
  EXPECT_EQ(cost_model(EncoderKind::recurrent, 100, 8, 3, 1).longest_path, 100u);
  EXPECT_EQ(cost_model(EncoderKind::recurrent, 100, 8, 3, 3).longest_path, 300u);
  EXPECT_EQ(cost_model(EncoderKind::dilated_conv, 100, 8, 3, 9).longest_path, 9u);
  const auto a = cost_model(EncoderKind::self_attn, 100, 64, 3, 1);
  const auto b = cost_model(EncoderKind::self_attn, 200, 64, 3, 1);
  EXPECT_EQ(b.ops_per_layer, 4 * a.ops_per_layer);
  const auto c = cost_model(EncoderKind::dilated_conv, 100, 64, 3, 5);
  EXPECT_EQ(c.ops_per_layer, 2u * 3 * 64 * 64 * 100);
  EXPECT_EQ(c.overall_ops, 5 * c.ops_per_layer);
  EXPECT_EQ(cost_model(EncoderKind::recurrent, 10, 4, 3, 1).ops_per_layer, 12u * 16 * 10);
  for (auto kind : {EncoderKind::recurrent, EncoderKind::self_attn, EncoderKind::dilated_conv}) {
    const auto r = cost_model(kind, 300, 16, 3, 4);
    EXPECT_LE(r.longest_path, r.overall_ops);
  }
  EXPECT_THROW(cost_model(EncoderKind::self_attn, 0, 1, 3, 1), ConfigError);
}

TEST(CostModel, ConvConstantMatchesImplementedMacs) {
  // A GLU conv from w to 2w channels with kernel k: 2w * w * k MACs per position.
  const std::size_t w = 6, n = 11, k = 3;
  const auto r = cost_model(EncoderKind::dilated_conv, n, w, k, 1);
  EXPECT_EQ(r.ops_per_layer, (2 * w) * w * k * n);
}

TEST(Chain, GldrIsConstantInLength) {
  const auto cfg = make_preset("drqa-passage-9");
  auto p = init_params<double>(cfg, 1);
  std::vector<std::size_t> chains;
  for (std::size_t n : {16, 64, 256, 1024}) {
    Graph<double> g(false);
    gldr_forward(g.input(random_input({1, 128, n}, n)), cfg, p);
    chains.push_back(longest_dependency_chain(g));
  }
  for (auto c : chains) EXPECT_EQ(c, chains.front());
  // 9 convs, 5 GLUs, 4 residual adds.
  EXPECT_EQ(chains.front(), 18u);
}

TEST(Chain, BiGruGrowsWithLength) {
  auto p = init_bigru<double>(4, 4, 1);
  for (std::size_t n : {8, 64}) {
    Graph<double> g(false);
    bigru_forward(g.input(random_input({1, 4, n}, n)), p);
    EXPECT_GE(longest_dependency_chain(g), n);
  }
}

TEST(Chain, SelfAttentionAndSingleOp) {
  auto p = init_self_attention<double>(4, 1);
  std::size_t first = 0;
  for (std::size_t n : {4, 32, 128}) {
    Graph<double> g(false);
    self_attention_forward(g.input(random_input({1, 4, n}, n)), p);
    const auto c = longest_dependency_chain(g);
    if (!first) first = c;
    EXPECT_EQ(c, first);
  }
  EXPECT_EQ(first, 5u);  // dense, relu, scores, softmax, mix
  Graph<double> g;
  Parameter<double> W("w", Tensor<double>({2, 3})), b("b", Tensor<double>({2}));
  linear(g.input(Tensor<double>({4, 3})), g.param(W), g.param(b));
  EXPECT_EQ(longest_dependency_chain(g), 1u);
}

TEST(Memory, SweepDepthRule) {
  EXPECT_EQ(memory_sweep_depth(50), 15u);
  EXPECT_EQ(memory_sweep_depth(100), 17u);
  EXPECT_EQ(memory_sweep_depth(200), 19u);
  EXPECT_EQ(memory_sweep_depth(4096), 29u);
  EXPECT_EQ(memory_sweep_config(200, 100).depth(), 19u);
}

TEST(Memory, AttentionElementsExample) {
  const auto r = activation_count(EncoderKind::self_attn, 512, 100, 64);
  EXPECT_EQ(r.attention_elements, 16777216u);
}

TEST(Memory, CountsMatchTracedGraphs) {
  const std::size_t w = 6, batch = 2;
  for (std::size_t n : {1, 5, 50, 100, 130}) {
    {
      auto p = init_self_attention<double>(w, 1);
      Graph<double> g(false);
      self_attention_forward(g.input(random_input({batch, w, n}, 1)), p);
      EXPECT_EQ(g.activation_elements(),
                activation_count(EncoderKind::self_attn, n, w, batch).activation_elements);
    }
    {
      const auto cfg = memory_sweep_config(n, w);
      auto p = init_params<double>(cfg, 1);
      Graph<double> g(false);
      gldr_forward(g.input(random_input({batch, w, n}, 2)), cfg, p);
      const auto r = activation_count(EncoderKind::dilated_conv, n, w, batch);
      EXPECT_EQ(g.activation_elements(), r.activation_elements) << n;
      EXPECT_EQ(r.depth, cfg.depth());
    }
    {
      auto p = init_bigru<double>(w, w, 1);
      Graph<double> g(false);
      bigru_forward(g.input(random_input({batch, w, n}, 3)), p);
      EXPECT_EQ(g.activation_elements(),
                activation_count(EncoderKind::recurrent, n, w, batch).activation_elements);
    }
  }
}

TEST(Memory, MonotoneAndRatios) {
  std::uint64_t prev_sa = 0, prev_gl = 0;
  for (std::uint64_t n = 16; n <= 8192; n *= 2) {
    const auto sa = activation_count(EncoderKind::self_attn, n, 100, 64).activation_elements;
    const auto gl = activation_count(EncoderKind::dilated_conv, n, 100, 64).activation_elements;
    EXPECT_GE(sa, prev_sa);
    EXPECT_GE(gl, prev_gl);
    if (prev_gl) {
      EXPECT_LE(double(gl) / double(prev_gl), 2.3) << n;
    }
    prev_sa = sa;
    prev_gl = gl;
  }
  const double r1 = double(activation_count(EncoderKind::self_attn, 1024, 100, 1).activation_elements) /
                    double(activation_count(EncoderKind::self_attn, 512, 100, 1).activation_elements);
  const double r2 = double(activation_count(EncoderKind::self_attn, 65536, 100, 1).activation_elements) /
                    double(activation_count(EncoderKind::self_attn, 32768, 100, 1).activation_elements);
  EXPECT_GT(r2, r1);
  EXPECT_NEAR(r2, 4.0, 0.05);
}

TEST(Scaling, ExponentExamples) {
  std::vector<std::pair<double, double>> quad, lin, nlogn;
  for (double n = 128; n <= 4096; n *= 2) {
    quad.emplace_back(n, 3 * n * n);
    lin.emplace_back(n, 7 * n);
    nlogn.emplace_back(n, n * std::log2(n));
  }
  EXPECT_NEAR(scaling_exponent(quad), 2.0, 1e-12);
  EXPECT_NEAR(scaling_exponent(lin), 1.0, 1e-12);
  const double s = scaling_exponent(nlogn);
  EXPECT_GE(s, 1.05);
  EXPECT_LE(s, 1.20);
}

TEST(Scaling, Errors) {
  EXPECT_THROW(scaling_exponent({{1, 1}, {2, 2}, {3, 3}}), ConfigError);
  EXPECT_THROW(scaling_exponent({{1, 1}, {2, 2}, {2, 3}, {4, 4}}), ConfigError);
  EXPECT_THROW(scaling_exponent({{1, 1}, {2, 0}, {3, 3}, {4, 4}}), ConfigError);
}

TEST(Kinds, ParseAliases) {
  EXPECT_EQ(parse_encoder_kind("self-attn"), EncoderKind::self_attn);
  EXPECT_EQ(parse_encoder_kind("gldr"), EncoderKind::dilated_conv);
  EXPECT_EQ(parse_encoder_kind("bigru"), EncoderKind::recurrent);
  EXPECT_THROW(parse_encoder_kind("lstm"), ConfigError);
}
