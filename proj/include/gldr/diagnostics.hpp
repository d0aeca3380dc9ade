#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "gldr/baselines.hpp"
#include "gldr/encoder.hpp"
#include "gldr/gradcheck.hpp"
#include "gldr/reader.hpp"

namespace gldr {

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

namespace detail {

// Owns the parameters of one check; deque keeps addresses stable.
struct CheckFixture {
  Rng rng;
  std::deque<Parameter<double>> params;

  explicit CheckFixture(std::uint64_t seed) : rng(seed) {}

  Parameter<double>& make(Shape dims, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(dims));
    for (auto& v : t.storage()) v = rng.uniform(lo, hi);
    params.emplace_back("p" + std::to_string(params.size()), std::move(t));
    return params.back();
  }

  std::vector<Parameter<double>*> list() {
    std::vector<Parameter<double>*> out;
    for (auto& p : params) out.push_back(&p);
    return out;
  }
};

// Contracts y with fixed random weights so every element gets a distinct
// upstream gradient.
inline Var<double> project(Graph<double>& g, Var<double> y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<double> w(y.dims());
  for (auto& v : w.storage()) v = rng.uniform(-1.0, 1.0);
  return sum(mul(y, g.input(std::move(w))));
}

}  // namespace detail

// Central-difference check of every differentiable op, the two baseline
// encoders, the reader's fusion layer, and a 9-layer GLDR feeding the span
// loss with dropout active under a fixed seed. 64-bit throughout.
inline std::vector<GradCheckCase> gradcheck_suite(const GradCheckOptions& opt = {}) {
  using detail::CheckFixture;
  using detail::project;
  using G = Graph<double>;
  std::vector<GradCheckCase> out;
  auto run = [&](const std::string& name, CheckFixture& f,
                 const std::function<Var<double>(G&)>& build,
                 std::vector<Parameter<double>*> extra = {}) {
    auto params = f.list();
    params.insert(params.end(), extra.begin(), extra.end());
    out.push_back({name, grad_check(params, build, opt)});
  };

  for (std::size_t d : {1, 2, 3, 5})
    for (std::size_t k : {1, 3, 5}) {
      CheckFixture f(10 * d + k);
      auto& x = f.make({2, 3, 11});
      auto& w = f.make({4, 3, k});
      auto& b = f.make({4});
      run("conv1d k=" + std::to_string(k) + " d=" + std::to_string(d), f,
          [&](G& g) { return project(g, conv1d(g.param(x), g.param(w), g.param(b), d)); });
    }
  {
    CheckFixture f(1);
    auto& x = f.make({2, 6, 5});
    run("glu", f, [&](G& g) { return project(g, glu(g.param(x))); });
  }
  {
    CheckFixture f(2);
    auto& x = f.make({3, 4, 5});
    auto& w = f.make({6, 5});
    auto& b = f.make({6});
    run("linear", f,
        [&](G& g) { return project(g, linear(g.param(x), g.param(w), g.param(b))); });
  }
  {
    CheckFixture f(3);
    auto& table = f.make({7, 4});
    const IdTensor ids{{2, 5}, {0, 3, 3, 6, 1, 3, 2, 0, 0, 5}};
    run("embedding", f, [&](G& g) { return project(g, embedding(g, ids, g.param(table))); });
  }
  {
    CheckFixture f(4);
    auto& x = f.make({3, 4, 5});
    run("relu+sigmoid+tanh", f, [&](G& g) {
      auto v = g.param(x);
      return project(g, add(add(relu(v), sigmoid(v)), tanh(v)));
    });
  }
  {
    CheckFixture f(5);
    auto& a = f.make({2, 3, 4});
    auto& b = f.make({2, 3, 4});
    run("add/sub/mul/scale/reshape/sum", f, [&](G& g) {
      auto x = g.param(a), y = g.param(b);
      return project(g, reshape(sub(mul(x, y), scale(add(x, y), 0.5)), {6, 4}));
    });
  }
  {
    CheckFixture f(6);
    auto& x = f.make({2, 3, 10});
    run("dropout", f, [&](G& g) { return project(g, dropout(g.param(x), 0.3, true, 17)); });
  }
  {
    CheckFixture f(7);
    auto& logits = f.make({3, 6}, -2.0, 2.0);
    const std::vector<std::size_t> targets{1, 5, 0};
    std::vector<std::uint8_t> mask(18, 1);
    mask[3] = mask[4] = mask[6] = 0;
    run("softmax_cross_entropy", f, [&](G& g) {
      return softmax_cross_entropy(g.param(logits), targets, mask);
    });
  }
  {
    CheckFixture f(8);
    auto& a = f.make({2, 3, 4});
    auto& c = f.make({2, 3, 5});
    auto& x = f.make({2, 2, 4});
    run("bmm_tn/softmax_last/bmm_nt/concat", f, [&](G& g) {
      auto s = softmax_last(bmm_tn(g.param(a), g.param(c)));
      return project(g, concat_channels(bmm_nt(g.param(c), s), g.param(x)));
    });
  }
  {
    CheckFixture f(9);
    auto& x = f.make({2, 3, 4});
    run("position/stack_positions", f, [&](G& g) {
      auto v = g.param(x);
      std::vector<Var<double>> cols;
      for (std::size_t t = 4; t-- > 0;) cols.push_back(scale(position(v, t), 2.0));
      return project(g, stack_positions(cols));
    });
  }
  {
    CheckFixture f(10);
    auto& xp = f.make({2, 9});
    auto& h = f.make({2, 3});
    auto& u = f.make({9, 3});
    run("gru_step", f, [&](G& g) {
      auto h1 = gru_step(g.param(xp), g.param(h), g.param(u));
      return project(g, gru_step(g.param(xp), h1, g.param(u)));
    });
  }
  {
    auto gru = init_bigru<double>(3, 4, 5);
    auto attn = init_self_attention<double>(8, 6);
    CheckFixture f(11);
    auto& x = f.make({2, 3, 5});
    auto extra = gru.list();
    for (auto* p : attn.list()) extra.push_back(p);
    run("bigru+self-attention", f, [&](G& g) {
      return project(g, self_attention_forward(bigru_forward(g.param(x), gru), attn).output);
    }, extra);
  }
  {
    CheckFixture f(12);
    auto& q = f.make({2, 4, 3});
    auto& p = f.make({2, 4, 6});
    run("reader fusion", f, [&](G& g) { return project(g, fuse(g.param(q), g.param(p))); });
  }
  {
    auto cfg = make_config("gc", 6, 8, {1, 2, 4, 8}, 0.1);
    auto enc = init_params<double>(cfg, 42);
    CheckFixture f(13);
    auto& x = f.make({2, 6, 20});
    auto& sw = f.make({1, 8, 1}, -0.5, 0.5);
    auto& sb = f.make({1}, -0.1, 0.1);
    auto& ew = f.make({1, 8, 1}, -0.5, 0.5);
    auto& eb = f.make({1}, -0.1, 0.1);
    const std::vector<std::size_t> starts{3, 11}, ends{4, 13};
    run("gldr-9-layer+span-loss", f, [&](G& g) {
      auto h = gldr_forward(g.param(x), cfg, enc, ForwardContext{true, 7});
      auto s = reshape(conv1d(h, g.param(sw), g.param(sb), 1), {2, 20});
      auto e = reshape(conv1d(h, g.param(ew), g.param(eb), 1), {2, 20});
      return add(softmax_cross_entropy(s, starts), softmax_cross_entropy(e, ends));
    }, enc.list());
  }
  return out;
}

}  // namespace gldr
