#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gldr/encoder.hpp"
#include "gldr/ops.hpp"

namespace gldr {

// One GRU direction. Input projections for all three gates are a 1-wide
// convolution so they run position-parallel; only the recurrence is serial.
template <typename T>
struct GRUCellParams {
  Parameter<T> input_weight;  // [3h, C, 1], rows ordered update|reset|candidate
  Parameter<T> input_bias;    // [3h]
  Parameter<T> recurrent;     // [3h, h]

  std::size_t hidden() const { return recurrent.value.dim(1); }
  std::size_t input_width() const { return input_weight.value.dim(1); }
};

template <typename T>
struct BiGRUParams {
  GRUCellParams<T> fwd;
  GRUCellParams<T> bwd;

  std::vector<Parameter<T>*> list() {
    return {&fwd.input_weight, &fwd.input_bias, &fwd.recurrent,
            &bwd.input_weight, &bwd.input_bias, &bwd.recurrent};
  }
};

template <typename T>
GRUCellParams<T> init_gru_cell(std::size_t input, std::size_t hidden,
                               std::uint64_t seed, const std::string& prefix) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  Rng rng(seed);
  auto fill = [&](Shape dims) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  };
  return {Parameter<T>(prefix + ".wx", fill({3 * hidden, input, 1})),
          Parameter<T>(prefix + ".bx", fill({3 * hidden})),
          Parameter<T>(prefix + ".u", fill({3 * hidden, hidden}))};
}

template <typename T>
BiGRUParams<T> init_bigru(std::size_t input, std::size_t hidden,
                          std::uint64_t seed) {
  return {init_gru_cell<T>(input, hidden, derive_seed(seed, 1), "gru.fwd"),
          init_gru_cell<T>(input, hidden, derive_seed(seed, 2), "gru.bwd")};
}

template <typename T>
std::vector<Var<T>> gru_direction(Var<T> x, GRUCellParams<T>& p, bool reverse) {
  Graph<T>& g = *x.graph;
  const std::size_t B = x.dim(0), n = x.dim(2), H = p.hidden();
  auto xproj = conv1d(x, g.param(p.input_weight), g.param(p.input_bias), 1);
  auto U = g.param(p.recurrent);
  Var<T> h = g.input(Tensor<T>({B, H}));
  std::vector<Var<T>> states(n);
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t t = reverse ? n - 1 - step : step;
    h = gru_step(position(xproj, t), h, U);
    states[t] = h;
  }
  return states;
}

// Bidirectional GRU: [B,C,n] -> [B,2h,n], forward states then backward.
template <typename T>
Var<T> bigru_forward(Var<T> x, BiGRUParams<T>& params) {
  if (x.value().rank() != 3)
    throw ConfigError("bigru: input must be [batch,channels,n]");
  if (x.dim(2) == 0) throw ConfigError("bigru: empty sequence");
  if (x.dim(1) != params.fwd.input_width() || x.dim(1) != params.bwd.input_width())
    throw ConfigError("bigru: expected " + std::to_string(params.fwd.input_width()) +
                      " input channels, got " + std::to_string(x.dim(1)));
  auto f = stack_positions(gru_direction(x, params.fwd, false));
  auto b = stack_positions(gru_direction(x, params.bwd, true));
  return concat_channels(f, b);
}

template <typename T>
struct SelfAttnParams {
  Parameter<T> weight;  // [w, w, 1]
  Parameter<T> bias;    // [w]

  std::vector<Parameter<T>*> list() { return {&weight, &bias}; }
};

template <typename T>
SelfAttnParams<T> init_self_attention(std::size_t width, std::uint64_t seed) {
  auto c = init_conv<T>({width, width, 1, 1, Activation::none, 0.0}, "attn.dense", seed);
  return {std::move(c.weight), std::move(c.bias)};
}

template <typename T>
struct AttentionOutput {
  Var<T> output;     // [B, w, n]
  Var<T> attention;  // [B, n, n]
};

// p = relu(dense(x)); attention = row-softmax(p^T p); out_i = sum_j a_ij x_j.
template <typename T>
AttentionOutput<T> self_attention_forward(Var<T> x, SelfAttnParams<T>& params) {
  Graph<T>& g = *x.graph;
  if (x.value().rank() != 3 || x.dim(2) == 0)
    throw ConfigError("self_attention: input must be [batch,w,n] with n >= 1");
  if (x.dim(1) != params.weight.value.dim(1))
    throw ConfigError("self_attention: width mismatch");
  auto p = relu(conv1d(x, g.param(params.weight), g.param(params.bias), 1));
  auto attention = softmax_last(bmm_tn(p, p));
  return {bmm_nt(x, attention), attention};
}

}  // namespace gldr
