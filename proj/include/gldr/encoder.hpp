#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gldr/config.hpp"
#include "gldr/ops.hpp"
#include "gldr/rng.hpp"

namespace gldr {

template <typename T>
struct ConvParams {
  Parameter<T> weight;  // [conv_channels, in_channels, k]
  Parameter<T> bias;    // [conv_channels]
};

template <typename T>
struct BlockParams {
  ConvParams<T> conv_a;
  ConvParams<T> conv_b;
};

template <typename T>
struct EncoderParams {
  ConvParams<T> reduction;
  std::vector<BlockParams<T>> blocks;

  std::vector<Parameter<T>*> list() {
    std::vector<Parameter<T>*> out{&reduction.weight, &reduction.bias};
    for (auto& b : blocks) {
      out.push_back(&b.conv_a.weight);
      out.push_back(&b.conv_a.bias);
      out.push_back(&b.conv_b.weight);
      out.push_back(&b.conv_b.bias);
    }
    return out;
  }
};

enum class InitScheme { fan_in_uniform, zero_residual };

inline InitScheme parse_init_scheme(const std::string& s) {
  if (s == "fan-in-uniform") return InitScheme::fan_in_uniform;
  if (s == "zero-residual") return InitScheme::zero_residual;
  throw ConfigError("unknown init scheme '" + s + "'");
}

// Half-width of the fan-in uniform initializer, sqrt(1 / (k * Cin)).
inline double fan_in_bound(std::size_t kernel_size, std::size_t in_channels) {
  return std::sqrt(1.0 / static_cast<double>(kernel_size * in_channels));
}

template <typename T>
ConvParams<T> init_conv(const ConvLayerSpec& s, const std::string& prefix,
                        std::uint64_t seed) {
  const double bound = fan_in_bound(s.kernel_size, s.in_channels);
  Rng rng(seed);
  Tensor<T> w({s.conv_channels(), s.in_channels, s.kernel_size});
  for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> b({s.conv_channels()});
  for (auto& v : b.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return {Parameter<T>(prefix + ".w", std::move(w)),
          Parameter<T>(prefix + ".b", std::move(b))};
}

template <typename T>
EncoderParams<T> init_params(const GLDRConfig& config, std::uint64_t seed,
                             InitScheme scheme = InitScheme::fan_in_uniform,
                             const std::string& prefix = "enc") {
  validate(config);
  EncoderParams<T> p;
  p.reduction = init_conv<T>(config.reduction, prefix + ".reduce",
                             derive_seed(seed, 0));
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const std::string name = prefix + ".block" + std::to_string(i);
    BlockParams<T> bp{
        init_conv<T>(config.blocks[i].conv_a, name + ".a", derive_seed(seed, 2 * i + 1)),
        init_conv<T>(config.blocks[i].conv_b, name + ".b", derive_seed(seed, 2 * i + 2))};
    if (scheme == InitScheme::zero_residual) {
      bp.conv_b.weight.value.fill(T{0});
      bp.conv_b.bias.value.fill(T{0});
    }
    p.blocks.push_back(std::move(bp));
  }
  return p;
}

// Forward-pass options. Each layer derives its own dropout stream from
// `seed` and its layer index.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
};

template <typename T>
Var<T> conv_layer_forward(Var<T> x, const ConvLayerSpec& spec,
                          ConvParams<T>& params, const ForwardContext& ctx,
                          std::uint64_t layer) {
  Graph<T>& g = *x.graph;
  if (x.dim(1) != spec.in_channels)
    throw ConfigError("conv layer expects " + std::to_string(spec.in_channels) +
                      " channels, got " + std::to_string(x.dim(1)));
  x = dropout(x, spec.input_dropout, ctx.training, derive_seed(ctx.seed, layer));
  auto y = conv1d(x, g.param(params.weight), g.param(params.bias), spec.dilation);
  switch (spec.activation) {
    case Activation::glu: return glu(y);
    case Activation::relu: return relu(y);
    case Activation::none: return y;
  }
  return y;
}

// Dropout on the input, a conv emitting 2C channels, then GLU down to C.
template <typename T>
Var<T> dim_reduction_forward(Var<T> x, const ConvLayerSpec& spec,
                             ConvParams<T>& params, const ForwardContext& ctx) {
  return conv_layer_forward(x, spec, params, ctx, 0);
}

// x + conv_b(act(conv_a(x))); without the shortcut when residual is false.
template <typename T>
Var<T> residual_block_forward(Var<T> x, const ResidualBlockSpec& spec,
                              BlockParams<T>& params, const ForwardContext& ctx,
                              bool residual = true, std::uint64_t index = 0) {
  if (x.dim(1) != spec.width())
    throw ConfigError("residual block of width " + std::to_string(spec.width()) +
                      " got " + std::to_string(x.dim(1)) + " channels");
  auto h = conv_layer_forward(x, spec.conv_a, params.conv_a, ctx, 2 * index + 1);
  auto o = conv_layer_forward(h, spec.conv_b, params.conv_b, ctx, 2 * index + 2);
  return residual ? add(x, o) : o;
}

template <typename T>
Var<T> gldr_forward(Var<T> x, const GLDRConfig& config, EncoderParams<T>& params,
                    const ForwardContext& ctx = {}) {
  if (params.blocks.size() != config.blocks.size())
    throw ConfigError("encoder params do not match config '" + config.name + "'");
  auto h = dim_reduction_forward(x, config.reduction, params.reduction, ctx);
  for (std::size_t i = 0; i < config.blocks.size(); ++i)
    h = residual_block_forward(h, config.blocks[i], params.blocks[i], ctx,
                               config.residual, i + 1);
  return h;
}

// Inference helper: forward without recording backward rules.
template <typename T>
Tensor<T> gldr_infer(const Tensor<T>& x, const GLDRConfig& config,
                     EncoderParams<T>& params) {
  Graph<T> g(false);
  return gldr_forward(g.input(x), config, params).value();
}

}  // namespace gldr
