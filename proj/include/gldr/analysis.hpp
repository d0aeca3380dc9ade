#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gldr/autodiff.hpp"
#include "gldr/config.hpp"

namespace gldr {

enum class EncoderKind { recurrent, self_attn, dilated_conv };

inline const char* to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::recurrent: return "recurrent";
    case EncoderKind::self_attn: return "self-attn";
    case EncoderKind::dilated_conv: return "dilated-conv";
  }
  return "?";
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "recurrent" || s == "bigru") return EncoderKind::recurrent;
  if (s == "self-attn") return EncoderKind::self_attn;
  if (s == "dilated-conv" || s == "gldr") return EncoderKind::dilated_conv;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

struct CostReport {
  EncoderKind kind{};
  std::uint64_t n = 0, width = 0, kernel = 0, depth = 0;
  std::uint64_t ops_per_layer = 0;
  std::uint64_t overall_ops = 0;
  std::uint64_t min_depth_to_cover = 0;
  std::uint64_t longest_path = 0;
};

// Multiply-accumulate constants of the implemented layers:
//   recurrent:    bidirectional GRU with hidden = w; per position and
//                 direction 3w*w input + 3w*w recurrent MACs -> 12 w^2 n.
//   self-attn:    pairwise scores (w n^2) plus attention-weighted sum
//                 (w n^2) -> 2 w n^2. The w^2 n dense projection is left out
//                 as in the asymptotic row.
//   dilated-conv: GLU conv emits 2w channels from w -> 2 k w^2 n.
inline constexpr std::uint64_t kRecurrentMacConstant = 12;
inline constexpr std::uint64_t kSelfAttnMacConstant = 2;
inline constexpr std::uint64_t kConvMacConstant = 2;

// Smallest number of blocks with dilations 1, 2, 4, ... whose receptive
// field 1 + (k - 1)(2^B - 1) reaches n.
inline std::uint64_t doubling_blocks_to_cover(std::uint64_t n, std::uint64_t kernel) {
  if (kernel < 3) throw ConfigError("kernel size must be >= 3 to widen the field");
  std::uint64_t blocks = 0;
  while (1 + (kernel - 1) * ((std::uint64_t{1} << blocks) - 1) < n) ++blocks;
  return blocks;
}

inline CostReport cost_model(EncoderKind kind, std::uint64_t n, std::uint64_t w,
                             std::uint64_t kernel, std::uint64_t depth) {
  if (!n || !w || !kernel || !depth)
    throw ConfigError("cost_model: arguments must be positive");
  CostReport r;
  r.kind = kind;
  r.n = n;
  r.width = w;
  r.kernel = kernel;
  r.depth = depth;
  switch (kind) {
    case EncoderKind::recurrent:
      r.ops_per_layer = kRecurrentMacConstant * w * w * n;
      r.min_depth_to_cover = 1;
      r.longest_path = n * depth;
      break;
    case EncoderKind::self_attn:
      r.ops_per_layer = kSelfAttnMacConstant * w * n * n;
      r.min_depth_to_cover = 1;
      r.longest_path = depth;
      break;
    case EncoderKind::dilated_conv:
      r.ops_per_layer = kConvMacConstant * kernel * w * w * n;
      r.min_depth_to_cover = doubling_blocks_to_cover(n, kernel);
      r.longest_path = depth;
      break;
  }
  r.overall_ops = r.ops_per_layer * depth;
  return r;
}

// Longest chain of recorded ops; leaves count zero, each op counts one.
template <typename T>
std::size_t longest_dependency_chain(const Graph<T>& g) {
  std::vector<std::size_t> depth(g.size(), 0);
  std::size_t best = 0;
  for (NodeId id = 0; id < g.size(); ++id) {
    const auto& n = g.node(id);
    if (n.leaf) continue;
    std::size_t d = 0;
    for (NodeId in : n.inputs) {
      if (in >= id) throw std::logic_error("tape is not topologically ordered");
      d = std::max(d, depth[in]);
    }
    depth[id] = d + 1;
    best = std::max(best, depth[id]);
  }
  return best;
}

struct MemReport {
  EncoderKind kind{};
  std::uint64_t n = 0, width = 0, batch = 0;
  std::uint64_t depth = 0;
  // Every tensor produced by a forward op and kept on the tape.
  std::uint64_t activation_elements = 0;
  // The n x n attention maps alone (self-attention only).
  std::uint64_t attention_elements = 0;
};

// Conv layers of the GLDR used for the memory sweep: 15 at n <= 50, plus two
// (one more residual block) each time n doubles.
inline std::uint64_t memory_sweep_depth(std::uint64_t n) {
  std::uint64_t doublings = 0;
  while ((std::uint64_t{50} << doublings) < n) ++doublings;
  return 15 + 2 * doublings;
}

// GLDR of memory_sweep_depth(n) layers with doubling dilations.
inline GLDRConfig memory_sweep_config(std::uint64_t n, std::uint64_t width) {
  const std::uint64_t blocks = (memory_sweep_depth(n) - 1) / 2;
  std::vector<std::size_t> dil;
  for (std::uint64_t i = 0; i < blocks; ++i) dil.push_back(std::size_t{1} << i);
  return make_config("memory-sweep-" + std::to_string(n), width, width, dil);
}

// Elements per position stored by a GLDR forward pass on the tape: each
// conv output, each activation output, and each residual sum.
inline std::uint64_t gldr_activations_per_position(const GLDRConfig& c) {
  auto layer = [](const ConvLayerSpec& s) -> std::uint64_t {
    return s.conv_channels() + (s.activation == Activation::none ? 0 : s.out_channels);
  };
  std::uint64_t per = layer(c.reduction);
  for (const auto& b : c.blocks)
    per += layer(b.conv_a) + layer(b.conv_b) + (c.residual ? b.width() : 0);
  return per;
}

// Exact stored-activation counts of one inference forward pass.
//   self-attn: dense (w n) + relu (w n) + scores (n^2) + softmax (n^2) +
//              output (w n) per example.
//   dilated-conv: per-position layer outputs of `config` (memory sweep
//              config when none is given) times n.
inline MemReport activation_count(EncoderKind kind, std::uint64_t n,
                                  std::uint64_t w, std::uint64_t batch,
                                  const GLDRConfig* config = nullptr) {
  MemReport r;
  r.kind = kind;
  r.n = n;
  r.width = w;
  r.batch = batch;
  switch (kind) {
    case EncoderKind::self_attn:
      r.depth = 1;
      r.attention_elements = batch * n * n;
      r.activation_elements = batch * (3 * w * n + 2 * n * n);
      break;
    case EncoderKind::dilated_conv: {
      const GLDRConfig c = config ? *config : memory_sweep_config(n, w);
      r.depth = c.depth();
      r.activation_elements = batch * n * gldr_activations_per_position(c);
      break;
    }
    case EncoderKind::recurrent: {
      // Per direction: input projection (3h n), its per-step slices (3h n),
      // n gru steps (h each), the stacked states (h n); then the
      // concatenation (2h n). h = w.
      r.depth = 1;
      r.activation_elements = batch * (2 * 8 * w * n + 2 * w * n);
      break;
    }
  }
  return r;
}

// Least-squares slope of log(measure) against log(n).
inline double scaling_exponent(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 4) throw ConfigError("scaling_exponent: need at least 4 points");
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto [n, m] = points[i];
    if (i && !(n > points[i - 1].first))
      throw ConfigError("scaling_exponent: n must be strictly increasing");
    if (!(n > 0) || !(m > 0))
      throw ConfigError("scaling_exponent: n and measures must be positive");
    sx += std::log(n);
    sy += std::log(m);
  }
  const double k = static_cast<double>(points.size());
  const double mx = sx / k, my = sy / k;
  double sxy = 0, sxx = 0;
  for (const auto& [n, m] : points) {
    const double dx = std::log(n) - mx;
    sxy += dx * (std::log(m) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace gldr
