#pragma once

#include <cstddef>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gldr/tensor.hpp"

namespace gldr {

enum class Activation { glu, relu, none };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::glu: return "glu";
    case Activation::relu: return "relu";
    case Activation::none: return "none";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "glu") return Activation::glu;
  if (s == "relu") return Activation::relu;
  if (s == "none") return Activation::none;
  throw ConfigError("unknown activation '" + s + "'");
}

struct ConvLayerSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_size = 3;
  std::size_t dilation = 1;
  Activation activation = Activation::glu;
  double input_dropout = 0.0;

  // Channels the convolution itself emits; GLU halves them afterwards.
  std::size_t conv_channels() const {
    return activation == Activation::glu ? 2 * out_channels : out_channels;
  }
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct ResidualBlockSpec {
  ConvLayerSpec conv_a;
  ConvLayerSpec conv_b;

  std::size_t width() const { return conv_a.in_channels; }
  std::size_t dilation() const { return conv_a.dilation; }
  friend bool operator==(const ResidualBlockSpec&,
                         const ResidualBlockSpec&) = default;
};

struct GLDRConfig {
  std::string name;
  ConvLayerSpec reduction;
  std::vector<ResidualBlockSpec> blocks;
  // false drops the shortcut connection (ablation only).
  bool residual = true;

  std::size_t depth() const { return 1 + 2 * blocks.size(); }
  std::size_t input_channels() const { return reduction.in_channels; }
  std::size_t width() const { return reduction.out_channels; }
  friend bool operator==(const GLDRConfig&, const GLDRConfig&) = default;
};

// Block whose first conv carries the dilation with kernel `kernel_a` and
// whose second conv is a 1-wide projection back to `width` channels.
inline ResidualBlockSpec make_block(std::size_t width, std::size_t dilation,
                                    double dropout = 0.0,
                                    Activation act = Activation::glu,
                                    std::size_t kernel_a = 3) {
  ResidualBlockSpec b;
  b.conv_a = {width, width, kernel_a, dilation, act, dropout};
  b.conv_b = {width, width, 1, dilation, Activation::none, 0.0};
  return b;
}

inline void validate_layer(const ConvLayerSpec& s, const std::string& where) {
  if (s.in_channels == 0 || s.out_channels == 0)
    throw ConfigError(where + ": channel counts must be positive");
  if (s.kernel_size % 2 == 0)
    throw ConfigError(where + ": kernel size must be odd, got " +
                      std::to_string(s.kernel_size));
  if (s.dilation < 1) throw ConfigError(where + ": dilation must be >= 1");
  if (!(s.input_dropout >= 0.0 && s.input_dropout < 1.0))
    throw ConfigError(where + ": dropout must be in [0,1)");
}

inline void validate(const GLDRConfig& c) {
  validate_layer(c.reduction, "reduce");
  std::size_t width = c.reduction.out_channels;
  for (std::size_t i = 0; i < c.blocks.size(); ++i) {
    const auto& b = c.blocks[i];
    const std::string where = "block " + std::to_string(i);
    validate_layer(b.conv_a, where + " conv-a");
    validate_layer(b.conv_b, where + " conv-b");
    if (b.conv_a.in_channels != width || b.conv_b.out_channels != width)
      throw ConfigError(where + ": width " + std::to_string(b.conv_a.in_channels) +
                        "->" + std::to_string(b.conv_b.out_channels) +
                        " does not match stream width " + std::to_string(width));
    if (b.conv_a.out_channels != b.conv_b.in_channels)
      throw ConfigError(where + ": conv-a output does not feed conv-b");
  }
}

// Receptive field of the configured network: 1 + sum over convs of
// (k - 1) * d.
inline std::size_t receptive_field(const GLDRConfig& c) {
  std::size_t rf = 1 + (c.reduction.kernel_size - 1) * c.reduction.dilation;
  for (const auto& b : c.blocks) {
    rf += (b.conv_a.kernel_size - 1) * b.conv_a.dilation;
    rf += (b.conv_b.kernel_size - 1) * b.conv_b.dilation;
  }
  return rf;
}

// Receptive field if every conv had kernel size 3 at its configured
// dilation (both convs of every block widen the field).
inline std::size_t receptive_field_all_kernel3(const GLDRConfig& c) {
  std::size_t rf = 1 + 2 * c.reduction.dilation;
  for (const auto& b : c.blocks) rf += 2 * b.conv_a.dilation + 2 * b.conv_b.dilation;
  return rf;
}

struct PresetInfo {
  const char* name;
  std::size_t width;
  double dropout;
  std::vector<std::size_t> dilations;
  // Trailing blocks that refine with 1-wide convs.
  std::size_t refinement_blocks;
};

inline const std::vector<PresetInfo>& preset_table() {
  static const std::vector<PresetInfo> table = {
      {"bidaf-contextual-5", 100, 0.2, {1, 2}, 0},
      {"bidaf-modeling-17", 100, 0.2, {1, 2, 4, 8, 16}, 3},
      {"bidaf-output-3", 100, 0.2, {1}, 0},
      {"drqa-query-17", 128, 0.3, {1, 1, 1, 1, 1, 1, 1, 1}, 0},
      {"drqa-passage-9", 128, 0.3, {1, 2, 4, 8}, 0},
  };
  return table;
}

// Builds a GLDR with a kernel-3 GLU reduction conv followed by one block per
// dilation. `input_channels` = 0 uses the preset width.
inline GLDRConfig make_config(const std::string& name, std::size_t input_channels,
                              std::size_t width,
                              const std::vector<std::size_t>& dilations,
                              double dropout = 0.0,
                              std::size_t refinement_blocks = 0,
                              Activation act = Activation::glu) {
  GLDRConfig c;
  c.name = name;
  c.reduction = {input_channels ? input_channels : width, width, 3, 1, act,
                 dropout};
  for (auto d : dilations) c.blocks.push_back(make_block(width, d, dropout, act));
  for (std::size_t i = 0; i < refinement_blocks; ++i)
    c.blocks.push_back(make_block(width, 1, dropout, act, 1));
  validate(c);
  return c;
}

inline GLDRConfig make_preset(const std::string& name,
                              std::size_t input_channels = 0) {
  for (const auto& p : preset_table())
    if (name == p.name)
      return make_config(p.name, input_channels, p.width, p.dilations,
                         p.dropout, p.refinement_blocks);
  throw ConfigError("unknown preset '" + name + "'");
}

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : preset_table()) out.emplace_back(p.name);
  return out;
}

// ---------------------------------------------------------------------------
// Text format, one statement per line ('#' starts a comment):
//
//   name <label>
//   residual on|off
//   reduce in=<int> width=<int> [k=3] [dil=1] [act=glu] [drop=0]
//   block width=<int> [dil=1] [k=3] [act=glu] [drop=0] [kb=1] [actb=none]
//
// `block` describes conv-a (k, dil, act, drop) and conv-b (kb, actb; conv-b
// shares dil and has no input dropout). Unknown keys are errors.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::map<std::string, std::string> parse_pairs(std::istringstream& in,
                                                      int line) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("line " + std::to_string(line) + ": expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

class PairReader {
 public:
  PairReader(std::map<std::string, std::string> kv, int line)
      : kv_(std::move(kv)), line_(line) {}

  std::size_t size(const std::string& key, std::optional<std::size_t> def = {}) {
    auto it = kv_.find(key);
    if (it == kv_.end()) {
      if (!def) throw error(key, "missing");
      return *def;
    }
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(it->second, &pos);
    } catch (...) {
      pos = 0;
    }
    if (pos != it->second.size() || v < 0) throw error(key, "bad integer '" + it->second + "'");
    kv_.erase(it);
    return static_cast<std::size_t>(v);
  }

  double real(const std::string& key, double def) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(it->second, &pos);
    } catch (...) {
      pos = 0;
    }
    if (pos != it->second.size()) throw error(key, "bad number '" + it->second + "'");
    kv_.erase(it);
    return v;
  }

  Activation act(const std::string& key, Activation def) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    Activation a;
    try {
      a = parse_activation(it->second);
    } catch (const ConfigError&) {
      throw error(key, "unknown activation '" + it->second + "'");
    }
    kv_.erase(it);
    return a;
  }

  void finish() {
    if (!kv_.empty()) throw error(kv_.begin()->first, "unknown key");
  }

 private:
  ConfigError error(const std::string& key, const std::string& what) const {
    return ConfigError("line " + std::to_string(line_) + ": key '" + key +
                       "': " + what);
  }
  std::map<std::string, std::string> kv_;
  int line_;
};

}  // namespace detail

inline std::string to_text(const GLDRConfig& c) {
  std::ostringstream o;
  o << "name " << c.name << '\n';
  o << "residual " << (c.residual ? "on" : "off") << '\n';
  const auto& r = c.reduction;
  o << "reduce in=" << r.in_channels << " width=" << r.out_channels
    << " k=" << r.kernel_size << " dil=" << r.dilation
    << " act=" << to_string(r.activation)
    << " drop=" << detail::format_double(r.input_dropout) << '\n';
  for (const auto& b : c.blocks) {
    o << "block width=" << b.width() << " dil=" << b.conv_a.dilation
      << " k=" << b.conv_a.kernel_size << " act=" << to_string(b.conv_a.activation)
      << " drop=" << detail::format_double(b.conv_a.input_dropout)
      << " kb=" << b.conv_b.kernel_size
      << " actb=" << to_string(b.conv_b.activation) << '\n';
  }
  return o.str();
}

inline GLDRConfig parse_config(const std::string& text) {
  GLDRConfig c;
  bool have_reduce = false;
  std::istringstream lines(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
    std::istringstream in(raw);
    std::string head;
    if (!(in >> head)) continue;
    if (head == "name") {
      in >> c.name;
    } else if (head == "residual") {
      std::string v;
      in >> v;
      if (v != "on" && v != "off")
        throw ConfigError("line " + std::to_string(line_no) +
                          ": key 'residual': expected on|off");
      c.residual = v == "on";
    } else if (head == "reduce") {
      detail::PairReader kv(detail::parse_pairs(in, line_no), line_no);
      auto& r = c.reduction;
      r.in_channels = kv.size("in");
      r.out_channels = kv.size("width");
      r.kernel_size = kv.size("k", 3);
      r.dilation = kv.size("dil", 1);
      r.activation = kv.act("act", Activation::glu);
      r.input_dropout = kv.real("drop", 0.0);
      kv.finish();
      validate_layer(r, "line " + std::to_string(line_no) + " (reduce)");
      have_reduce = true;
    } else if (head == "block") {
      detail::PairReader kv(detail::parse_pairs(in, line_no), line_no);
      const std::size_t width = kv.size("width");
      ResidualBlockSpec b;
      b.conv_a = {width, width, kv.size("k", 3), kv.size("dil", 1),
                  kv.act("act", Activation::glu), kv.real("drop", 0.0)};
      b.conv_b = {width, width, kv.size("kb", 1), b.conv_a.dilation,
                  kv.act("actb", Activation::none), 0.0};
      kv.finish();
      validate_layer(b.conv_a, "line " + std::to_string(line_no) + " (block)");
      validate_layer(b.conv_b, "line " + std::to_string(line_no) + " (block kb)");
      c.blocks.push_back(b);
    } else {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": unknown statement '" + head + "'");
    }
  }
  if (!have_reduce) throw ConfigError("config has no 'reduce' line");
  validate(c);
  return c;
}

inline GLDRConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace gldr
