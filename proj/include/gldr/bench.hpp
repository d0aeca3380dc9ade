#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "gldr/analysis.hpp"
#include "gldr/baselines.hpp"
#include "gldr/encoder.hpp"
#include "gldr/parallel.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gldr {

// Keeps large activation buffers on the heap instead of fresh mmap pages,
// which otherwise page-fault on every forward pass.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline constexpr const char* kMetricWallTime = "wall_time_ms_median";
inline constexpr const char* kMetricActivations = "activation_elements";
inline constexpr const char* kMetricLongestPath = "longest_path";
inline constexpr const char* kMetricOps = "ops_count";

// One CSV row. status is "ok" or "skip"; a skipped point keeps its row with
// value 0 and the reason in note.
struct BenchRecord {
  std::string encoder;
  std::string preset;
  std::size_t n = 0, batch = 0, threads = 0, reps = 0;
  std::string metric;
  double value = 0.0;
  std::string status = "ok";
  std::string note;
};

inline constexpr const char* kBenchHeader =
    "encoder,preset,n,batch,threads,reps,metric,value,status,note";

inline std::string csv_row(const BenchRecord& r) {
  std::ostringstream o;
  char value[64];
  std::snprintf(value, sizeof value, "%.10g", r.value);
  std::string note = r.note;
  std::replace(note.begin(), note.end(), ',', ';');
  o << r.encoder << ',' << r.preset << ',' << r.n << ',' << r.batch << ',' << r.threads
    << ',' << r.reps << ',' << r.metric << ',' << value << ',' << r.status << ',' << note;
  return o.str();
}

inline std::string bench_csv(const std::vector<BenchRecord>& rows) {
  std::string out = std::string(kBenchHeader) + "\n";
  for (const auto& r : rows) out += csv_row(r) + "\n";
  return out;
}

inline constexpr std::size_t kMinTimingReps = 5;
inline constexpr std::size_t kWarmupRuns = 2;

struct Timing {
  double median_ms = 0.0;
  std::vector<double> samples_ms;
};

// Median wall time of `reps` calls after kWarmupRuns untimed calls.
template <typename Fn>
Timing time_median(Fn&& fn, std::size_t reps) {
  if (reps < kMinTimingReps)
    throw ConfigError("timing needs at least " + std::to_string(kMinTimingReps) +
                      " repetitions, got " + std::to_string(reps));
  for (std::size_t i = 0; i < kWarmupRuns; ++i) fn();
  Timing t;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    t.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  auto s = t.samples_ms;
  std::sort(s.begin(), s.end());
  t.median_ms = s.size() % 2 ? s[s.size() / 2] : 0.5 * (s[s.size() / 2 - 1] + s[s.size() / 2]);
  return t;
}

// MemAvailable from /proc/meminfo in MiB, or 0 when unknown.
inline std::size_t available_memory_mb() {
  std::ifstream in("/proc/meminfo");
  std::string key, unit;
  std::size_t kb = 0;
  while (in >> key >> kb >> unit)
    if (key == "MemAvailable:") return kb / 1024;
  return 0;
}

// A forward-pass benchmark subject at width w: GLDR of a preset, a BiGRU
// with w/2 hidden units per direction, or one self-attention layer.
class BenchEncoder {
 public:
  BenchEncoder(EncoderKind kind, const std::string& preset, std::size_t width,
               std::uint64_t seed)
      : kind_(kind), width_(width) {
    switch (kind) {
      case EncoderKind::dilated_conv:
        config_ = make_preset(preset, width);
        if (config_.width() != width)
          throw ConfigError("preset '" + preset + "' has width " +
                            std::to_string(config_.width()) + ", benchmark width is " +
                            std::to_string(width));
        gldr_ = init_params<float>(config_, seed);
        break;
      case EncoderKind::recurrent:
        if (width % 2) throw ConfigError("bigru benchmark width must be even");
        gru_ = init_bigru<float>(width, width / 2, seed);
        break;
      case EncoderKind::self_attn:
        attn_ = init_self_attention<float>(width, seed);
        break;
    }
  }

  EncoderKind kind() const { return kind_; }
  std::string preset_label() const {
    return kind_ == EncoderKind::dilated_conv ? config_.name : "-";
  }
  const GLDRConfig& config() const { return config_; }

  Var<float> forward(Var<float> x) {
    switch (kind_) {
      case EncoderKind::dilated_conv: return gldr_forward(x, config_, gldr_);
      case EncoderKind::recurrent: return bigru_forward(x, gru_);
      case EncoderKind::self_attn: return self_attention_forward(x, attn_).output;
    }
    return x;
  }

  // Stored elements of one inference pass, plus the input.
  std::uint64_t estimated_elements(std::size_t n, std::size_t batch) const {
    const GLDRConfig* c = kind_ == EncoderKind::dilated_conv ? &config_ : nullptr;
    return activation_count(kind_, n, width_, batch, c).activation_elements +
           std::uint64_t{batch} * width_ * n;
  }

 private:
  EncoderKind kind_;
  std::size_t width_;
  GLDRConfig config_;
  EncoderParams<float> gldr_;
  BiGRUParams<float> gru_;
  SelfAttnParams<float> attn_;
};

struct LatencySweep {
  std::vector<std::string> encoders{"gldr", "bigru", "self-attn"};
  std::string preset = "bidaf-modeling-17";
  std::vector<std::size_t> ns{128, 256, 512, 1024};
  std::vector<std::size_t> batches{1, 64};
  std::vector<std::size_t> threads{1};
  std::size_t reps = kMinTimingReps;
  std::size_t width = 100;
  std::size_t mem_limit_mb = 0;  // 0: half of available memory
  std::uint64_t seed = 0;
};

// Forward-only median latency. Inputs are built outside the timed region;
// points whose estimated activations exceed the memory limit, or that fail
// to allocate, become skip rows.
inline std::vector<BenchRecord> bench_latency(const LatencySweep& s) {
  if (s.reps < kMinTimingReps)
    throw ConfigError("--reps must be >= " + std::to_string(kMinTimingReps));
  std::size_t limit = s.mem_limit_mb;
  if (!limit) limit = std::max<std::size_t>(256, available_memory_mb() / 2);
  const std::size_t restore = num_threads();
  std::vector<BenchRecord> out;
  for (const auto& name : s.encoders) {
    BenchEncoder enc(parse_encoder_kind(name), s.preset, s.width, s.seed);
    const std::string label = to_string(enc.kind());
    for (std::size_t n : s.ns)
      for (std::size_t batch : s.batches)
        for (std::size_t t : s.threads) {
          BenchRecord r{label,  enc.preset_label(), n, batch, t, s.reps,
                        kMetricWallTime, 0.0, "ok", ""};
          const double mb = static_cast<double>(enc.estimated_elements(n, batch)) *
                            sizeof(float) / (1024.0 * 1024.0);
          if (mb > static_cast<double>(limit)) {
            r.status = "skip";
            r.note = "estimated " + std::to_string(static_cast<std::size_t>(mb)) +
                     " MiB exceeds limit " + std::to_string(limit) + " MiB";
            out.push_back(r);
            continue;
          }
          try {
            set_num_threads(t);
            Rng rng(derive_seed(s.seed, n * 131 + batch));
            Tensor<float> x({batch, s.width, n});
            for (auto& v : x.storage()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
            const auto timing = time_median(
                [&] {
                  Graph<float> g(false);
                  enc.forward(g.input(x));
                },
                s.reps);
            r.value = timing.median_ms;
          } catch (const std::bad_alloc&) {
            r.status = "skip";
            r.note = "out of memory";
          }
          out.push_back(r);
        }
  }
  set_num_threads(restore);
  return out;
}

// Activation counts for one self-attention layer and for the GLDR whose
// depth follows the memory-sweep rule, width w, fixed batch.
inline std::vector<BenchRecord> bench_memory(const std::vector<std::size_t>& ns,
                                             std::size_t width, std::size_t batch) {
  for (std::size_t i = 1; i < ns.size(); ++i)
    if (!(ns[i] > ns[i - 1])) throw ConfigError("bench-memory: n sweep must be ascending");
  std::vector<BenchRecord> out;
  for (std::size_t n : ns) {
    const auto attn = activation_count(EncoderKind::self_attn, n, width, batch);
    out.push_back({"self-attn", "-", n, batch, 1, 1, kMetricActivations,
                   static_cast<double>(attn.activation_elements), "ok",
                   "attention_elements=" + std::to_string(attn.attention_elements)});
    const auto cfg = memory_sweep_config(n, width);
    const auto conv = activation_count(EncoderKind::dilated_conv, n, width, batch, &cfg);
    out.push_back({"dilated-conv", cfg.name, n, batch, 1, 1, kMetricActivations,
                   static_cast<double>(conv.activation_elements), "ok",
                   "depth=" + std::to_string(conv.depth)});
  }
  return out;
}

// Traced longest dependency chain of one forward pass per (encoder, n), and
// the cost model's op count for the same shape.
inline std::vector<BenchRecord> bench_path(const std::vector<std::string>& encoders,
                                           const std::vector<std::size_t>& ns,
                                           const std::string& preset, std::size_t width,
                                           std::uint64_t seed = 0) {
  std::vector<BenchRecord> out;
  for (const auto& name : encoders) {
    BenchEncoder enc(parse_encoder_kind(name), preset, width, seed);
    const std::string label = to_string(enc.kind());
    const std::size_t depth =
        enc.kind() == EncoderKind::dilated_conv ? enc.config().depth() : 1;
    for (std::size_t n : ns) {
      Graph<float> g(false);
      enc.forward(g.input(Tensor<float>({1, width, n})));
      out.push_back({label, enc.preset_label(), n, 1, 1, 1, kMetricLongestPath,
                     static_cast<double>(longest_dependency_chain(g)), "ok", ""});
      const auto cost = cost_model(enc.kind(), n, width, 3, depth);
      out.push_back({label, enc.preset_label(), n, 1, 1, 1, kMetricOps,
                     static_cast<double>(cost.overall_ops), "ok",
                     "model longest_path=" + std::to_string(cost.longest_path)});
    }
  }
  return out;
}

}  // namespace gldr
