#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gldr/bench.hpp"
#include "gldr/diagnostics.hpp"
#include "gldr/reader.hpp"

using namespace gldr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

// ---------------------------------------------------------------------------
// Training job file: one `key = value` per line, '#' starts a comment.
// ---------------------------------------------------------------------------

struct TrainJob {
  std::string train_path, eval_path;  // empty: generate
  std::size_t n = 128, distance = 40, vocab = 64, count = 8000, eval_count = 500;
  std::uint64_t data_seed = 17;
  std::string preset = "rf129";
  ReaderOptions model;
  std::uint64_t model_seed = 17;
  bool float64 = false;
  TrainConfig train;
  std::size_t threads = 0;  // 0: keep the --threads / READER_THREADS value
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

TrainJob parse_train_job(const std::string& text) {
  TrainJob job;
  job.model.vocab = job.vocab;
  job.train.seed = 17;
  job.train.eval_every = 100;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  auto size = [](std::size_t& dst, bool positive = false) {
    return [&dst, positive](const std::string& v) {
      std::size_t used = 0;
      const unsigned long long x = std::stoull(v, &used);
      if (used != v.size() || v[0] == '-' || (positive && x == 0)) throw std::invalid_argument(v);
      dst = static_cast<std::size_t>(x);
    };
  };
  auto u64 = [](std::uint64_t& dst) {
    return [&dst](const std::string& v) {
      std::size_t used = 0;
      dst = std::stoull(v, &used);
      if (used != v.size() || v[0] == '-') throw std::invalid_argument(v);
    };
  };
  auto real = [](double& dst, double lo, double hi, bool hi_open) {
    return [&dst, lo, hi, hi_open](const std::string& v) {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size() || !(x >= lo) || (hi_open ? !(x < hi) : !(x <= hi)))
        throw std::invalid_argument(v);
      dst = x;
    };
  };
  auto text_value = [](std::string& dst) { return [&dst](const std::string& v) { dst = v; }; };
  double lr = job.train.adam.lr, b1 = job.train.adam.beta1, b2 = job.train.adam.beta2,
         eps = job.train.adam.eps, stop = -1.0;
  std::string precision = "float";

  setters["data.train"] = text_value(job.train_path);
  setters["data.eval"] = text_value(job.eval_path);
  setters["data.n"] = size(job.n, true);
  setters["data.distance"] = size(job.distance);
  setters["data.vocab"] = size(job.vocab, true);
  setters["data.count"] = size(job.count, true);
  setters["data.eval_count"] = size(job.eval_count, true);
  setters["data.seed"] = u64(job.data_seed);
  setters["model.preset"] = text_value(job.preset);
  setters["model.embed"] = size(job.model.embed, true);
  setters["model.width"] = size(job.model.width, true);
  setters["model.dropout"] = real(job.model.dropout, 0.0, 1.0, true);
  setters["model.max_span"] = size(job.model.max_span, true);
  setters["model.seed"] = u64(job.model_seed);
  setters["model.precision"] = text_value(precision);
  setters["train.steps"] = size(job.train.steps);
  setters["train.batch"] = size(job.train.batch, true);
  setters["train.eval_every"] = size(job.train.eval_every, true);
  setters["train.eval_batch"] = size(job.train.eval_batch, true);
  setters["train.lr"] = real(lr, 0.0, 1e308, false);
  setters["train.beta1"] = real(b1, 0.0, 1.0, true);
  setters["train.beta2"] = real(b2, 0.0, 1.0, true);
  setters["train.eps"] = real(eps, 0.0, 1e308, false);
  setters["train.word_dropout"] = real(job.train.word_dropout, 0.0, 1.0, true);
  setters["train.seed"] = u64(job.train.seed);
  setters["train.stop_at_em"] = real(stop, 0.0, 1.0, false);
  setters["train.threads"] = size(job.threads, true);

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end())
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    try {
      if (value.empty()) throw std::invalid_argument(value);
      it->second(value);
    } catch (const std::logic_error&) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                        "' has invalid value '" + value + "'");
    }
  }
  if (precision != "float" && precision != "double")
    throw ConfigError("config: key 'model.precision' must be float or double, got '" +
                      precision + "'");
  job.float64 = precision == "double";
  job.train.adam = {lr, b1, b2, eps};
  if (stop >= 0.0) job.train.stop_at_em = stop;
  job.model.vocab = job.vocab;
  return job;
}

std::string read_text(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("cannot read ") + what + " '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path + "'");
}

// CSV goes to --out when given, otherwise to stdout with the summary moved
// to stderr.
struct Sink {
  std::string out;
  std::ostream& summary() { return out.empty() ? std::cerr : std::cout; }
  void csv(const std::string& text) {
    if (out.empty()) std::cout << text;
    else write_text(out, text);
  }
};

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

template <typename T>
int run_train(const TrainJob& job, const std::string& out_dir) {
  std::vector<SyntheticExample> train_set, eval_set;
  if (!job.train_path.empty()) train_set = load_dataset(job.train_path);
  else train_set = gen_dataset(job.count, job.n, job.distance, job.vocab, job.data_seed);
  if (!job.eval_path.empty()) eval_set = load_dataset(job.eval_path);
  else if (job.train_path.empty())
    eval_set = gen_dataset(job.eval_count, job.n, job.distance, job.vocab,
                           derive_seed(job.data_seed, 7));

  auto model = init_reader<T>(reader_spec(job.preset, job.model), job.model_seed);
  std::filesystem::create_directories(out_dir);
  const auto result = train(model, train_set, eval_set, job.train);
  const auto metrics_path = (std::filesystem::path(out_dir) / "metrics.csv").string();
  write_text(metrics_path, metrics_csv(result));
  std::cout << "preset " << job.preset << ", passage receptive field "
            << receptive_field(model.spec.passage) << ", " << result.steps_run
            << " steps, threads " << num_threads() << "\n";
  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::printf("final step %zu loss %.6f em %.6f f1 %.6f\n", last.step, last.loss, last.em,
                last.f1);
  }
  std::cout << "wrote " << metrics_path << "\n";
  if (result.diverged) {
    std::cerr << "error: " << result.divergence_message << "\n";
    return kExitData;
  }
  const auto ckpt_path = (std::filesystem::path(out_dir) / "model.ckpt").string();
  save_checkpoint(ckpt_path, to_checkpoint(model));
  std::cout << "wrote " << ckpt_path << "\n";
  return kExitOk;
}

template <typename T>
int run_eval(const Checkpoint& ck, const std::vector<SyntheticExample>& data,
             const std::string& out) {
  auto model = from_checkpoint<T>(ck);
  const auto r = evaluate(model, data);
  std::printf("examples %zu em %.6f f1 %.6f loss %.6f\n", data.size(), r.exact_match, r.f1,
              r.loss);
  std::ostringstream csv;
  csv << "index,pred_start,pred_end,gold_start,gold_end,exact,f1\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto [s, e] = r.predictions[i];
    const std::pair<std::size_t, std::size_t> gold{data[i].start, data[i].end};
    char f1[32];
    std::snprintf(f1, sizeof f1, "%.6f", span_f1(r.predictions[i], gold));
    csv << i << ',' << s << ',' << e << ',' << gold.first << ',' << gold.second << ','
        << (r.predictions[i] == gold ? 1 : 0) << ',' << f1 << '\n';
  }
  write_text(out, csv.str());
  std::cout << "wrote " << out << "\n";
  return kExitOk;
}

void print_rf(const GLDRConfig& c) {
  std::printf("config %s: %zu conv layers, width %zu\n", c.name.c_str(), c.depth(), c.width());
  std::printf("receptive field C1 (as configured): %zu\n", receptive_field(c));
  std::printf("receptive field full-count (every conv kernel 3): %zu\n",
              receptive_field_all_kernel3(c));
  std::printf("\n%-6s %-9s %-3s %-5s %-4s %-10s %-12s\n", "layer", "role", "k", "dil", "act",
              "rf_c1", "rf_full");
  std::size_t c1 = 1, full = 1, layer = 0;
  auto row = [&](const ConvLayerSpec& s, const std::string& role) {
    c1 += (s.kernel_size - 1) * s.dilation;
    full += 2 * s.dilation;
    std::printf("%-6zu %-9s %-3zu %-5zu %-4s %-10zu %-12zu\n", ++layer, role.c_str(),
                s.kernel_size, s.dilation, to_string(s.activation), c1, full);
  };
  row(c.reduction, "reduce");
  for (std::size_t i = 0; i < c.blocks.size(); ++i) {
    row(c.blocks[i].conv_a, "block" + std::to_string(i + 1) + ".a");
    row(c.blocks[i].conv_b, "block" + std::to_string(i + 1) + ".b");
  }
}

double slope_of(const std::vector<BenchRecord>& rows, const std::string& encoder,
                const std::function<double(const BenchRecord&)>& measure) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : rows)
    if (r.encoder == encoder && r.status == "ok")
      pts.emplace_back(static_cast<double>(r.n), measure(r));
  return pts.size() >= 4 ? scaling_exponent(pts) : std::nan("");
}

double note_value(const BenchRecord& r, const std::string& key) {
  const auto at = r.note.find(key + "=");
  return at == std::string::npos ? 0.0 : std::stod(r.note.substr(at + key.size() + 1));
}

void latency_summary(const std::vector<BenchRecord>& rows, std::ostream& os) {
  os << "CPU forward latency (median of reps after warmup). GPU timings are not\n"
        "reproduced; thread scaling and path length stand in for the parallelism\n"
        "behind them.\n";
  std::map<std::tuple<std::string, std::size_t, std::size_t>, std::map<std::size_t, double>> by;
  for (const auto& r : rows) {
    char buf[200];
    if (r.status == "ok")
      std::snprintf(buf, sizeof buf, "  %-12s n=%-6zu batch=%-3zu threads=%-3zu %10.3f ms\n",
                    r.encoder.c_str(), r.n, r.batch, r.threads, r.value);
    else
      std::snprintf(buf, sizeof buf, "  %-12s n=%-6zu batch=%-3zu threads=%-3zu SKIP (%s)\n",
                    r.encoder.c_str(), r.n, r.batch, r.threads, r.note.c_str());
    os << buf;
    if (r.status == "ok") by[{r.encoder, r.n, r.batch}][r.threads] = r.value;
  }
  for (const auto& [key, times] : by) {
    if (times.size() < 2 || !times.count(1)) continue;
    const auto& [enc, n, batch] = key;
    for (const auto& [t, ms] : times)
      if (t != 1)
        os << "  speedup " << enc << " n=" << n << " batch=" << batch << " " << t
           << " vs 1 threads: " << times.at(1) / ms << "x\n";
  }
}

std::vector<std::size_t> doubling(std::size_t from, std::size_t to) {
  std::vector<std::size_t> out;
  for (std::size_t n = from; n <= to; n *= 2) out.push_back(n);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"GLDR dilated-convolution encoders: training, evaluation and benchmarks"};
  app.require_subcommand(1);

  std::size_t threads = default_thread_count();
  std::string out, config_path, preset;
  std::uint64_t seed = 0;
  std::vector<std::size_t> ns, batches, thread_list;
  std::size_t reps = kMinTimingReps, width = 0, mem_limit = 0;
  std::vector<std::string> encoders;

  auto add_threads = [&](CLI::App* c) {
    c->add_option("--threads", threads, "worker threads (default $READER_THREADS or 1)")
        ->check(CLI::PositiveNumber);
  };

  // train
  auto* train_cmd = app.add_subcommand("train", "train a reader from a key=value config");
  std::size_t batch_override = 0, n_override = 0;
  bool seed_given = false;
  train_cmd->add_option("--config", config_path, "training config file")->required();
  train_cmd->add_option("--out", out, "output directory (default .)");
  train_cmd->add_option("--preset", preset, "override model.preset");
  train_cmd->add_option("--batch", batch_override, "override train.batch")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--n", n_override, "override data.n")->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", seed, "override train.seed and model.seed")
      ->each([&](const std::string&) { seed_given = true; });
  add_threads(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset file");
  std::string ckpt_path, data_path;
  eval_cmd->add_option("checkpoint", ckpt_path, "model.ckpt")->required();
  eval_cmd->add_option("dataset", data_path, "dataset file")->required();
  eval_cmd->add_option("--out", out, "predictions CSV (default predictions.csv)");
  add_threads(eval_cmd);

  // bench-latency
  auto* lat_cmd = app.add_subcommand("bench-latency", "forward-pass latency sweep");
  lat_cmd->add_option("--encoders", encoders, "gldr, bigru, self-attn")->delimiter(',');
  lat_cmd->add_option("--n", ns, "sequence lengths")->delimiter(',');
  lat_cmd->add_option("--batch", batches, "batch sizes")->delimiter(',');
  lat_cmd->add_option("--threads", thread_list, "thread counts")->delimiter(',');
  lat_cmd->add_option("--reps", reps, "timed repetitions (>= 5)");
  std::string lat_preset = "bidaf-modeling-17";
  std::size_t lat_width = 100;
  lat_cmd->add_option("--preset", lat_preset, "GLDR preset")->capture_default_str();
  lat_cmd->add_option("--width", lat_width, "encoder width")->capture_default_str();
  lat_cmd->add_option("--mem-limit-mb", mem_limit, "skip points estimated above this");
  lat_cmd->add_option("--seed", seed, "parameter/input seed");
  lat_cmd->add_option("--out", out, "CSV path (default stdout)");

  // bench-memory
  auto* mem_cmd = app.add_subcommand("bench-memory", "activation-count sweep");
  std::size_t mem_batch = 64;
  mem_cmd->add_option("--n", ns, "ascending sequence lengths")->delimiter(',');
  std::size_t mem_width = 100;
  mem_cmd->add_option("--batch", mem_batch, "batch size")->capture_default_str();
  mem_cmd->add_option("--width", mem_width, "hidden width")->capture_default_str();
  mem_cmd->add_option("--out", out, "CSV path (default stdout)");

  // bench-path
  auto* path_cmd = app.add_subcommand("bench-path", "traced longest computation path");
  path_cmd->add_option("--encoders", encoders, "gldr, bigru, self-attn")->delimiter(',');
  path_cmd->add_option("--n", ns, "sequence lengths")->delimiter(',');
  std::string path_preset = "drqa-passage-9";
  path_cmd->add_option("--preset", path_preset, "GLDR preset")->capture_default_str();
  path_cmd->add_option("--width", width, "encoder width (default: preset width)");
  path_cmd->add_option("--out", out, "CSV path (default stdout)");

  // rf
  auto* rf_cmd = app.add_subcommand("rf", "receptive field of a preset or config file");
  std::string rf_name;
  rf_cmd->add_option("name", rf_name, "preset name");
  rf_cmd->add_option("--preset", preset, "preset name");
  rf_cmd->add_option("--config", config_path, "encoder config file");

  // gen-data
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset file");
  std::size_t distance = 40, count = 1000, vocab = 64, gen_n = 128;
  std::uint64_t gen_seed = 17;
  gen_cmd->add_option("--n", gen_n, "passage length")->capture_default_str();
  gen_cmd->add_option("--distance", distance, "key-to-answer gap")->capture_default_str();
  gen_cmd->add_option("--count", count, "examples")->capture_default_str();
  gen_cmd->add_option("--vocab", vocab, "vocabulary size")->capture_default_str();
  gen_cmd->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--out", out, "dataset path")->required();

  // grad-check
  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference gradient checks");
  double tolerance = 1e-4;
  gc_cmd->add_option("--seed", seed, "coordinate sampling seed");
  gc_cmd->add_option("--tolerance", tolerance, "max relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_num_threads(threads);

    if (*train_cmd) {
      auto job = parse_train_job(read_text(config_path, "config"));
      if (!preset.empty()) job.preset = preset;
      if (batch_override) job.train.batch = batch_override;
      if (n_override) job.n = n_override;
      if (seed_given) job.train.seed = job.model_seed = seed;
      if (job.threads) set_num_threads(job.threads);
      const std::string dir = out.empty() ? "." : out;
      return job.float64 ? run_train<double>(job, dir) : run_train<float>(job, dir);
    }

    if (*eval_cmd) {
      const auto ck = load_checkpoint(ckpt_path);
      const auto data = load_dataset(data_path);
      const std::string csv = out.empty() ? "predictions.csv" : out;
      return checkpoint_dtype(ck) == "f32" ? run_eval<float>(ck, data, csv)
                                           : run_eval<double>(ck, data, csv);
    }

    if (*lat_cmd) {
      LatencySweep s;
      if (!encoders.empty()) s.encoders = encoders;
      if (!ns.empty()) s.ns = ns;
      if (!batches.empty()) s.batches = batches;
      s.threads = thread_list.empty() ? std::vector<std::size_t>{threads} : thread_list;
      s.reps = reps;
      s.preset = lat_preset;
      s.width = lat_width;
      s.mem_limit_mb = mem_limit;
      s.seed = seed;
      const auto rows = bench_latency(s);
      Sink sink{out};
      sink.csv(bench_csv(rows));
      latency_summary(rows, sink.summary());
      return kExitOk;
    }

    if (*mem_cmd) {
      if (ns.empty()) ns = doubling(128, 4096);
      const auto rows = bench_memory(ns, mem_width, mem_batch);
      Sink sink{out};
      sink.csv(bench_csv(rows));
      auto& os = sink.summary();
      os << "activation elements, width " << mem_width << ", batch " << mem_batch << "\n";
      for (const auto& r : rows)
        os << "  " << r.encoder << " n=" << r.n << " " << static_cast<std::uint64_t>(r.value)
           << " (" << r.note << ")\n";
      if (ns.size() >= 4) {
        os << "log-log slope self-attn (all stored activations): "
           << slope_of(rows, "self-attn", [](const BenchRecord& r) { return r.value; }) << "\n"
           << "log-log slope self-attn (attention maps only): "
           << slope_of(rows, "self-attn",
                       [](const BenchRecord& r) { return note_value(r, "attention_elements"); })
           << "\n"
           << "log-log slope GLDR (depth rule): "
           << slope_of(rows, "dilated-conv", [](const BenchRecord& r) { return r.value; })
           << "\n";
      }
      os << "GLDR depth at n=50: " << memory_sweep_depth(50) << " layers\n";
      return kExitOk;
    }

    if (*path_cmd) {
      if (encoders.empty()) encoders = {"gldr", "bigru", "self-attn"};
      if (ns.empty()) ns = {16, 64, 256, 1024};
      if (!width) width = make_preset(path_preset).width();
      const auto rows = bench_path(encoders, ns, path_preset, width, seed);
      Sink sink{out};
      sink.csv(bench_csv(rows));
      auto& os = sink.summary();
      for (const auto& r : rows)
        if (r.metric == kMetricLongestPath)
          os << "  " << r.encoder << " n=" << r.n << " longest path "
             << static_cast<std::uint64_t>(r.value) << "\n";
      return kExitOk;
    }

    if (*rf_cmd) {
      const std::string name = !rf_name.empty() ? rf_name : preset;
      if (name.empty() == config_path.empty())
        throw ConfigError("rf: give exactly one of a preset name or --config");
      print_rf(name.empty() ? load_config(config_path) : make_preset(name));
      return kExitOk;
    }

    if (*gen_cmd) {
      const auto data = gen_dataset(count, gen_n, distance, vocab, gen_seed);
      save_dataset(out, data);
      std::cout << "wrote " << data.size() << " examples to " << out << "\n";
      return kExitOk;
    }

    if (*gc_cmd) {
      GradCheckOptions opt;
      opt.seed = seed;
      double worst = 0.0;
      for (const auto& c : gradcheck_suite(opt)) {
        std::printf("%-34s coords %5zu  max rel err %.3e  (%s)\n", c.name.c_str(),
                    c.result.coordinates, c.result.max_rel_error, c.result.worst_param.c_str());
        worst = std::max(worst, c.result.max_rel_error);
      }
      std::printf("overall max rel err %.3e, tolerance %.1e: %s\n", worst, tolerance,
                  worst < tolerance ? "ok" : "FAILED");
      return worst < tolerance ? kExitOk : kExitData;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
