// Acceptance run: one PASS / FAIL / SKIP line per criterion. Arguments
// select criteria by number (default: all). Exit status 1 if any FAIL.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gldr/bench.hpp"
#include "gldr/diagnostics.hpp"
#include "gldr/reader.hpp"
#include "oracles.hpp"

using namespace gldr;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
  Status status = Status::fail;
  std::string detail;
};

Outcome verdict(bool ok, const std::string& detail) {
  return {ok ? Status::pass : Status::fail, detail};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> random_tensor(Shape dims, Rng& rng) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

Tensor<double> integer_tensor(Shape dims, Rng& rng) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = static_cast<double>(rng.between(0, 8)) - 4.0;
  return t;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckOptions opt;
  opt.epsilon = 1e-5;
  double worst = 0.0;
  std::string where;
  std::size_t cases = 0;
  for (const auto& c : gradcheck_suite(opt)) {
    ++cases;
    if (c.result.max_rel_error >= worst) {
      worst = c.result.max_rel_error;
      where = c.name;
    }
  }
  const double secs = seconds_since(t0);
  return verdict(worst < 1e-4 && secs < 60.0,
                 std::to_string(cases) + " checks, max rel err " + fmt("%.2e", worst) + " (" +
                     where + "), " + fmt("%.1f", secs) + " s");
}

std::vector<std::pair<std::size_t, std::size_t>> conv_layers(const GLDRConfig& c) {
  std::vector<std::pair<std::size_t, std::size_t>> out{
      {c.reduction.kernel_size, c.reduction.dilation}};
  for (const auto& b : c.blocks) {
    out.emplace_back(b.conv_a.kernel_size, b.conv_a.dilation);
    out.emplace_back(b.conv_b.kernel_size, b.conv_b.dilation);
  }
  return out;
}

// Input positions that change output position t, found by perturbing each
// input position in turn.
std::vector<std::vector<bool>> impulse_support(const GLDRConfig& c, EncoderParams<double>& p,
                                               std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const auto x = random_tensor({1, c.input_channels(), n}, rng);
  const auto base = gldr_infer(x, c, p);
  std::vector<std::vector<bool>> dep(n, std::vector<bool>(n, false));
  for (std::size_t q = 0; q < n; ++q) {
    auto xp = x;
    for (std::size_t ch = 0; ch < c.input_channels(); ++ch) xp(0, ch, q) += 1.0;
    const auto y = gldr_infer(xp, c, p);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t ch = 0; ch < c.width(); ++ch)
        if (y(0, ch, t) != base(0, ch, t)) dep[t][q] = true;
  }
  return dep;
}

Outcome receptive_fields() {
  const auto drqa = receptive_field(make_preset("drqa-passage-9"));
  const auto bidaf = receptive_field(make_preset("bidaf-modeling-17"));
  // GLU gates never vanish exactly, so the measured support is exact.
  Rng rng(77);
  std::size_t matched = 0;
  const std::size_t trials = 50;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t width = rng.between(2, 4);
    GLDRConfig c;
    c.name = "random";
    c.reduction = {static_cast<std::size_t>(rng.between(1, 3)), width,
                   static_cast<std::size_t>(2 * rng.between(0, 2) + 1),
                   static_cast<std::size_t>(rng.between(1, 3)),
                   Activation::glu, 0.0};
    const std::size_t blocks = rng.between(0, 3);
    for (std::size_t b = 0; b < blocks; ++b) {
      auto blk = make_block(width, rng.between(1, 6), 0.0, Activation::glu,
                            2 * rng.between(0, 2) + 1);
      blk.conv_b.kernel_size = 2 * rng.between(0, 1) + 1;
      c.blocks.push_back(blk);
    }
    c.residual = rng.bernoulli(0.8);
    validate(c);
    auto p = init_params<double>(c, trial);
    const std::size_t n = rng.between(5, 40);
    if (impulse_support(c, p, n, 1000 + trial) ==
        oracle::propagate_dependencies(n, conv_layers(c)))
      ++matched;
  }
  return verdict(drqa == 33 && bidaf == 65 && matched == trials,
                 "drqa-passage-9 C1=" + std::to_string(drqa) + ", bidaf-modeling-17 C1=" +
                     std::to_string(bidaf) + ", impulse support exact on " +
                     std::to_string(matched) + "/" + std::to_string(trials) + " configs");
}

Outcome conv_equivalence() {
  Rng rng(2025);
  double worst = 0.0;
  const int cases = 1200;
  for (int c = 0; c < cases; ++c) {
    const std::size_t B = rng.between(1, 3), Cin = rng.between(1, 5), Cout = rng.between(1, 5),
                      n = rng.between(1, 80);
    const std::size_t k = 2 * rng.between(0, 3) + 1, d = rng.between(1, 12);
    const auto x = random_tensor({B, Cin, n}, rng);
    const auto w = random_tensor({Cout, Cin, k}, rng);
    const auto b = random_tensor({Cout}, rng);
    const auto y = conv1d_forward(x, w, b, d);
    const auto ref = oracle::naive_conv1d(x, w, b, d);
    for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
  }
  // Dilation 1 on small integers (all sums exact): bitwise equal to the
  // textbook same-padded convolution.
  bool exact = true;
  for (std::size_t k : {1, 3, 5, 7, 9}) {
    const std::size_t n = 33;
    auto x = integer_tensor({1, 1, n}, rng);
    auto w = integer_tensor({1, 1, k}, rng);
    const auto y = conv1d_forward(x, w, Tensor<double>({1}), 1);
    const auto ref = oracle::textbook_same_conv(x.storage(), w.storage());
    for (std::size_t t = 0; t < n; ++t) exact &= y[t] == ref[t];
  }
  return verdict(worst < 1e-12 && exact,
                 std::to_string(cases) + " random cases, max abs diff " + fmt("%.2e", worst) +
                     "; dilation-1 textbook equality " + (exact ? "exact" : "BROKEN"));
}

Outcome path_lengths() {
  const auto cfg = make_preset("drqa-passage-9");
  auto gp = init_params<float>(cfg, 1);
  auto gru = init_bigru<float>(4, 4, 1);
  std::vector<std::size_t> conv_chain, gru_chain;
  const std::vector<std::size_t> ns{16, 64, 256, 1024};
  bool gru_ok = true;
  for (std::size_t n : ns) {
    {
      Graph<float> g(false);
      gldr_forward(g.input(Tensor<float>({1, cfg.input_channels(), n})), cfg, gp);
      conv_chain.push_back(longest_dependency_chain(g));
    }
    Graph<float> g(false);
    bigru_forward(g.input(Tensor<float>({1, 4, n})), gru);
    gru_chain.push_back(longest_dependency_chain(g));
    gru_ok &= gru_chain.back() >= n;
  }
  const bool constant =
      std::all_of(conv_chain.begin(), conv_chain.end(), [&](auto c) { return c == conv_chain[0]; });
  std::string detail = "GLDR chain";
  for (auto c : conv_chain) detail += " " + std::to_string(c);
  detail += "; BiGRU chain";
  for (auto c : gru_chain) detail += " " + std::to_string(c);
  detail += " at n = 16 64 256 1024";
  return verdict(constant && gru_ok, detail);
}

Outcome memory_scaling() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::size_t> ns{128, 256, 512, 1024, 2048, 4096};
  const auto rows = bench_memory(ns, 100, 64);
  std::vector<std::pair<double, double>> attn_total, attn_maps, conv;
  for (const auto& r : rows) {
    const double n = static_cast<double>(r.n);
    if (r.encoder == "self-attn") {
      attn_total.emplace_back(n, r.value);
      attn_maps.emplace_back(n, static_cast<double>(
                                    activation_count(EncoderKind::self_attn, r.n, 100, 64)
                                        .attention_elements));
    } else {
      conv.emplace_back(n, r.value);
    }
  }
  const double s_attn = scaling_exponent(attn_total);
  const double s_maps = scaling_exponent(attn_maps);
  const double s_conv = scaling_exponent(conv);
  const auto depth50 = memory_sweep_depth(50);
  const double secs = seconds_since(t0);
  const bool ok = std::abs(s_attn - 2.0) <= 0.02 && s_conv <= 1.2 && depth50 == 15 && secs < 10;
  return verdict(ok, "self-attn slope " + fmt("%.3f", s_attn) +
                         " (all stored activations; attention maps alone " +
                         fmt("%.3f", s_maps) + "), GLDR slope " + fmt("%.3f", s_conv) +
                         ", GLDR depth at n=50 " + std::to_string(depth50) + ", " +
                         fmt("%.2f", secs) + " s");
}

Outcome parallel_speedup() {
  const unsigned cores = std::thread::hardware_concurrency();
  if (cores < 8)
    return {Status::skip, "host reports " + std::to_string(cores) + " hardware threads (< 8)"};
  LatencySweep s;
  s.ns = {4096};
  s.batches = {1};
  s.threads = {1, 8};
  s.reps = 5;
  s.encoders = {"gldr"};
  const auto conv = bench_latency(s);
  s.encoders = {"bigru"};
  const auto gru = bench_latency(s);
  if (conv.size() != 2 || gru.size() != 2 || conv[0].status != "ok" || conv[1].status != "ok" ||
      gru[0].status != "ok" || gru[1].status != "ok")
    return {Status::fail, "benchmark point skipped"};
  const double conv_speedup = conv[0].value / conv[1].value;
  const double gru_speedup = gru[0].value / gru[1].value;
  return verdict(conv_speedup >= 2.5 && gru_speedup <= 1.5,
                 "GLDR n=4096 8-vs-1 thread speedup " + fmt("%.2f", conv_speedup) +
                     ", BiGRU " + fmt("%.2f", gru_speedup));
}

struct Run {
  TrainResult result;
  double max_em = 0.0;
};

Run train_reader(const std::string& preset, const std::vector<SyntheticExample>& train_set,
                 const std::vector<SyntheticExample>& eval_set, std::size_t steps,
                 std::optional<double> stop_at, std::uint64_t seed) {
  auto model = init_reader<float>(reader_spec(preset), seed);
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.eval_every = 100;
  cfg.seed = seed;
  cfg.stop_at_em = stop_at;
  Run r{train(model, train_set, eval_set, cfg)};
  for (const auto& row : r.result.history) r.max_em = std::max(r.max_em, row.em);
  return r;
}

Outcome long_range_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_set = gen_dataset(8000, 128, 40, 64, 17);
  const auto eval_set = gen_dataset(500, 128, 40, 64, derive_seed(17, 7));
  const auto wide = train_reader("rf129", train_set, eval_set, 5000, 0.9, 17);
  const auto narrow = train_reader("rf33", train_set, eval_set, 5000, std::nullopt, 17);
  const double secs = seconds_since(t0);
  const bool ok = !wide.result.diverged && wide.max_em >= 0.9 && !narrow.result.diverged &&
                  narrow.max_em <= 0.5 && secs < 15 * 60;
  return verdict(ok, "rf129 (RF 129) EM " + fmt("%.3f", wide.max_em) + " at step " +
                         std::to_string(wide.result.steps_run) + "; rf33 (RF 33) max EM " +
                         fmt("%.3f", narrow.max_em) + " over " +
                         std::to_string(narrow.result.steps_run) + " steps; " +
                         fmt("%.0f", secs) + " s");
}

Outcome ablations() {
  const auto dir = std::filesystem::temp_directory_path() / "gldr_acceptance_ablation";
  std::filesystem::create_directories(dir);
  const auto train_set = gen_dataset(4000, 64, 4, 64, 4);
  const auto eval_set = gen_dataset(500, 64, 4, 64, derive_seed(4, 7));
  std::map<std::string, TrainResult> runs;
  bool all_ran = true;
  for (const auto& preset : ablation_presets()) {
    auto model = init_reader<float>(reader_spec(preset), 4);
    TrainConfig cfg;
    cfg.steps = 800;
    cfg.eval_every = 100;
    cfg.seed = 4;
    auto r = train(model, train_set, eval_set, cfg);
    const auto path = dir / (preset + ".metrics.csv");
    std::ofstream(path) << metrics_csv(r);
    all_ran &= std::filesystem::file_size(path) > 0 &&
               (r.diverged || r.steps_run == cfg.steps);
    runs[preset] = std::move(r);
  }
  std::string detail;
  bool direction = true;
  for (const auto& [plain, shortcut] :
       {std::pair{"glu-dilated-noresidual", "glu-dilated-residual"},
        std::pair{"relu-dilated-noresidual", "relu-dilated-residual"}}) {
    const auto& a = runs[plain];
    const auto& b = runs[shortcut];
    const double em_a = a.history.back().em, em_b = b.history.back().em;
    if (!detail.empty()) detail += "; ";
    if (a.diverged) {
      detail += std::string(plain) + " diverged at step " + std::to_string(a.divergence_step);
    } else if (em_a < em_b) {
      detail += std::string(plain) + " trails (EM " + fmt("%.3f", em_a) + " vs " +
                fmt("%.3f", em_b) + ")";
    } else {
      direction = false;
      detail += std::string(plain) + " does NOT trail (EM " + fmt("%.3f", em_a) + " vs " +
                fmt("%.3f", em_b) + ")";
    }
  }
  detail += "; final EM";
  for (const auto& p : ablation_presets())
    detail += " " + p + "=" + (runs[p].diverged ? "diverged" : fmt("%.3f", runs[p].history.back().em));
  detail += "; CSVs in " + dir.string();
  return verdict(all_ran && direction, detail);
}

bool bits_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.dims() != b.dims()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

Outcome determinism() {
  const auto dir = std::filesystem::temp_directory_path() / "gldr_acceptance_determinism";
  std::filesystem::create_directories(dir);
  const auto data = gen_dataset(300, 48, 3, 64, 9);
  ReaderOptions o;
  o.embed = 8;
  o.width = 8;
  auto run_once = [&] {
    auto m = init_reader<double>(reader_spec("rf33", o), 9);
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.eval_every = 10;
    cfg.seed = 9;
    cfg.word_dropout = 0.1;
    const auto csv = metrics_csv(train(m, data, {}, cfg));
    return std::pair{csv, m};
  };
  auto [csv_a, model] = run_once();
  auto [csv_b, unused] = run_once();
  const bool csv_same = csv_a == csv_b;

  const auto ck_path = (dir / "model.ckpt").string();
  save_checkpoint(ck_path, to_checkpoint(model));
  auto back = from_checkpoint<double>(load_checkpoint(ck_path));
  bool ckpt_same = back.spec == model.spec;
  const auto pa = model.list(), pb = back.list();
  ckpt_same &= pa.size() == pb.size();
  for (std::size_t i = 0; ckpt_same && i < pa.size(); ++i)
    ckpt_same &= bits_equal(pa[i]->value, pb[i]->value);
  ckpt_same &= serialize_checkpoint(load_checkpoint(ck_path)) ==
               serialize_checkpoint(to_checkpoint(model));

  const auto data_path = (dir / "data.txt").string();
  save_dataset(data_path, data);
  const bool data_same = load_dataset(data_path) == data;

  return verdict(csv_same && ckpt_same && data_same,
                 std::string("metrics CSV ") + (csv_same ? "byte-identical" : "DIFFERS") +
                     ", checkpoint round-trip " + (ckpt_same ? "bit-exact" : "DIFFERS") +
                     ", dataset round-trip " + (data_same ? "equal" : "DIFFERS"));
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, gradient_correctness}, {2, receptive_fields}, {3, conv_equivalence},
      {4, path_lengths},         {5, memory_scaling},   {6, parallel_speedup},
      {7, long_range_learning},  {8, ablations},        {9, determinism}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  bool failed = false;
  for (const auto& [id, run] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {Status::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    std::printf("criterion %d: %s - %s [%.1f s]\n", id, tag, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    failed |= o.status == Status::fail;
  }
  return failed ? 1 : 0;
}
