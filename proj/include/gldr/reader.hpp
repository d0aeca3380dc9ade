#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gldr/checkpoint.hpp"
#include "gldr/dataset.hpp"
#include "gldr/encoder.hpp"
#include "gldr/optim.hpp"

namespace gldr {

// Shape of a reader: shared embedding, a question GLDR, a passage GLDR,
// parameter-free question-to-passage attention and two 1-wide span heads
// over [passage; question summary; passage * question summary].
struct ReaderSpec {
  std::string preset;
  std::size_t vocab = 64;
  std::size_t embed = 32;
  std::size_t max_span = 3;
  GLDRConfig question;
  GLDRConfig passage;

  std::size_t width() const { return passage.width(); }
  friend bool operator==(const ReaderSpec&, const ReaderSpec&) = default;
};

struct ReaderOptions {
  std::size_t vocab = 64;
  std::size_t embed = 32;
  std::size_t width = 32;
  double dropout = 0.1;
  std::size_t max_span = 3;
};

// The six ablation presets: GLU vs ReLU, dilated vs undilated, with and
// without the residual shortcut. Each uses a 17-layer passage encoder.
inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> names = {
      "glu-dilated-residual",   "glu-undilated-residual",
      "relu-dilated-residual",  "relu-undilated-residual",
      "glu-dilated-noresidual", "relu-dilated-noresidual"};
  return names;
}

// Passage encoders by name:
//   rf33   4 blocks, dilations 1,2,4,8         (receptive field 33)
//   rf129  6 blocks, dilations 1,2,4,8,16,32   (receptive field 129)
//   {glu|relu}-{dilated|undilated}-{residual|noresidual}
//          17 layers: 5 blocks with dilations 1,2,4,8,16 (or all 1) and
//          3 refinement blocks of 1-wide convs
inline ReaderSpec reader_spec(const std::string& preset, const ReaderOptions& o = {}) {
  ReaderSpec s;
  s.preset = preset;
  s.vocab = o.vocab;
  s.embed = o.embed;
  s.max_span = o.max_span;
  if (o.vocab < 2 || o.embed == 0 || o.width == 0 || o.max_span == 0)
    throw ConfigError("reader: vocab, embed, width and max_span must be positive");
  Activation act = Activation::glu;
  if (preset == "rf33") {
    s.passage = make_config("passage-rf33", o.embed, o.width, {1, 2, 4, 8}, o.dropout);
  } else if (preset == "rf129") {
    s.passage = make_config("passage-rf129", o.embed, o.width, {1, 2, 4, 8, 16, 32}, o.dropout);
  } else {
    std::istringstream in(preset);
    std::string a, d, r;
    if (!std::getline(in, a, '-') || !std::getline(in, d, '-') || !std::getline(in, r) ||
        (a != "glu" && a != "relu") || (d != "dilated" && d != "undilated") ||
        (r != "residual" && r != "noresidual"))
      throw ConfigError("unknown reader preset '" + preset + "'");
    act = parse_activation(a);
    const std::vector<std::size_t> dil =
        d == "dilated" ? std::vector<std::size_t>{1, 2, 4, 8, 16}
                       : std::vector<std::size_t>{1, 1, 1, 1, 1};
    s.passage = make_config("passage-" + preset, o.embed, o.width, dil, o.dropout, 3, act);
    s.passage.residual = r == "residual";
  }
  s.question = make_config("question", o.embed, o.width, {1}, o.dropout, 0, act);
  return s;
}

inline void validate(const ReaderSpec& s) {
  validate(s.question);
  validate(s.passage);
  if (s.question.input_channels() != s.embed || s.passage.input_channels() != s.embed)
    throw ConfigError("reader: encoders must read the embedding width " + std::to_string(s.embed));
  if (s.question.width() != s.passage.width())
    throw ConfigError("reader: question width " + std::to_string(s.question.width()) +
                      " differs from passage width " + std::to_string(s.passage.width()));
  if (s.max_span == 0) throw ConfigError("reader: max_span must be positive");
}

// Text form used inside checkpoints.
inline std::string to_text(const ReaderSpec& s) {
  std::ostringstream o;
  o << "preset " << s.preset << "\nvocab " << s.vocab << "\nembed " << s.embed
    << "\nmax-span " << s.max_span << "\n[question]\n"
    << to_text(s.question) << "[passage]\n"
    << to_text(s.passage);
  return o.str();
}

inline ReaderSpec parse_reader_spec(const std::string& text) {
  ReaderSpec s;
  std::istringstream in(text);
  std::string line, section;
  std::map<std::string, std::string> parts;
  while (std::getline(in, line)) {
    if (line == "[question]" || line == "[passage]") {
      section = line;
      continue;
    }
    if (!section.empty()) {
      parts[section] += line + "\n";
      continue;
    }
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key)) continue;
    ls >> value;
    auto number = [&] {
      try {
        return static_cast<std::size_t>(std::stoull(value));
      } catch (const std::exception&) {
        throw ConfigError("reader spec: key '" + key + "': bad integer '" + value + "'");
      }
    };
    if (key == "dtype") continue;  // read by checkpoint_dtype
    if (key == "preset") s.preset = value;
    else if (key == "vocab") s.vocab = number();
    else if (key == "embed") s.embed = number();
    else if (key == "max-span") s.max_span = number();
    else throw ConfigError("reader spec: unknown key '" + key + "'");
  }
  if (!parts.count("[question]") || !parts.count("[passage]"))
    throw ConfigError("reader spec: missing [question] or [passage] section");
  s.question = parse_config(parts["[question]"]);
  s.passage = parse_config(parts["[passage]"]);
  validate(s);
  return s;
}

template <typename T>
struct ReaderModel {
  ReaderSpec spec;
  Parameter<T> embedding;  // [vocab, embed]
  EncoderParams<T> question;
  EncoderParams<T> passage;
  ConvParams<T> start_head;  // [1, 3C, 1]
  ConvParams<T> end_head;

  std::vector<Parameter<T>*> list() {
    std::vector<Parameter<T>*> out{&embedding};
    for (auto* p : question.list()) out.push_back(p);
    for (auto* p : passage.list()) out.push_back(p);
    for (auto* p : {&start_head.weight, &start_head.bias, &end_head.weight, &end_head.bias})
      out.push_back(p);
    return out;
  }
};

template <typename T>
ReaderModel<T> init_reader(const ReaderSpec& spec, std::uint64_t seed,
                           InitScheme scheme = InitScheme::fan_in_uniform) {
  validate(spec);
  ReaderModel<T> m;
  m.spec = spec;
  Rng rng(derive_seed(seed, 100));
  Tensor<T> table({spec.vocab, spec.embed});
  for (auto& v : table.storage()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  m.embedding = Parameter<T>("embedding", std::move(table));
  m.question = init_params<T>(spec.question, derive_seed(seed, 101), scheme, "question");
  m.passage = init_params<T>(spec.passage, derive_seed(seed, 102), scheme, "passage");
  const std::size_t fused = 3 * spec.width();
  auto head = [&](const std::string& name) {
    return ConvParams<T>{Parameter<T>(name + ".w", Tensor<T>({1, fused, 1})),
                         Parameter<T>(name + ".b", Tensor<T>({1}))};
  };
  m.start_head = head("start");
  m.end_head = head("end");
  return m;
}

// Per passage position, the softmax-over-question (scores q_j . p_t)
// weighted sum of question vectors -> [b, C, n].
template <typename T>
Var<T> question_summary(Var<T> q_enc, Var<T> p_enc) {
  if (q_enc.value().rank() != 3 || p_enc.value().rank() != 3 ||
      q_enc.dim(0) != p_enc.dim(0) || q_enc.dim(1) != p_enc.dim(1))
    throw ConfigError("attend: question " + shape_string(q_enc.dims()) +
                      " and passage " + shape_string(p_enc.dims()) +
                      " must share batch and width");
  auto weights = softmax_last(bmm_tn(p_enc, q_enc));  // [b, n, q]
  return bmm_nt(q_enc, weights);                       // [b, C, n]
}

// Question-aware passage features: the summary stacked under the passage
// encoding -> [b, 2C, n].
template <typename T>
Var<T> attend(Var<T> q_enc, Var<T> p_enc) {
  return concat_channels(p_enc, question_summary(q_enc, p_enc));
}

// Fused head input [b, 3C, n]; the product term lets a linear head score
// passage/question agreement directly.
template <typename T>
Var<T> fuse(Var<T> q_enc, Var<T> p_enc) {
  auto summary = question_summary(q_enc, p_enc);
  return concat_channels(concat_channels(p_enc, summary), mul(p_enc, summary));
}

template <typename T>
struct SpanLogits {
  Var<T> start;  // [b, n]
  Var<T> end;
};

template <typename T>
SpanLogits<T> reader_forward(Graph<T>& g, ReaderModel<T>& m, const IdTensor& question,
                             const IdTensor& passage, const ForwardContext& ctx = {}) {
  auto table = g.param(m.embedding);
  const ForwardContext qctx{ctx.training, derive_seed(ctx.seed, 1)};
  const ForwardContext pctx{ctx.training, derive_seed(ctx.seed, 2)};
  auto q = gldr_forward(embedding(g, question, table), m.spec.question, m.question, qctx);
  auto p = gldr_forward(embedding(g, passage, table), m.spec.passage, m.passage, pctx);
  auto fused = fuse(q, p);
  const Shape rows{passage.dims[0], passage.dims[1]};
  auto head = [&](ConvParams<T>& h) {
    return reshape(conv1d(fused, g.param(h.weight), g.param(h.bias), 1), rows);
  };
  return {head(m.start_head), head(m.end_head)};
}

// Joint argmax of start[s] + end[e] over s <= e <= s + max_len - 1; ties go
// to the smallest s, then the smallest e.
template <typename T>
std::pair<std::size_t, std::size_t> predict_span(const T* start, const T* end,
                                                 std::size_t n, std::size_t max_len) {
  if (n == 0) throw ConfigError("predict_span: empty logits");
  if (max_len == 0) throw ConfigError("predict_span: max_len must be positive");
  std::pair<std::size_t, std::size_t> best{0, 0};
  T best_score = start[0] + end[0];
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t e = s; e < std::min(n, s + max_len); ++e) {
      const T score = start[s] + end[e];
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  return best;
}

template <typename T>
std::pair<std::size_t, std::size_t> predict_span(const std::vector<T>& start,
                                                 const std::vector<T>& end,
                                                 std::size_t max_len) {
  if (start.size() != end.size())
    throw ConfigError("predict_span: start and end logits differ in length");
  return predict_span(start.data(), end.data(), start.size(), max_len);
}

// Token-overlap F1 between two inclusive spans.
inline double span_f1(std::pair<std::size_t, std::size_t> pred,
                      std::pair<std::size_t, std::size_t> gold) {
  const std::size_t lo = std::max(pred.first, gold.first);
  const std::size_t hi = std::min(pred.second, gold.second);
  if (lo > hi) return 0.0;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(pred.second - pred.first + 1);
  const double recall = overlap / static_cast<double>(gold.second - gold.first + 1);
  return 2.0 * precision * recall / (precision + recall);
}

namespace detail {

inline void check_dataset(const std::vector<SyntheticExample>& data, std::size_t vocab,
                          const char* what) {
  if (data.empty()) throw DataError(std::string(what) + ": dataset is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    auto bad = [&](const std::string& msg) {
      return DataError(std::string(what) + ": example " + std::to_string(i) + ": " + msg);
    };
    if (ex.passage.empty() || ex.question.empty()) throw bad("empty question or passage");
    if (ex.start > ex.end || ex.end >= ex.passage.size()) throw bad("span outside passage");
    for (auto id : ex.question)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw bad("token id " + std::to_string(id) + " outside vocabulary");
    for (auto id : ex.passage)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw bad("token id " + std::to_string(id) + " outside vocabulary");
  }
}

// Consecutive runs of examples sharing question and passage lengths, so each
// group stacks into one batch tensor.
inline std::vector<std::vector<std::size_t>> shape_groups(const std::vector<SyntheticExample>& data,
                                                          const std::vector<std::size_t>& idx) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> by_shape;
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (auto i : idx) {
    const auto key = std::make_pair(data[i].question.size(), data[i].passage.size());
    auto& slot = by_shape[key];
    if (slot.empty()) order.push_back(key);
    slot.push_back(i);
  }
  std::vector<std::vector<std::size_t>> out;
  for (const auto& k : order) out.push_back(std::move(by_shape[k]));
  return out;
}

struct Batch {
  IdTensor question, passage;
  std::vector<std::size_t> starts, ends;
};

inline Batch make_batch(const std::vector<SyntheticExample>& data,
                        const std::vector<std::size_t>& idx) {
  Batch b;
  const std::size_t q = data[idx[0]].question.size(), n = data[idx[0]].passage.size();
  std::vector<std::int64_t> qi, pi;
  qi.reserve(idx.size() * q);
  pi.reserve(idx.size() * n);
  for (auto i : idx) {
    qi.insert(qi.end(), data[i].question.begin(), data[i].question.end());
    pi.insert(pi.end(), data[i].passage.begin(), data[i].passage.end());
    b.starts.push_back(data[i].start);
    b.ends.push_back(data[i].end);
  }
  b.question = IdTensor({idx.size(), q}, std::move(qi));
  b.passage = IdTensor({idx.size(), n}, std::move(pi));
  return b;
}

}  // namespace detail

template <typename T>
Var<T> span_loss(const SpanLogits<T>& logits, const std::vector<std::size_t>& starts,
                 const std::vector<std::size_t>& ends) {
  return add(softmax_cross_entropy(logits.start, starts),
             softmax_cross_entropy(logits.end, ends));
}

struct EvalResult {
  double exact_match = 0.0;
  double f1 = 0.0;
  double loss = 0.0;  // mean start + end cross-entropy
  std::vector<std::pair<std::size_t, std::size_t>> predictions;
};

template <typename T>
EvalResult evaluate(ReaderModel<T>& m, const std::vector<SyntheticExample>& data,
                    std::size_t batch = 64) {
  detail::check_dataset(data, m.spec.vocab, "evaluate");
  EvalResult r;
  r.predictions.resize(data.size());
  double loss = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(data.size(), begin + batch); ++i) idx.push_back(i);
    for (const auto& group : detail::shape_groups(data, idx)) {
      const auto b = detail::make_batch(data, group);
      Graph<T> g(false);
      const auto logits = reader_forward(g, m, b.question, b.passage);
      loss += static_cast<double>(span_loss(logits, b.starts, b.ends).value()[0]) *
              static_cast<double>(group.size());
      const std::size_t n = b.passage.dims[1];
      const auto& s = logits.start.value();
      const auto& e = logits.end.value();
      for (std::size_t k = 0; k < group.size(); ++k)
        r.predictions[group[k]] =
            predict_span(&s.storage()[k * n], &e.storage()[k * n], n, m.spec.max_span);
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::pair<std::size_t, std::size_t> gold{data[i].start, data[i].end};
    r.exact_match += r.predictions[i] == gold ? 1.0 : 0.0;
    r.f1 += span_f1(r.predictions[i], gold);
  }
  const double count = static_cast<double>(data.size());
  r.exact_match /= count;
  r.f1 /= count;
  r.loss = loss / count;
  return r;
}

struct TrainConfig {
  AdamHyper adam{1e-3, 0.9, 0.999, 1e-8};
  std::size_t batch = 32;
  std::size_t steps = 1000;
  std::size_t eval_every = 100;
  std::size_t eval_batch = 64;
  double word_dropout = 0.0;
  std::uint64_t seed = 0;
  // Stop once the evaluation EM reaches this value.
  std::optional<double> stop_at_em;
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double em = 0.0;
  double f1 = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  std::size_t steps_run = 0;
  bool diverged = false;
  std::size_t divergence_step = 0;
  std::string divergence_message;
};

inline const char* kMetricsHeader = "step,loss,em,f1";

inline std::string metrics_csv(const TrainResult& r) {
  std::ostringstream o;
  o << kMetricsHeader << '\n';
  char buf[160];
  for (const auto& row : r.history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f,%.6f\n", row.step, row.loss, row.em, row.f1);
    o << buf;
  }
  return o.str();
}

// Adam on start + end cross-entropy. A metrics row (loss, EM, F1 on
// `eval_set`, or on `train_set` when it is empty) is recorded before the
// first step, every eval_every steps and after the last step. A non-finite
// value anywhere stops training and is reported with its step.
template <typename T>
TrainResult train(ReaderModel<T>& m, const std::vector<SyntheticExample>& train_set,
                  const std::vector<SyntheticExample>& eval_set, const TrainConfig& cfg) {
  detail::check_dataset(train_set, m.spec.vocab, "train");
  const auto& evals = eval_set.empty() ? train_set : eval_set;
  if (!eval_set.empty()) detail::check_dataset(eval_set, m.spec.vocab, "train (eval set)");
  if (cfg.batch == 0 || cfg.eval_every == 0)
    throw ConfigError("train: batch and eval_every must be positive");
  if (!(cfg.word_dropout >= 0.0 && cfg.word_dropout < 1.0))
    throw ConfigError("train: word_dropout must be in [0,1)");

  TrainResult res;
  auto params = m.list();
  AdamState<T> adam(cfg.adam);
  Rng order_rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(train_set.size());
  std::size_t cursor = order.size();

  auto record = [&](std::size_t step) {
    const auto e = evaluate(m, evals, cfg.eval_batch);
    if (!std::isfinite(e.loss)) throw NumericError("non-finite evaluation loss");
    res.history.push_back({step, e.loss, e.exact_match, e.f1});
    return e.exact_match;
  };
  auto diverge = [&](std::size_t step, const std::string& what) {
    res.diverged = true;
    res.divergence_step = step;
    res.divergence_message = "diverged at step " + std::to_string(step) + ": " + what;
  };

  try {
    record(0);
  } catch (const NumericError& e) {
    diverge(0, e.what());
    return res;
  }
  if (cfg.stop_at_em && res.history.back().em >= *cfg.stop_at_em) return res;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < std::min(cfg.batch, train_set.size())) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = 0; i + 1 < order.size(); ++i)
          std::swap(order[i], order[i + order_rng.below(order.size() - i)]);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    try {
      for (auto* p : params) p->zero_grad();
      Graph<T> g;
      std::optional<Var<T>> loss;
      const std::uint64_t step_seed = derive_seed(cfg.seed, 1000 + step);
      std::size_t part = 0;
      for (const auto& group : detail::shape_groups(train_set, idx)) {
        auto b = detail::make_batch(train_set, group);
        const std::int64_t unk = VocabLayout{}.unk;
        b.question = word_dropout(b.question, cfg.word_dropout, true,
                                  derive_seed(step_seed, 3 * part + 1), unk);
        b.passage = word_dropout(b.passage, cfg.word_dropout, true,
                                 derive_seed(step_seed, 3 * part + 2), unk);
        const ForwardContext ctx{true, derive_seed(step_seed, 3 * part + 3)};
        auto l = scale(span_loss(reader_forward(g, m, b.question, b.passage, ctx), b.starts, b.ends),
                       static_cast<T>(static_cast<double>(group.size()) / static_cast<double>(idx.size())));
        loss = loss ? add(*loss, l) : l;
        ++part;
      }
      g.backward(*loss);
      for (auto* p : params) p->grad.require_finite("gradient of " + p->name);
      adam_step(params, adam);
      res.steps_run = step;
      if (step % cfg.eval_every == 0 || step == cfg.steps) {
        const double em = record(step);
        if (cfg.stop_at_em && em >= *cfg.stop_at_em) break;
      }
    } catch (const NumericError& e) {
      diverge(step, e.what());
      break;
    }
  }
  return res;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

// Checkpoint: training precision and reader spec as meta text, parameters as
// named records.
template <typename T>
Checkpoint to_checkpoint(ReaderModel<T>& m) {
  Checkpoint ck;
  ck.meta = std::string("dtype ") + dtype_name<T>() + "\n" + to_text(m.spec);
  for (auto* p : m.list()) ck.records.push_back({p->name, p->value.template cast<double>()});
  return ck;
}

// Precision the checkpointed model was trained in; "f64" when unrecorded.
inline std::string checkpoint_dtype(const Checkpoint& ck) {
  std::istringstream in(ck.meta);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("dtype ", 0) != 0) continue;
    const auto v = line.substr(6);
    if (v != "f32" && v != "f64") throw DataError("checkpoint meta: unknown dtype '" + v + "'");
    return v;
  }
  return "f64";
}

template <typename T>
ReaderModel<T> from_checkpoint(const Checkpoint& ck) {
  ReaderSpec spec;
  try {
    spec = parse_reader_spec(ck.meta);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint meta: ") + e.what());
  }
  auto m = init_reader<T>(spec, 0);
  auto params = m.list();
  if (params.size() != ck.records.size())
    throw DataError("checkpoint holds " + std::to_string(ck.records.size()) +
                    " records, model expects " + std::to_string(params.size()));
  for (auto* p : params) {
    const auto* r = ck.find(p->name);
    if (!r) throw DataError("checkpoint lacks parameter '" + p->name + "'");
    if (r->value.dims() != p->value.dims())
      throw DataError("checkpoint parameter '" + p->name + "' has dims " +
                      shape_string(r->value.dims()) + ", expected " +
                      shape_string(p->value.dims()));
    p->value = r->value.template cast<T>();
    p->value.require_finite("checkpoint parameter " + p->name);
  }
  return m;
}

}  // namespace gldr
