#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gldr/rng.hpp"
#include "gldr/tensor.hpp"

namespace gldr {

// One span-extraction example. `distance` is the number of tokens between
// the key cue and the first answer token (0 = adjacent).
struct SyntheticExample {
  std::vector<std::int64_t> question;
  std::vector<std::int64_t> passage;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive
  std::size_t distance = 0;

  friend bool operator==(const SyntheticExample&, const SyntheticExample&) = default;
};

// Token classes: 0 is unk, then keys, answer tokens, and fillers.
struct VocabLayout {
  std::int64_t size = 0;
  std::int64_t unk = 0;
  std::int64_t key_begin = 1, key_end = 1;
  std::int64_t answer_begin = 1, answer_end = 1;

  bool is_key(std::int64_t id) const { return id >= key_begin && id < key_end; }
  bool is_answer(std::int64_t id) const {
    return id >= answer_begin && id < answer_end;
  }
};

inline VocabLayout vocab_layout(std::size_t vocab) {
  if (vocab < 16) throw ConfigError("vocab must be >= 16, got " + std::to_string(vocab));
  VocabLayout v;
  v.size = static_cast<std::int64_t>(vocab);
  v.key_end = v.key_begin + std::max<std::int64_t>(3, v.size / 8);
  v.answer_begin = v.key_end;
  v.answer_end = v.answer_begin + v.size / 4;
  return v;
}

inline constexpr std::size_t kQuestionLength = 4;
inline constexpr std::size_t kKeyedPairs = 3;
// Keys stay farther than min(distance, this) from every foreign run, so a
// window of up to 33 tokens around a candidate never shows a key.
inline constexpr std::size_t kKeyIsolation = 16;
inline constexpr std::size_t kRunSeparation = 3;
inline constexpr std::size_t kMaxAttempts = 2000;

namespace detail {

struct Run {
  std::size_t start, length;
  std::size_t last() const { return start + length - 1; }
};

inline std::size_t gap(std::size_t a, std::size_t b) { return a > b ? a - b : b - a; }

// Items placed so far. A new candidate is checked against all of them;
// every placed item is foreign to it.
struct Layout {
  std::size_t offset = 0, isolation = 0;
  std::vector<std::size_t> keys;  // keys[i] belongs to runs[i]
  std::vector<Run> runs;          // keyed runs first, then the decoy

  bool run_clashes(const Run& r) const {
    for (const auto& o : runs) {
      const Run& a = o.start < r.start ? o : r;
      const Run& b = o.start < r.start ? r : o;
      if (b.start <= a.last() + kRunSeparation) return true;
    }
    for (auto k : keys) {
      for (std::size_t t = r.start; t <= r.last(); ++t)
        if (gap(t, k) <= isolation || t == k) return true;
      // Only a run's own key may sit exactly distance+1 before it.
      if (r.start == k + offset) return true;
    }
    return false;
  }

  bool key_clashes(std::size_t key) const {
    for (auto k : keys)
      if (k == key) return true;
    for (const auto& r : runs) {
      for (std::size_t t = r.start; t <= r.last(); ++t)
        if (gap(t, key) <= isolation || t == key) return true;
      if (r.start == key + offset) return true;
    }
    return false;
  }
};

inline constexpr std::size_t kPlacementTries = 64;

// Places three key->run pairs (each run exactly distance+1 after its key)
// and one keyless decoy run, one item at a time with bounded retries. Which
// pair is the true one is decided afterwards, so the pairs are exchangeable.
// Returns false when an item cannot be placed.
inline bool place(Rng& rng, std::size_t n, std::size_t distance, Layout& out) {
  out = {};
  out.offset = distance + 1;
  out.isolation = std::min(distance, kKeyIsolation);
  for (std::size_t i = 0; i <= kKeyedPairs; ++i) {
    const bool keyed = i < kKeyedPairs;
    const auto length = static_cast<std::size_t>(rng.between(1, 3));
    const std::size_t reach = (keyed ? out.offset : 0) + length;
    if (reach > n) return false;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
      const auto first = static_cast<std::size_t>(rng.below(n - reach + 1));
      const Run r{keyed ? first + out.offset : first, length};
      if (out.run_clashes(r) || (keyed && out.key_clashes(first))) continue;
      if (keyed) out.keys.push_back(first);
      out.runs.push_back(r);
      placed = true;
    }
    if (!placed) return false;
  }
  return true;
}

}  // namespace detail

// Long-range-dependency retrieval data. The question holds a key token; the
// passage holds that key with the answer run distance+1 tokens later, two
// distractor pairs (other keys, same geometry, wrong answers) and one
// keyless decoy run. Telling the true run apart requires seeing from the
// run back to its key, a window of 2*distance+3 tokens centered on the
// answer start.
inline std::vector<SyntheticExample> gen_dataset(std::size_t count, std::size_t n,
                                                 std::size_t distance,
                                                 std::size_t vocab,
                                                 std::uint64_t seed) {
  if (!(distance + 4 < n))
    throw ConfigError("gen_dataset: need distance + 4 < n (distance " +
                      std::to_string(distance) + ", n " + std::to_string(n) + ")");
  const VocabLayout v = vocab_layout(vocab);
  const auto fillers = static_cast<std::size_t>(v.size - v.answer_end);
  const auto n_keys = static_cast<std::size_t>(v.key_end - v.key_begin);
  const auto n_answers = static_cast<std::size_t>(v.answer_end - v.answer_begin);
  auto filler = [&](Rng& rng) {
    return v.answer_end + static_cast<std::int64_t>(rng.below(fillers));
  };

  std::vector<SyntheticExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, i));
    detail::Layout layout;
    std::size_t attempt = 0;
    while (!detail::place(rng, n, distance, layout))
      if (++attempt == kMaxAttempts)
        throw ConfigError("gen_dataset: infeasible geometry for n " + std::to_string(n) +
                          ", distance " + std::to_string(distance));

    // Distinct key identities; the first goes to the true pair.
    std::vector<std::int64_t> ids(n_keys);
    for (std::size_t k = 0; k < n_keys; ++k) ids[k] = v.key_begin + static_cast<std::int64_t>(k);
    for (std::size_t k = 0; k < kKeyedPairs; ++k)
      std::swap(ids[k], ids[k + rng.below(n_keys - k)]);
    const std::size_t truth = rng.below(kKeyedPairs);

    SyntheticExample ex;
    ex.distance = distance;
    ex.passage.resize(n);
    for (auto& t : ex.passage) t = filler(rng);
    for (std::size_t k = 0; k < kKeyedPairs; ++k)
      ex.passage[layout.keys[k]] = ids[k == truth ? 0 : (k < truth ? k + 1 : k)];
    for (const auto& r : layout.runs)
      for (std::size_t t = r.start; t <= r.last(); ++t)
        ex.passage[t] = v.answer_begin + static_cast<std::int64_t>(rng.below(n_answers));
    ex.start = layout.runs[truth].start;
    ex.end = layout.runs[truth].last();

    ex.question.resize(kQuestionLength);
    for (auto& t : ex.question) t = filler(rng);
    ex.question[rng.below(kQuestionLength)] = ids[0];
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line format, one example per line:
//   Q:<id>,<id>,... P:<id>,<id>,... A:<start>-<end> [D:<distance>]
// Positions are 0-based and the span is inclusive.
// ---------------------------------------------------------------------------

inline std::string to_line(const SyntheticExample& ex) {
  std::ostringstream o;
  auto ids = [&](const std::vector<std::int64_t>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) o << (i ? "," : "") << v[i];
  };
  o << "Q:";
  ids(ex.question);
  o << " P:";
  ids(ex.passage);
  o << " A:" << ex.start << "-" << ex.end << " D:" << ex.distance;
  return o.str();
}

namespace detail {

inline std::uint64_t parse_uint(const std::string& s, const std::string& where) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw DataError(where + ": expected a non-negative integer, got '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw DataError(where + ": integer out of range '" + s + "'");
  }
}

inline std::vector<std::int64_t> parse_ids(const std::string& s, const std::string& where) {
  std::vector<std::int64_t> out;
  if (s.empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = s.find(',', pos);
    out.push_back(static_cast<std::int64_t>(
        parse_uint(s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos), where)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace detail

inline SyntheticExample parse_line(const std::string& line, std::size_t line_no = 1) {
  const std::string where = "line " + std::to_string(line_no);
  std::istringstream in(line);
  std::string tok;
  SyntheticExample ex;
  bool q = false, p = false, a = false;
  while (in >> tok) {
    if (tok.rfind("Q:", 0) == 0) {
      ex.question = detail::parse_ids(tok.substr(2), where + " field Q");
      q = true;
    } else if (tok.rfind("P:", 0) == 0) {
      ex.passage = detail::parse_ids(tok.substr(2), where + " field P");
      p = true;
    } else if (tok.rfind("A:", 0) == 0) {
      const auto body = tok.substr(2);
      const auto dash = body.find('-');
      if (dash == std::string::npos)
        throw DataError(where + " field A: expected <start>-<end>, got '" + body + "'");
      ex.start = detail::parse_uint(body.substr(0, dash), where + " field A");
      ex.end = detail::parse_uint(body.substr(dash + 1), where + " field A");
      a = true;
    } else if (tok.rfind("D:", 0) == 0) {
      ex.distance = detail::parse_uint(tok.substr(2), where + " field D");
    } else {
      throw DataError(where + ": unknown field '" + tok + "'");
    }
  }
  if (!q || !p || !a) throw DataError(where + ": expected Q:, P: and A: fields");
  if (ex.passage.empty()) throw DataError(where + ": empty passage");
  if (ex.question.empty()) throw DataError(where + ": empty question");
  if (ex.start > ex.end || ex.end >= ex.passage.size())
    throw DataError(where + ": span " + std::to_string(ex.start) + "-" +
                    std::to_string(ex.end) + " outside passage of length " +
                    std::to_string(ex.passage.size()));
  return ex;
}

inline void save_dataset(const std::string& path, const std::vector<SyntheticExample>& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  for (const auto& ex : data) out << to_line(ex) << '\n';
  if (!out) throw DataError("failed writing dataset '" + path + "'");
}

inline std::vector<SyntheticExample> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read dataset '" + path + "'");
  std::vector<SyntheticExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_line(line, line_no));
  }
  if (out.empty()) throw DataError("dataset '" + path + "' has no examples");
  return out;
}

}  // namespace gldr
