#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gldr/tensor.hpp"

namespace gldr {

// Binary layout (all integers little-endian):
//   magic "GLDRCKPT" | u32 version | u64 meta length | meta (UTF-8 text)
//   u64 record count, then per record:
//     u64 name length | name (UTF-8) | u64 rank | u64 dims[rank]
//     | f64 elements (IEEE-754, little-endian)
inline constexpr char kCheckpointMagic[8] = {'G', 'L', 'D', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Tensor<double> value;
};

struct Checkpoint {
  std::string meta;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : b_(bytes) {}

  std::uint64_t u64(const char* what) { return uint(8, what); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }

  std::string text(std::uint64_t len, const char* what) {
    need(len, what);
    std::string s = b_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::uint64_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= std::uint64_t{static_cast<unsigned char>(b_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  void need(std::uint64_t len, const char* what) {
    if (len > b_.size() - pos_)
      throw DataError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ck.meta.size());
  out += ck.meta;
  detail::put_u64(out, ck.records.size());
  for (const auto& r : ck.records) {
    detail::put_u64(out, r.name.size());
    out += r.name;
    detail::put_u64(out, r.value.rank());
    for (auto d : r.value.dims()) detail::put_u64(out, d);
    for (double v : r.value.storage()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw DataError("not a checkpoint: bad magic header");
  detail::ByteReader in(bytes);
  in.text(sizeof kCheckpointMagic, "magic");
  const auto version = in.u32("version");
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) +
                    " (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.meta = in.text(in.u64("meta length"), "meta");
  const auto count = in.u64("record count");
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.text(in.u64("record name length"), "record name");
    const auto rank = in.u64("rank");
    if (rank > 16) throw DataError("checkpoint record '" + r.name + "' has rank " + std::to_string(rank));
    Shape dims(rank);
    std::uint64_t elems = 1;
    for (auto& d : dims) {
      d = in.u64("dims");
      if (d && elems > in.remaining() / 8 / d)
        throw DataError("checkpoint record '" + r.name + "' is larger than the file");
      elems *= d;
    }
    r.value = Tensor<double>(dims);
    for (auto& v : r.value.storage()) v = std::bit_cast<double>(in.u64("elements"));
    ck.records.push_back(std::move(r));
  }
  if (!in.done()) throw DataError("checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace gldr
