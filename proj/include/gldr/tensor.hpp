#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace gldr {

// Raised for malformed shapes, kernel sizes, dilations, unknown names and
// any other caller-side configuration mistake.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a value that must be finite is NaN or Inf, or when training
// diverges.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised for unreadable or inconsistent data: dataset lines, checkpoints,
// token ids outside the vocabulary.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& dims) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) oss << ',';
    oss << dims[i];
  }
  oss << ']';
  return oss.str();
}

// Dense row-major array. Sequence tensors use [batch, channels, positions].
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape dims, T fill = T{0})
      : dims_(std::move(dims)), data_(shape_size(dims_), fill) {}
  Tensor(Shape dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != shape_size(dims_))
      throw ConfigError("tensor data size " + std::to_string(data_.size()) +
                        " does not match dims " + shape_string(dims_));
  }
  Tensor(Shape dims, std::initializer_list<T> data)
      : Tensor(std::move(dims), std::vector<T>(data)) {}

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * dims_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * dims_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape dims) const {
    if (shape_size(dims) != size())
      throw ConfigError("cannot reshape " + shape_string(dims_) + " to " +
                        shape_string(dims));
    return Tensor(std::move(dims), data_);
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T> && (sizeof(T) == 4 || sizeof(T) == 8)) {
      // Branch-free exponent test so the loop vectorizes.
      using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
      constexpr Bits exp_mask = sizeof(T) == 8 ? Bits(0x7ff0000000000000ULL) : Bits(0x7f800000U);
      Bits bad = 0;
      for (const T& v : data_) {
        Bits b;
        std::memcpy(&b, &v, sizeof b);
        bad |= static_cast<Bits>((b & exp_mask) == exp_mask);
      }
      return bad == 0;
    } else {
      for (const T& v : data_)
        if (!std::isfinite(v)) return false;
      return true;
    }
  }

  void require_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite value in " + what);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Shape dims_;
  std::vector<T> data_;
};

// Integer token ids, [batch, positions].
struct IdTensor {
  Shape dims;
  std::vector<std::int64_t> ids;

  IdTensor() = default;
  IdTensor(Shape d, std::vector<std::int64_t> v)
      : dims(std::move(d)), ids(std::move(v)) {
    if (ids.size() != shape_size(dims))
      throw ConfigError("id tensor size does not match dims " +
                        shape_string(dims));
  }
  std::size_t size() const { return ids.size(); }
  friend bool operator==(const IdTensor&, const IdTensor&) = default;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims())
    throw ConfigError("max_abs_diff: dims " + shape_string(a.dims()) +
                      " vs " + shape_string(b.dims()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace gldr
