#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gldr/autodiff.hpp"
#include "gldr/parallel.hpp"
#include "gldr/rng.hpp"

namespace gldr {

namespace detail {

template <typename T>
T sigmoid(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Dot product with four independent accumulators; fixed order, so the
// result does not depend on how callers are scheduled.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace detail

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

namespace detail {

template <typename T>
ArrayMap<T> arr(Tensor<T>& t) {
  return {t.storage().data(), static_cast<Eigen::Index>(t.size())};
}
template <typename T>
ConstArrayMap<T> arr(const Tensor<T>& t) {
  return {t.storage().data(), static_cast<Eigen::Index>(t.size())};
}
template <typename T>
ArrayMap<T> arr(T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}
template <typename T>
ConstArrayMap<T> arr(const T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}

// Vectorized transcendentals. Eigen's packet path rounds differently from
// its scalar tail, so results go through a freshly allocated (aligned)
// buffer: which elements take which path then depends only on the length.
template <typename T>
void sigmoid_into(const T* in, T* out, std::size_t n) {
  const Eigen::Array<T, Eigen::Dynamic, 1> r = arr(in, n).logistic();
  std::copy(r.data(), r.data() + r.size(), out);
}
template <typename T>
void tanh_into(const T* in, T* out, std::size_t n) {
  const Eigen::Array<T, Eigen::Dynamic, 1> r = arr(in, n).tanh();
  std::copy(r.data(), r.data() + r.size(), out);
}

}  // namespace detail

namespace detail {

// Unrolls flattened positions [p0, p1) of a [B, C, n] batch (p = b*n + t)
// into a [C*k, p1-p0] matrix: row c*k + j holds x[b, c, t + shift_j], zero
// where out of range.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t n, std::size_t k,
            std::size_t dilation, std::size_t p0, std::size_t p1, T* col) {
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto d = static_cast<std::ptrdiff_t>(dilation);
  const auto sn = static_cast<std::ptrdiff_t>(n);
  const std::size_t w = p1 - p0;
  for (std::size_t p = p0; p < p1;) {
    const std::size_t b = p / n, t0 = p % n;
    const std::size_t t1 = std::min(n, t0 + (p1 - p));
    const std::size_t off = p - p0;
    for (std::size_t c = 0; c < C; ++c) {
      const T* in = x + (b * C + c) * n;
      for (std::size_t j = 0; j < k; ++j) {
        T* row = col + (c * k + j) * w + off;
        const std::ptrdiff_t shift = d * (half - static_cast<std::ptrdiff_t>(j));
        const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, sn));
        const auto hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sn - shift, 0, sn));
        for (std::size_t t = t0; t < t1; ++t)
          row[t - t0] = (t >= lo && t < hi) ? in[static_cast<std::ptrdiff_t>(t) + shift] : T{0};
      }
    }
    p += t1 - t0;
  }
}

// Applies fn(b, t0, t1, offset) to each per-sequence segment of [p0, p1).
template <typename Fn>
void for_segments(std::size_t n, std::size_t p0, std::size_t p1, Fn&& fn) {
  for (std::size_t p = p0; p < p1;) {
    const std::size_t b = p / n, t0 = p % n;
    const std::size_t t1 = std::min(n, t0 + (p1 - p));
    fn(b, t0, t1, p - p0);
    p += t1 - t0;
  }
}

// Column tile for unrolled convolutions. GEMM rounding depends on operand
// shapes, so tiles are fixed and never derived from the thread count.
inline constexpr std::size_t kConvTile = 512;
// Tiles whose weight-gradient partials are held at once.
inline constexpr std::size_t kConvTileGroup = 16;

}  // namespace detail

// Dilated convolution with same padding. x [B,Cin,n], w [Cout,Cin,k],
// bias [Cout] -> [B,Cout,n]; tap j reads x[t - d*(j - k/2)].
template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>& bias, std::size_t dilation) {
  detail::require(x.rank() == 3, "conv1d: input must be [batch,channels,n]");
  detail::require(w.rank() == 3, "conv1d: weights must be [Cout,Cin,k]");
  const std::size_t B = x.dim(0), Cin = x.dim(1), n = x.dim(2);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == Cin,
                  "conv1d: weights expect " + std::to_string(w.dim(1)) +
                      " input channels, got " + std::to_string(Cin));
  detail::require(k % 2 == 1, "conv1d: kernel size must be odd, got " +
                                  std::to_string(k));
  detail::require(dilation >= 1, "conv1d: dilation must be >= 1");
  detail::require(bias.rank() == 1 && bias.dim(0) == Cout,
                  "conv1d: bias must be [Cout]");
  x.require_finite("conv1d input");

  Tensor<T> y({B, Cout, n});
  const std::size_t total = B * n;
  if (total == 0) return y;
  const std::size_t K = Cin * k;
  const std::size_t tiles = (total + detail::kConvTile - 1) / detail::kConvTile;
  ConstMatrixMap<T> W(w.storage().data(), Cout, K);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.storage().data(), Cout);
  parallel_for(tiles, [&](std::size_t tile) {
    const std::size_t p0 = tile * detail::kConvTile;
    const std::size_t p1 = std::min(total, p0 + detail::kConvTile);
    RowMatrix<T> col(K, p1 - p0);
    detail::im2col(x.storage().data(), Cin, n, k, dilation, p0, p1, col.data());
    RowMatrix<T> out = W * col;
    out.colwise() += bv;
    detail::for_segments(n, p0, p1, [&](std::size_t b, std::size_t t0, std::size_t t1,
                                        std::size_t off) {
      Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>> dst(
          &y.storage()[b * Cout * n + t0], Cout, t1 - t0, Eigen::OuterStride<>(n));
      dst = out.middleCols(off, t1 - t0);
    });
  });
  return y;
}

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& w,
                     std::size_t dilation, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* dbias) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), n = x.dim(2);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  const std::size_t total = B * n;
  if (total == 0) return;
  const std::size_t K = Cin * k;
  const std::size_t tiles = (total + detail::kConvTile - 1) / detail::kConvTile;

  if (dx) {
    // dx[ci, s] = sum_{co,j} w[co,ci,j] * dy[co, s - shift_j]: a gather over
    // dy with the taps mirrored, so column tiles never collide.
    RowMatrix<T> wt(Cin, Cout * k);
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t j = 0; j < k; ++j)
          wt(ci, co * k + (k - 1 - j)) = w(co, ci, j);
    parallel_for(tiles, [&](std::size_t tile) {
      const std::size_t p0 = tile * detail::kConvTile;
      const std::size_t p1 = std::min(total, p0 + detail::kConvTile);
      RowMatrix<T> col(Cout * k, p1 - p0);
      detail::im2col(dy.storage().data(), Cout, n, k, dilation, p0, p1, col.data());
      RowMatrix<T> gin = wt * col;
      detail::for_segments(n, p0, p1, [&](std::size_t b, std::size_t t0, std::size_t t1,
                                          std::size_t off) {
        Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>> dst(
            &dx->storage()[b * Cin * n + t0], Cin, t1 - t0, Eigen::OuterStride<>(n));
        dst += gin.middleCols(off, t1 - t0);
      });
    });
  }
  if (dw || dbias) {
    // Per-tile partials, summed in tile order.
    std::vector<RowMatrix<T>> pw(dw ? std::min(tiles, detail::kConvTileGroup) : 0);
    std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> pb(
        dbias ? std::min(tiles, detail::kConvTileGroup) : 0);
    for (std::size_t first = 0; first < tiles; first += detail::kConvTileGroup) {
      const std::size_t count = std::min(detail::kConvTileGroup, tiles - first);
      parallel_for(count, [&](std::size_t i) {
        const std::size_t p0 = (first + i) * detail::kConvTile;
        const std::size_t p1 = std::min(total, p0 + detail::kConvTile);
        RowMatrix<T> grads(Cout, p1 - p0);
        detail::for_segments(n, p0, p1, [&](std::size_t b, std::size_t t0, std::size_t t1,
                                            std::size_t off) {
          grads.middleCols(off, t1 - t0) = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>(
              &dy.storage()[b * Cout * n + t0], Cout, t1 - t0, Eigen::OuterStride<>(n));
        });
        if (dw) {
          RowMatrix<T> cols(K, p1 - p0);
          detail::im2col(x.storage().data(), Cin, n, k, dilation, p0, p1, cols.data());
          pw[i].noalias() = grads * cols.transpose();
        }
        if (dbias) pb[i] = grads.rowwise().sum();
      });
      for (std::size_t i = 0; i < count; ++i) {
        if (dw) detail::arr(*dw) += Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(
                    pw[i].data(), pw[i].size());
        if (dbias) detail::arr(*dbias) += pb[i].array();
      }
    }
  }
}

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, Var<T> bias, std::size_t dilation) {
  Graph<T>& g = *x.graph;
  Tensor<T> y = conv1d_forward(x.value(), w.value(), bias.value(), dilation);
  return g.record(
      "conv1d", {x.id, w.id, bias.id}, std::move(y),
      [xi = x.id, wi = w.id, bi = bias.id, dilation](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        Tensor<T>* dx = g.wants_grad(xi) ? &g.grad_buffer(xi) : nullptr;
        Tensor<T>* dw = g.wants_grad(wi) ? &g.grad_buffer(wi) : nullptr;
        Tensor<T>* db = g.wants_grad(bi) ? &g.grad_buffer(bi) : nullptr;
        conv1d_backward(g.value(xi), g.value(wi), dilation, dy, dx, dw, db);
      });
}

// Gated linear unit over channels: first half * sigmoid(second half).
template <typename T>
Var<T> glu(Var<T> x) {
  const auto& v = x.value();
  detail::require(v.rank() == 3, "glu: input must be [batch,channels,n]");
  const std::size_t B = v.dim(0), C2 = v.dim(1), n = v.dim(2);
  detail::require(C2 % 2 == 0, "glu: channel count must be even, got " +
                                   std::to_string(C2));
  const std::size_t C = C2 / 2, half = C * n;
  Tensor<T> y({B, C, n});
  Tensor<T> gate({B, C, n});
  for (std::size_t b = 0; b < B; ++b) {
    const T* in = v.storage().data() + b * 2 * half;
    T* s = gate.storage().data() + b * half;
    detail::sigmoid_into(in + half, s, half);
    detail::arr(y.storage().data() + b * half, half) =
        detail::arr(in, half) * detail::arr(s, half);
  }
  return x.graph->record(
      "glu", {x.id}, std::move(y),
      [xi = x.id, gate = std::move(gate)](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        const auto& v = g.value(xi);
        auto& dx = g.grad_buffer(xi);
        const std::size_t B = gate.dim(0), half = gate.dim(1) * gate.dim(2);
        for (std::size_t b = 0; b < B; ++b) {
          const auto s = detail::arr(gate.storage().data() + b * half, half);
          const auto go = detail::arr(dy.storage().data() + b * half, half);
          const auto a = detail::arr(v.storage().data() + b * 2 * half, half);
          T* d = dx.storage().data() + b * 2 * half;
          detail::arr(d, half) += go * s;
          detail::arr(d + half, half) += go * a * s * (T{1} - s);
        }
      });
}

// Affine map over the last axis: x [..., F], W [G, F], b [G] -> [..., G].
template <typename T>
Var<T> linear(Var<T> x, Var<T> W, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = W.value();
  detail::require(xv.rank() >= 1 && wv.rank() == 2,
                  "linear: expected x [...,F] and W [G,F]");
  const std::size_t F = xv.dims().back(), G = wv.dim(0);
  detail::require(wv.dim(1) == F, "linear: W expects " +
                                      std::to_string(wv.dim(1)) +
                                      " features, got " + std::to_string(F));
  detail::require(b.value().rank() == 1 && b.value().dim(0) == G,
                  "linear: bias must be [G]");
  const std::size_t rows = F ? xv.size() / F : 0;
  Shape out_dims = xv.dims();
  out_dims.back() = G;
  Tensor<T> y(out_dims);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < G; ++o)
      y[r * G + o] = b.value()[o] + detail::dot(&wv.storage()[o * F],
                                                &xv.storage()[r * F], F);
  return x.graph->record(
      "linear", {x.id, W.id, b.id}, std::move(y),
      [xi = x.id, wi = W.id, bi = b.id, rows, F, G](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        const auto& xv = g.value(xi);
        const auto& wv = g.value(wi);
        if (g.wants_grad(xi)) {
          auto& dx = g.grad_buffer(xi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < G; ++o)
              detail::axpy(dy[r * G + o], &wv.storage()[o * F],
                           &dx.storage()[r * F], F);
        }
        if (g.wants_grad(wi)) {
          auto& dw = g.grad_buffer(wi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < G; ++o)
              detail::axpy(dy[r * G + o], &xv.storage()[r * F],
                           &dw.storage()[o * F], F);
        }
        if (g.wants_grad(bi)) {
          auto& db = g.grad_buffer(bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < G; ++o) db[o] += dy[r * G + o];
        }
      });
}

// ids [B, n] looked up in table [V, E], emitted channels-first [B, E, n].
template <typename T>
Var<T> embedding(Graph<T>& g, const IdTensor& ids, Var<T> table) {
  detail::require(ids.dims.size() == 2, "embedding: ids must be [batch,n]");
  const auto& tv = table.value();
  detail::require(tv.rank() == 2, "embedding: table must be [V,E]");
  const std::size_t B = ids.dims[0], n = ids.dims[1];
  const std::size_t V = tv.dim(0), E = tv.dim(1);
  for (auto id : ids.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw ConfigError("embedding: id " + std::to_string(id) +
                        " out of range [0," + std::to_string(V) + ")");
  Tensor<T> y({B, E, n});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < n; ++t) {
      const auto row = static_cast<std::size_t>(ids.ids[b * n + t]);
      for (std::size_t e = 0; e < E; ++e) y(b, e, t) = tv(row, e);
    }
  return g.record("embedding", {table.id}, std::move(y),
                  [ti = table.id, ids](Graph<T>& g, NodeId self) {
                    const auto& dy = g.grad(self);
                    auto& dt = g.grad_buffer(ti);
                    const std::size_t B = ids.dims[0], n = ids.dims[1];
                    const std::size_t E = dt.dim(1);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t t = 0; t < n; ++t) {
                        const auto row =
                            static_cast<std::size_t>(ids.ids[b * n + t]);
                        for (std::size_t e = 0; e < E; ++e)
                          dt(row, e) += dy(b, e, t);
                      }
                  });
}

enum class Unary { relu, sigmoid, tanh };

template <typename T>
Var<T> unary(Unary kind, Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> y(xv.dims());
  const auto in = detail::arr(xv);
  auto out = detail::arr(y);
  switch (kind) {
    case Unary::relu: out = in.max(T{0}); break;
    case Unary::sigmoid: detail::sigmoid_into(xv.storage().data(), y.storage().data(), xv.size()); break;
    case Unary::tanh: detail::tanh_into(xv.storage().data(), y.storage().data(), xv.size()); break;
  }
  const char* name = kind == Unary::relu      ? "relu"
                     : kind == Unary::sigmoid ? "sigmoid"
                                              : "tanh";
  return x.graph->record(
      name, {x.id}, std::move(y), [xi = x.id, kind](Graph<T>& g, NodeId self) {
        const auto dy = detail::arr(g.grad(self));
        const auto yv = detail::arr(g.value(self));
        const auto xv = detail::arr(g.value(xi));
        auto dx = detail::arr(g.grad_buffer(xi));
        switch (kind) {
          case Unary::relu: dx += (xv > T{0}).select(dy, T{0}); break;
          case Unary::sigmoid: dx += dy * yv * (T{1} - yv); break;
          case Unary::tanh: dx += dy * (T{1} - yv * yv); break;
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) { return unary(Unary::relu, x); }
template <typename T>
Var<T> sigmoid(Var<T> x) { return unary(Unary::sigmoid, x); }
template <typename T>
Var<T> tanh(Var<T> x) { return unary(Unary::tanh, x); }

enum class Binary { add, sub, mul };

// Elementwise binary op; operands must have identical dims.
template <typename T>
Var<T> binary(Binary kind, Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.dims() == bv.dims(),
                  "elementwise: dims " + shape_string(av.dims()) + " vs " +
                      shape_string(bv.dims()));
  Tensor<T> y(av.dims());
  auto out = detail::arr(y);
  switch (kind) {
    case Binary::add: out = detail::arr(av) + detail::arr(bv); break;
    case Binary::sub: out = detail::arr(av) - detail::arr(bv); break;
    case Binary::mul: out = detail::arr(av) * detail::arr(bv); break;
  }
  const char* name = kind == Binary::add ? "add"
                     : kind == Binary::sub ? "sub"
                                           : "mul";
  return a.graph->record(
      name, {a.id, b.id}, std::move(y),
      [ai = a.id, bi = b.id, kind](Graph<T>& g, NodeId self) {
        const auto dy = detail::arr(g.grad(self));
        if (g.wants_grad(ai)) {
          auto da = detail::arr(g.grad_buffer(ai));
          if (kind == Binary::mul)
            da += dy * detail::arr(g.value(bi));
          else
            da += dy;
        }
        if (g.wants_grad(bi)) {
          auto db = detail::arr(g.grad_buffer(bi));
          switch (kind) {
            case Binary::add: db += dy; break;
            case Binary::sub: db -= dy; break;
            case Binary::mul: db += dy * detail::arr(g.value(ai)); break;
          }
        }
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return binary(Binary::add, a, b); }
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) { return binary(Binary::sub, a, b); }
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) { return binary(Binary::mul, a, b); }

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (const T v : x.value().data()) s += v;
  return x.graph->record("sum", {x.id}, Tensor<T>(Shape{}, s),
                         [xi = x.id](Graph<T>& g, NodeId self) {
                           const T go = g.grad(self)[0];
                           auto& dx = g.grad_buffer(xi);
                           for (auto& v : dx.storage()) v += go;
                         });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> y = x.value();
  detail::arr(y) *= factor;
  return x.graph->record("scale", {x.id}, std::move(y),
                         [xi = x.id, factor](Graph<T>& g, NodeId self) {
                           detail::arr(g.grad_buffer(xi)) += factor * detail::arr(g.grad(self));
                         });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape dims) {
  Tensor<T> y = x.value().reshaped(std::move(dims));
  return x.graph->record("reshape", {x.id}, std::move(y),
                         [xi = x.id](Graph<T>& g, NodeId self) {
                           detail::arr(g.grad_buffer(xi)) += detail::arr(g.grad(self));
                         });
}

inline void check_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError(std::string(what) + ": rate must be in [0,1), got " +
                      std::to_string(rate));
}

// Inverted dropout; identity when not training or rate is zero. The mask is
// a counter-based hash of (seed, index), so it is cheap and reproducible.
template <typename T>
Var<T> dropout(Var<T> x, double rate, bool training, std::uint64_t seed) {
  check_rate(rate, "dropout");
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  const auto threshold = static_cast<std::uint64_t>(rate * 0x1.0p53);
  const std::uint64_t base = splitmix64(seed);
  Tensor<T> mask(x.dims());
  auto& m = mask.storage();
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = (splitmix64(base + i) >> 11) < threshold ? T{0} : keep_scale;
  Tensor<T> y = x.value();
  detail::arr(y) *= detail::arr(mask);
  return x.graph->record(
      "dropout", {x.id}, std::move(y),
      [xi = x.id, mask = std::move(mask)](Graph<T>& g, NodeId self) {
        detail::arr(g.grad_buffer(xi)) += detail::arr(g.grad(self)) * detail::arr(mask);
      });
}

// Replaces each token by unk_id with probability rate while training.
// Unlike dropout, rate 1 is allowed (every token replaced).
inline IdTensor word_dropout(const IdTensor& ids, double rate, bool training,
                             std::uint64_t seed, std::int64_t unk_id) {
  if (!(rate >= 0.0 && rate <= 1.0))
    throw ConfigError("word_dropout: rate must be in [0,1], got " +
                      std::to_string(rate));
  if (!training || rate == 0.0) return ids;
  Rng rng(seed);
  IdTensor out = ids;
  for (auto& id : out.ids)
    if (rng.uniform() < rate) id = unk_id;
  return out;
}

// Mean over batch rows of -log softmax(logits)[target]. mask holds one flag
// per logit (empty = all valid); masked positions are excluded.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits,
                             const std::vector<std::size_t>& targets,
                             const std::vector<std::uint8_t>& mask = {}) {
  const auto& lv = logits.value();
  detail::require(lv.rank() == 2, "softmax_cross_entropy: logits must be [b,n]");
  const std::size_t B = lv.dim(0), n = lv.dim(1);
  detail::require(targets.size() == B,
                  "softmax_cross_entropy: one target per batch row required");
  detail::require(mask.empty() || mask.size() == B * n,
                  "softmax_cross_entropy: mask must match logits");
  auto valid = [&](std::size_t b, std::size_t t) {
    return mask.empty() || mask[b * n + t] != 0;
  };
  Tensor<T> probs({B, n});
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t tgt = targets[b];
    if (tgt >= n || !valid(b, tgt))
      throw ConfigError("softmax_cross_entropy: target " + std::to_string(tgt) +
                        " is out of range or masked in row " +
                        std::to_string(b));
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < n; ++t)
      if (valid(b, t)) mx = std::max(mx, lv(b, t));
    T z = 0;
    for (std::size_t t = 0; t < n; ++t)
      if (valid(b, t)) z += std::exp(lv(b, t) - mx);
    const T log_z = mx + std::log(z);
    for (std::size_t t = 0; t < n; ++t)
      probs(b, t) = valid(b, t) ? std::exp(lv(b, t) - log_z) : T{0};
    loss += log_z - lv(b, tgt);
  }
  loss /= static_cast<T>(B);
  return logits.graph->record(
      "softmax_cross_entropy", {logits.id}, Tensor<T>(Shape{}, loss),
      [li = logits.id, probs = std::move(probs), targets](Graph<T>& g,
                                                          NodeId self) {
        const T go = g.grad(self)[0];
        auto& dl = g.grad_buffer(li);
        const std::size_t B = probs.dim(0), n = probs.dim(1);
        const T inv_b = go / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < n; ++t)
            dl(b, t) += inv_b * (probs(b, t) - (t == targets[b] ? T{1} : T{0}));
      });
}

// Concatenates [B,C1,n] and [B,C2,n] along channels.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                      av.dim(2) == bv.dim(2),
                  "concat_channels: incompatible dims " +
                      shape_string(av.dims()) + " and " +
                      shape_string(bv.dims()));
  const std::size_t B = av.dim(0), C1 = av.dim(1), C2 = bv.dim(1), n = av.dim(2);
  Tensor<T> y({B, C1 + C2, n});
  for (std::size_t bb = 0; bb < B; ++bb) {
    std::copy_n(&av.storage()[bb * C1 * n], C1 * n, &y(bb, 0, 0));
    std::copy_n(&bv.storage()[bb * C2 * n], C2 * n, &y.storage()[(bb * (C1 + C2) + C1) * n]);
  }
  return a.graph->record(
      "concat_channels", {a.id, b.id}, std::move(y),
      [ai = a.id, bi = b.id, B, C1, C2, n](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        for (std::size_t bb = 0; bb < B; ++bb) {
          const T* src = &dy.storage()[bb * (C1 + C2) * n];
          if (g.wants_grad(ai)) {
            T* dst = &g.grad_buffer(ai).storage()[bb * C1 * n];
            for (std::size_t i = 0; i < C1 * n; ++i) dst[i] += src[i];
          }
          if (g.wants_grad(bi)) {
            T* dst = &g.grad_buffer(bi).storage()[bb * C2 * n];
            for (std::size_t i = 0; i < C2 * n; ++i) dst[i] += src[C1 * n + i];
          }
        }
      });
}

// s[b,i,j] = sum_c a[b,c,i] * c[b,c,j].  a [B,C,n], c [B,C,m] -> [B,n,m].
template <typename T>
Var<T> bmm_tn(Var<T> a, Var<T> c) {
  const auto& av = a.value();
  const auto& cv = c.value();
  detail::require(av.rank() == 3 && cv.rank() == 3 && av.dim(0) == cv.dim(0) &&
                      av.dim(1) == cv.dim(1),
                  "bmm_tn: width mismatch " + shape_string(av.dims()) +
                      " vs " + shape_string(cv.dims()));
  const std::size_t B = av.dim(0), C = av.dim(1), n = av.dim(2), m = cv.dim(2);
  Tensor<T> s({B, n, m});
  parallel_for(B, [&](std::size_t b) {
    ConstMatrixMap<T> A(&av.storage()[b * C * n], C, n);
    ConstMatrixMap<T> Cm(&cv.storage()[b * C * m], C, m);
    MatrixMap<T> S(&s.storage()[b * n * m], n, m);
    S.noalias() = A.transpose() * Cm;
  });
  return a.graph->record(
      "bmm_tn", {a.id, c.id}, std::move(s),
      [ai = a.id, ci = c.id, B, C, n, m](Graph<T>& g, NodeId self) {
        const auto& ds = g.grad(self);
        const auto& av = g.value(ai);
        const auto& cv = g.value(ci);
        if (g.wants_grad(ai)) {
          auto& da = g.grad_buffer(ai);
          parallel_for(B * C, [&](std::size_t job) {
            const std::size_t b = job / C, k = job % C;
            for (std::size_t i = 0; i < n; ++i)
              da(b, k, i) += detail::dot(&ds(b, i, 0), &cv(b, k, 0), m);
          });
        }
        if (g.wants_grad(ci)) {
          auto& dc = g.grad_buffer(ci);
          parallel_for(B * C, [&](std::size_t job) {
            const std::size_t b = job / C, k = job % C;
            T* dst = &dc(b, k, 0);
            for (std::size_t i = 0; i < n; ++i)
              detail::axpy(av(b, k, i), &ds(b, i, 0), dst, m);
          });
        }
      });
}

// y[b,c,i] = sum_j x[b,c,j] * w[b,i,j].  x [B,C,m], w [B,n,m] -> [B,C,n].
template <typename T>
Var<T> bmm_nt(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require(xv.rank() == 3 && wv.rank() == 3 && xv.dim(0) == wv.dim(0) &&
                      xv.dim(2) == wv.dim(2),
                  "bmm_nt: dims " + shape_string(xv.dims()) + " vs " +
                      shape_string(wv.dims()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), m = xv.dim(2), n = wv.dim(1);
  Tensor<T> y({B, C, n});
  parallel_for(B, [&](std::size_t b) {
    ConstMatrixMap<T> X(&xv.storage()[b * C * m], C, m);
    ConstMatrixMap<T> W(&wv.storage()[b * n * m], n, m);
    MatrixMap<T> Y(&y.storage()[b * C * n], C, n);
    Y.noalias() = X * W.transpose();
  });
  return x.graph->record(
      "bmm_nt", {x.id, w.id}, std::move(y),
      [xi = x.id, wi = w.id, B, C, m, n](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        const auto& xv = g.value(xi);
        const auto& wv = g.value(wi);
        if (g.wants_grad(xi)) {
          auto& dx = g.grad_buffer(xi);
          parallel_for(B * C, [&](std::size_t job) {
            const std::size_t b = job / C, c = job % C;
            T* dst = &dx(b, c, 0);
            for (std::size_t i = 0; i < n; ++i)
              detail::axpy(dy(b, c, i), &wv(b, i, 0), dst, m);
          });
        }
        if (g.wants_grad(wi)) {
          auto& dw = g.grad_buffer(wi);
          parallel_for(B * n, [&](std::size_t job) {
            const std::size_t b = job / n, i = job % n;
            T* dst = &dw(b, i, 0);
            for (std::size_t c = 0; c < C; ++c)
              detail::axpy(dy(b, c, i), &xv(b, c, 0), dst, m);
          });
        }
      });
}

// Softmax over the last axis.
template <typename T>
Var<T> softmax_last(Var<T> x) {
  const auto& xv = x.value();
  detail::require(xv.rank() >= 1, "softmax: rank must be >= 1");
  const std::size_t m = xv.dims().back();
  const std::size_t rows = m ? xv.size() / m : 0;
  Tensor<T> y(xv.dims());
  parallel_for(rows, [&](std::size_t r) {
    const T* in = &xv.storage()[r * m];
    T* out = &y.storage()[r * m];
    const T mx = *std::max_element(in, in + m);
    T z = 0;
    for (std::size_t j = 0; j < m; ++j) z += (out[j] = std::exp(in[j] - mx));
    const T inv = T{1} / z;
    for (std::size_t j = 0; j < m; ++j) out[j] *= inv;
  });
  return x.graph->record(
      "softmax", {x.id}, std::move(y),
      [xi = x.id, rows, m](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        const auto& yv = g.value(self);
        auto& dx = g.grad_buffer(xi);
        parallel_for(rows, [&](std::size_t r) {
          const T* go = &dy.storage()[r * m];
          const T* p = &yv.storage()[r * m];
          const T inner = detail::dot(go, p, m);
          T* dst = &dx.storage()[r * m];
          for (std::size_t j = 0; j < m; ++j) dst[j] += p[j] * (go[j] - inner);
        });
      });
}

// Column t of a [B,C,n] tensor as [B,C].
template <typename T>
Var<T> position(Var<T> x, std::size_t t) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 3 && t < xv.dim(2), "position: out of range");
  const std::size_t B = xv.dim(0), C = xv.dim(1);
  Tensor<T> y({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) y(b, c) = xv(b, c, t);
  return x.graph->record("position", {x.id}, std::move(y),
                         [xi = x.id, t](Graph<T>& g, NodeId self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad_buffer(xi);
                           for (std::size_t b = 0; b < dy.dim(0); ++b)
                             for (std::size_t c = 0; c < dy.dim(1); ++c)
                               dx(b, c, t) += dy(b, c);
                         });
}

// Stacks n tensors of [B,C] into [B,C,n].
template <typename T>
Var<T> stack_positions(const std::vector<Var<T>>& cols) {
  detail::require(!cols.empty(), "stack_positions: no columns");
  const Shape& d = cols.front().dims();
  detail::require(d.size() == 2, "stack_positions: columns must be [B,C]");
  const std::size_t B = d[0], C = d[1], n = cols.size();
  Tensor<T> y({B, C, n});
  std::vector<NodeId> ids;
  ids.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    detail::require(cols[t].dims() == d, "stack_positions: ragged columns");
    const auto& cv = cols[t].value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) y(b, c, t) = cv(b, c);
    ids.push_back(cols[t].id);
  }
  return cols.front().graph->record(
      "stack_positions", ids, std::move(y),
      [ids](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        for (std::size_t t = 0; t < ids.size(); ++t) {
          if (!g.wants_grad(ids[t])) continue;
          auto& dc = g.grad_buffer(ids[t]);
          for (std::size_t b = 0; b < dc.dim(0); ++b)
            for (std::size_t c = 0; c < dc.dim(1); ++c) dc(b, c) += dy(b, c, t);
        }
      });
}

// One GRU step, fused into a single tape node.
//   xproj [B,3h]: input projections (with biases) ordered [update|reset|cand]
//   h     [B,h]:  previous hidden state
//   U     [3h,h]: recurrent weights in the same order
// z = s(xz + Uz h), r = s(xr + Ur h), c = tanh(xc + Uc (r*h)),
// h' = (1 - z) * h + z * c.
template <typename T>
Var<T> gru_step(Var<T> xproj, Var<T> h, Var<T> U) {
  const auto& xv = xproj.value();
  const auto& hv = h.value();
  const auto& uv = U.value();
  detail::require(hv.rank() == 2 && xv.rank() == 2 && uv.rank() == 2,
                  "gru_step: rank mismatch");
  const std::size_t B = hv.dim(0), H = hv.dim(1);
  detail::require(xv.dim(0) == B && xv.dim(1) == 3 * H && uv.dim(0) == 3 * H &&
                      uv.dim(1) == H,
                  "gru_step: shape mismatch");
  Tensor<T> z({B, H}), r({B, H}), c({B, H}), rh({B, H}), out({B, H});
  for (std::size_t b = 0; b < B; ++b) {
    const T* hb = &hv(b, 0);
    for (std::size_t j = 0; j < H; ++j) {
      z(b, j) = detail::sigmoid(xv(b, j) + detail::dot(&uv(j, 0), hb, H));
      r(b, j) = detail::sigmoid(xv(b, H + j) + detail::dot(&uv(H + j, 0), hb, H));
      rh(b, j) = r(b, j) * hb[j];
    }
    for (std::size_t j = 0; j < H; ++j) {
      c(b, j) = std::tanh(xv(b, 2 * H + j) + detail::dot(&uv(2 * H + j, 0), &rh(b, 0), H));
      out(b, j) = (T{1} - z(b, j)) * hb[j] + z(b, j) * c(b, j);
    }
  }
  return h.graph->record(
      "gru_step", {xproj.id, h.id, U.id}, std::move(out),
      [xi = xproj.id, hi = h.id, ui = U.id, z = std::move(z), r = std::move(r),
       c = std::move(c), rh = std::move(rh), B, H](Graph<T>& g, NodeId self) {
        const auto& dy = g.grad(self);
        const auto& hv = g.value(hi);
        const auto& uv = g.value(ui);
        Tensor<T> dpre({B, 3 * H});  // [dz_pre | dr_pre | dc_pre]
        Tensor<T> dh({B, H});
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t j = 0; j < H; ++j) {
            const T go = dy(b, j);
            const T zz = z(b, j), cc = c(b, j);
            dh(b, j) += go * (T{1} - zz);
            dpre(b, j) = go * (cc - hv(b, j)) * zz * (T{1} - zz);
            dpre(b, 2 * H + j) = go * zz * (T{1} - cc * cc);
          }
          // d(rh) = Uc^T dc_pre
          std::vector<T> drh(H, T{0});
          for (std::size_t j = 0; j < H; ++j)
            detail::axpy(dpre(b, 2 * H + j), &uv(2 * H + j, 0), drh.data(), H);
          for (std::size_t j = 0; j < H; ++j) {
            const T rr = r(b, j);
            dh(b, j) += drh[j] * rr;
            dpre(b, H + j) = drh[j] * hv(b, j) * rr * (T{1} - rr);
          }
          for (std::size_t j = 0; j < H; ++j) {
            detail::axpy(dpre(b, j), &uv(j, 0), &dh(b, 0), H);
            detail::axpy(dpre(b, H + j), &uv(H + j, 0), &dh(b, 0), H);
          }
        }
        if (g.wants_grad(xi)) {
          auto& dx = g.grad_buffer(xi);
          for (std::size_t i = 0; i < dpre.size(); ++i) dx[i] += dpre[i];
        }
        if (g.wants_grad(hi)) {
          auto& dhb = g.grad_buffer(hi);
          for (std::size_t i = 0; i < dh.size(); ++i) dhb[i] += dh[i];
        }
        if (g.wants_grad(ui)) {
          auto& du = g.grad_buffer(ui);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < H; ++j) {
              detail::axpy(dpre(b, j), &hv(b, 0), &du(j, 0), H);
              detail::axpy(dpre(b, H + j), &hv(b, 0), &du(H + j, 0), H);
              detail::axpy(dpre(b, 2 * H + j), &rh(b, 0), &du(2 * H + j, 0), H);
            }
        }
      });
}

}  // namespace gldr
