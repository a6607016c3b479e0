#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "pvlseg/core/rng.hpp"
#include "pvlseg/core/tensor.hpp"

// Differentiable primitives. Every op computes its forward values eagerly and,
// when grad mode is on and an input requires a gradient, records a closure
// that accumulates input gradients from the output gradient.

namespace pvlseg::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

// c[m×n] (+)= op(a)·op(b), where a is stored m×k (k×m when ta) and b k×n
// (n×k when tb). Operands are staged in Eigen-aligned scratch: vectorised
// kernels peel by address, so products on raw heap pointers could differ in
// the last bit from run to run.
template <class T>
void gemm(const T* a, bool ta, const T* b, bool tb, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  thread_local RowMat<T> A, B, C;
  const auto em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n);
  if (ta) A = CMatMap<T>(a, ek, em).transpose();
  else A = CMatMap<T>(a, em, ek);
  if (tb) B = CMatMap<T>(b, en, ek).transpose();
  else B = CMatMap<T>(b, ek, en);
  C.resize(em, en);
  if (k == 0) C.setZero();
  else C.noalias() = A * B;
  MatMap<T> out(c, em, en);
  if (accumulate) out += C;
  else out = C;
}

template <class T>
T* grad_of(const std::shared_ptr<Node<T>>& p) {
  return p->requires_grad ? p->grad_buffer() : nullptr;
}

// Maps a flat output index onto an operand broadcast against the output shape.
struct IndexMap {
  enum class Kind { Identity, Scalar, Suffix, General } kind = Kind::Identity;
  std::size_t n = 1;
  std::vector<std::size_t> table;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::Identity: return i;
      case Kind::Scalar: return 0;
      case Kind::Suffix: return i % n;
      default: return table[i];
    }
  }
};

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

inline IndexMap make_index_map(const Shape& in, const Shape& out) {
  IndexMap m;
  const std::size_t n_in = shape_numel(in);
  m.n = n_in;
  if (in == out) return m;
  if (n_in == 1) {
    m.kind = IndexMap::Kind::Scalar;
    return m;
  }
  if (in.size() <= out.size() && std::equal(in.begin(), in.end(), out.end() - in.size())) {
    m.kind = IndexMap::Kind::Suffix;
    return m;
  }
  m.kind = IndexMap::Kind::General;
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in.size());
    stride[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t total = shape_numel(out);
  m.table.resize(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t f = 0; f < total; ++f) {
    m.table[f] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return m;
}

template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA dfa, DB dfb) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const IndexMap ma = make_index_map(a.shape(), out_shape);
  const IndexMap mb = make_index_map(b.shape(), out_shape);
  const std::size_t n = shape_numel(out_shape);
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (ma.kind == IndexMap::Kind::Identity && mb.kind == IndexMap::Kind::Identity) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ma(i)], bv[mb(i)]);
  }
  auto pa = a.ptr();
  auto pb = b.ptr();
  return make_result<T>(std::move(out_shape), std::move(out), {pa, pb},
                        [pa, pb, ma, mb, dfa, dfb](Node<T>& o) {
                          const T* av = pa->value.data();
                          const T* bv = pb->value.data();
                          T* ga = grad_of(pa);
                          T* gb = grad_of(pb);
                          for (std::size_t i = 0; i < o.value.size(); ++i) {
                            const T g = o.grad[i];
                            const std::size_t ia = ma(i), ib = mb(i);
                            if (ga) ga[ia] += g * dfa(av[ia], bv[ib], o.value[i]);
                            if (gb) gb[ib] += g * dfb(av[ia], bv[ib], o.value[i]);
                          }
                        });
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto px = x.ptr();
  return make_result<T>(x.shape(), std::move(out), {px}, [px, df](Node<T>& o) {
    T* gx = px->grad_buffer();
    const T* xv = px->value.data();
    for (std::size_t i = 0; i < o.value.size(); ++i) gx[i] += o.grad[i] * df(xv[i], o.value[i]);
  });
}

// (outer, axis, inner) decomposition of a shape around one axis.
inline std::array<std::size_t, 3> split_at(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

inline std::size_t norm_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
inline T sigmoid_scalar(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

// log(1 + e^x) without overflow: x + log1p(e^-x) for x > 0.
template <class T>
inline T softplus_scalar(T v) {
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return softplus_scalar(v); }, [](T v, T) { return sigmoid_scalar(v); });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  auto px = x.ptr();
  return make_result<T>({}, {s}, {px}, [px](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t i = 0; i < px->value.size(); ++i) gx[i] += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "sum_axis");
  const auto [outer, len, inner] = detail::split_at(x.shape(), ax);
  Shape os = x.shape();
  if (keepdim) os[ax] = 1;
  else os.erase(os.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> out(outer * inner, T(0));
  const T* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a = 0; a < len; ++a)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + a) * inner + i];
  auto px = x.ptr();
  return make_result<T>(std::move(os), std::move(out), {px},
                        [px, outer = outer, len = len, inner = inner](Node<T>& n) {
                          T* gx = px->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t a = 0; a < len; ++a)
                              for (std::size_t i = 0; i < inner; ++i)
                                gx[(o * len + a) * inner + i] += n.grad[o * inner + i];
                        });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "mean_axis");
  return scale(sum_axis(x, axis, keepdim), T(1) / static_cast<T>(x.shape()[ax]));
}

// ------------------------------------------------------------------- shaping

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto px = x.ptr();
  return make_result<T>(std::move(shape), x.values(), {px}, [px](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  Shape os(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t d = 0; d < r; ++d) {
    os[d] = x.shape().at(perm[d]);
    src_stride[d] = in_stride[perm[d]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t f = 0; f < n; ++f) {
    src[f] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < os[d]) break;
      off -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(n);
  const T* xv = x.values().data();
  for (std::size_t f = 0; f < n; ++f) out[f] = xv[src[f]];
  auto px = x.ptr();
  return make_result<T>(std::move(os), std::move(out), {px}, [px, src = std::move(src)](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t f = 0; f < src.size(); ++f) gx[src[f]] += o.grad[f];
  });
}

// Swaps the two trailing axes.
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::ptrdiff_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = detail::norm_axis(axis, xs[0].rank(), "concat");
  Shape os = xs[0].shape();
  os[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != os.size()) throw DimensionError("concat: rank mismatch at " + shape_str(x.shape()));
    for (std::size_t d = 0; d < os.size(); ++d) {
      if (d != ax && x.shape()[d] != xs[0].shape()[d]) {
        throw DimensionError("concat: shapes " + shape_str(xs[0].shape()) + " and " + shape_str(x.shape()) +
                             " differ off the concat axis");
      }
    }
    os[ax] += x.shape()[ax];
  }
  const auto [outer, total_len, inner] = detail::split_at(os, ax);
  std::vector<T> out(shape_numel(os));
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t len = x.shape()[ax];
    const T* xv = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv + o * len * inner, len * inner, out.data() + (o * total_len + off) * inner);
    parents.push_back(x.ptr());
    offsets.push_back(off);
    off += len;
  }
  auto ps = parents;
  return make_result<T>(std::move(os), std::move(out), std::move(parents),
                        [ps, offsets, ax, outer = outer, total_len = total_len, inner = inner](Node<T>& n) {
                          for (std::size_t k = 0; k < ps.size(); ++k) {
                            if (!ps[k]->requires_grad) continue;
                            T* g = ps[k]->grad_buffer();
                            const std::size_t len = ps[k]->shape[ax];
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < len * inner; ++j)
                                g[o * len * inner + j] += n.grad[(o * total_len + offsets[k]) * inner + j];
                          }
                        });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis, std::size_t start, std::size_t len) {
  const std::size_t ax = detail::norm_axis(axis, x.rank(), "slice");
  if (start + len > x.shape()[ax]) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds axis extent of " + shape_str(x.shape()));
  }
  const auto [outer, full, inner] = detail::split_at(x.shape(), ax);
  Shape os = x.shape();
  os[ax] = len;
  std::vector<T> out(outer * len * inner);
  const T* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv + (o * full + start) * inner, len * inner, out.data() + o * len * inner);
  auto px = x.ptr();
  return make_result<T>(std::move(os), std::move(out), {px},
                        [px, outer = outer, full = full, inner = inner, start, len](Node<T>& n) {
                          T* gx = px->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t j = 0; j < len * inner; ++j)
                              gx[(o * full + start) * inner + j] += n.grad[o * len * inner + j];
                        });
}

// Row lookup: table [V, D] indexed by ids -> prefix + [D].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids, Shape prefix) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  if (shape_numel(prefix) != ids.size()) throw DimensionError("gather_rows: prefix does not match id count");
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  prefix.push_back(d);
  auto pt = table.ptr();
  return make_result<T>(std::move(prefix), std::move(out), {pt}, [pt, ids, d](Node<T>& n) {
    T* g = pt->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += n.grad[i * d + j];
  });
}

// Picks one position per batch row: x [B, L, D], pos[b] < L -> [B, D].
template <class T>
Tensor<T> take_positions(const Tensor<T>& x, const std::vector<std::size_t>& pos) {
  if (x.rank() != 3 || pos.size() != x.shape()[0]) {
    throw DimensionError("take_positions: expected [B,L,D] with B positions, got " + shape_str(x.shape()));
  }
  const std::size_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
  std::vector<T> out(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    if (pos[i] >= l) throw DimensionError("take_positions: position out of range");
    std::copy_n(x.values().data() + (i * l + pos[i]) * d, d, out.data() + i * d);
  }
  auto px = x.ptr();
  return make_result<T>({b, d}, std::move(out), {px}, [px, pos, l, d](Node<T>& n) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[(i * l + pos[i]) * d + j] += n.grad[i * d + j];
  });
}

// -------------------------------------------------------------------- matmul

// a [..., m, k] times b [k, n] or [..., k, n] (equal batch prefixes). With
// trans_b the trailing pair of b is read as [n, k].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  using detail::CMatMap;
  using detail::MatMap;
  auto fail = [&] {
    throw DimensionError(std::string("matmul: incompatible shapes ") + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (trans_b ? " (b transposed)" : ""));
  };
  if (a.rank() < 2 || b.rank() < 2) fail();
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t kb = trans_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = trans_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) fail();
  const Shape pa(a.shape().begin(), a.shape().end() - 2);
  const Shape pb(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = pb.empty();
  if (!shared_b && pa != pb) fail();

  Shape os = pa;
  os.push_back(m);
  os.push_back(n);
  std::vector<T> out(shape_numel(os));
  const std::size_t batches = shared_b ? 1 : shape_numel(pa);
  const std::size_t rows = shared_b ? shape_numel(pa) * m : m;
  for (std::size_t i = 0; i < batches; ++i) {
    detail::gemm(a.values().data() + i * rows * k, false, b.values().data() + i * n * k, trans_b,
                 out.data() + i * rows * n, rows, k, n, false);
  }
  auto ap = a.ptr();
  auto bp = b.ptr();
  return make_result<T>(std::move(os), std::move(out), {ap, bp},
                        [ap, bp, batches, rows, k, n, trans_b](Node<T>& o) {
                          T* ga = detail::grad_of(ap);
                          T* gb = detail::grad_of(bp);
                          for (std::size_t i = 0; i < batches; ++i) {
                            const T* G = o.grad.data() + i * rows * n;
                            const T* A = ap->value.data() + i * rows * k;
                            const T* B = bp->value.data() + i * n * k;
                            if (trans_b) {
                              if (ga) detail::gemm(G, false, B, false, ga + i * rows * k, rows, n, k, true);
                              if (gb) detail::gemm(G, true, A, false, gb + i * n * k, n, rows, k, true);
                            } else {
                              if (ga) detail::gemm(G, false, B, true, ga + i * rows * k, rows, n, k, true);
                              if (gb) detail::gemm(A, true, G, false, gb + i * k * n, k, rows, n, true);
                            }
                          }
                        });
}

// ------------------------------------------------------------ normalizations

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0 || x.dim(-1) == 0) throw DimensionError("softmax_lastdim: empty last axis");
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * n;
    T* yr = out.data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  auto px = x.ptr();
  return make_result<T>(x.shape(), std::move(out), {px}, [px, n, rows](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0 || x.dim(-1) == 0) throw DimensionError("log_softmax_lastdim: empty last axis");
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] - lse;
  }
  auto px = x.ptr();
  return make_result<T>(x.shape(), std::move(out), {px}, [px, n, rows](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T gs = 0;
      for (std::size_t j = 0; j < n; ++j) gs += g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

// Fused layer normalization over the last axis with affine gamma/beta [D].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine params do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  auto px = x.ptr();
  auto pg = gamma.ptr();
  auto pb = beta.ptr();
  return make_result<T>(x.shape(), std::move(out), {px, pg, pb},
                        [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), d, rows](Node<T>& o) {
                          T* gx = detail::grad_of(px);
                          T* gg = detail::grad_of(pg);
                          T* gb = detail::grad_of(pb);
                          const T* gv = pg->value.data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* g = o.grad.data() + r * d;
                            const T* xh = xhat.data() + r * d;
                            T m1 = 0, m2 = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              if (gg) gg[j] += g[j] * xh[j];
                              if (gb) gb[j] += g[j];
                              const T dxh = g[j] * gv[j];
                              m1 += dxh;
                              m2 += dxh * xh[j];
                            }
                            if (!gx) continue;
                            m1 /= static_cast<T>(d);
                            m2 /= static_cast<T>(d);
                            for (std::size_t j = 0; j < d; ++j)
                              gx[r * d + j] += rstd[r] * (g[j] * gv[j] - m1 - xh[j] * m2);
                          }
                        });
}

// Each last-axis vector divided by max(||v||, eps). Zero vectors stay near
// zero (scaled by 1/eps) rather than producing NaN.
template <class T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t d = x.dim(-1), rows = x.numel() / d;
  std::vector<T> out(x.numel()), denom(rows);
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    denom[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / denom[r];
  }
  auto px = x.ptr();
  return make_result<T>(x.shape(), std::move(out), {px}, [px, denom = std::move(denom), d, rows, eps](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * d;
      const T* g = o.grad.data() + r * d;
      if (denom[r] > eps) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[j] - y[j] * dot) / denom[r];
      } else {
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] / eps;
      }
    }
  });
}

// ------------------------------------------------------------------- spatial

namespace detail {

struct Lerp1d {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel-center source coordinates (align_corners = false).
inline Lerp1d lerp_table(std::size_t in, std::size_t out) {
  Lerp1d t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    t.i0[o] = i0;
    t.i1[o] = std::min(i0 + 1, in - 1);
    t.w1[o] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace detail

template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw DimensionError("bilinear_upsample: expected [b,c,h,w], got " + shape_str(x.shape()));
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_upsample: zero target extent");
  if (out_h < h || out_w < w) throw DimensionError("bilinear_upsample: target smaller than source");
  const auto ty = detail::lerp_table(h, out_h);
  const auto tx = detail::lerp_table(w, out_w);
  std::vector<T> out(bc * out_h * out_w);
  const T* xv = x.values().data();
  for (std::size_t p = 0; p < bc; ++p) {
    const T* src = xv + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy = static_cast<T>(ty.w1[oy]);
      const T* r0 = src + ty.i0[oy] * w;
      const T* r1 = src + ty.i1[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx = static_cast<T>(tx.w1[ox]);
        const T top = r0[tx.i0[ox]] * (T(1) - wx) + r0[tx.i1[ox]] * wx;
        const T bot = r1[tx.i0[ox]] * (T(1) - wx) + r1[tx.i1[ox]] * wx;
        dst[oy * out_w + ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  auto px = x.ptr();
  Shape os{x.dim(0), x.dim(1), out_h, out_w};
  return make_result<T>(std::move(os), std::move(out), {px}, [px, ty, tx, bc, h, w, out_h, out_w](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t p = 0; p < bc; ++p) {
      T* gsrc = gx + p * h * w;
      const T* g = o.grad.data() + p * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T wy = static_cast<T>(ty.w1[oy]);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const T wx = static_cast<T>(tx.w1[ox]);
          const T gv = g[oy * out_w + ox];
          gsrc[ty.i0[oy] * w + tx.i0[ox]] += gv * (T(1) - wy) * (T(1) - wx);
          gsrc[ty.i0[oy] * w + tx.i1[ox]] += gv * (T(1) - wy) * wx;
          gsrc[ty.i1[oy] * w + tx.i0[ox]] += gv * wy * (T(1) - wx);
          gsrc[ty.i1[oy] * w + tx.i1[ox]] += gv * wy * wx;
        }
      }
    }
  });
}

template <class T>
Tensor<T> nearest_upsample2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("nearest_upsample2x: expected [b,c,h,w], got " + shape_str(x.shape()));
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(bc * 4 * h * w);
  const T* xv = x.values().data();
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
  auto px = x.ptr();
  return make_result<T>({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {px}, [px, bc, h, w](Node<T>& o) {
    T* gx = px->grad_buffer();
    for (std::size_t p = 0; p < bc; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          gx[(p * h + y / 2) * w + xx / 2] += o.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

// 3x3 convolution, stride 1, zero padding 1. x [B,Cin,H,W], weight
// [Cout, Cin*9], bias [Cout]; lowered to one GEMM per image via im2col.
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  using detail::CMatMap;
  using detail::MatMap;
  if (x.rank() != 4) throw DimensionError("conv3x3: expected [b,c,h,w], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (weight.rank() != 2 || weight.dim(1) != cin * 9 || bias.numel() != weight.dim(0)) {
    throw DimensionError("conv3x3: weight " + shape_str(weight.shape()) + " does not fit input " +
                         shape_str(x.shape()));
  }
  const std::size_t cout = weight.dim(0), hw = h * w, kk = cin * 9;
  auto cols = std::make_shared<std::vector<T>>(b * kk * hw, T(0));
  const T* xv = x.values().data();
  for (std::size_t n = 0; n < b; ++n) {
    T* col = cols->data() + n * kk * hw;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* row = col + ((c * 3 + ky) * 3 + kx) * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              row[y * w + xx] = xv[((n * cin + c) * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
            }
          }
        }
  }
  std::vector<T> out(b * cout * hw);
  for (std::size_t n = 0; n < b; ++n) {
    T* o = out.data() + n * cout * hw;
    detail::gemm(weight.values().data(), false, cols->data() + n * kk * hw, false, o, cout, kk, hw, false);
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t j = 0; j < hw; ++j) o[c * hw + j] += bias.values()[c];
  }
  auto px = x.ptr();
  auto pw = weight.ptr();
  auto pb = bias.ptr();
  return make_result<T>({b, cout, h, w}, std::move(out), {px, pw, pb},
                        [px, pw, pb, cols, b, cin, cout, h, w, hw, kk](Node<T>& o) {
                          T* gx = detail::grad_of(px);
                          T* gw = detail::grad_of(pw);
                          T* gb = detail::grad_of(pb);
                          std::vector<T> dcol(gx ? kk * hw : 0);
                          for (std::size_t n = 0; n < b; ++n) {
                            const T* G = o.grad.data() + n * cout * hw;
                            if (gw) detail::gemm(G, false, cols->data() + n * kk * hw, true, gw, cout, hw, kk, true);
                            if (gb)
                              for (std::size_t c = 0; c < cout; ++c)
                                for (std::size_t j = 0; j < hw; ++j) gb[c] += G[c * hw + j];
                            if (!gx) continue;
                            detail::gemm(pw->value.data(), true, G, false, dcol.data(), kk, cout, hw, false);
                            for (std::size_t c = 0; c < cin; ++c)
                              for (std::size_t ky = 0; ky < 3; ++ky)
                                for (std::size_t kx = 0; kx < 3; ++kx) {
                                  const T* row = dcol.data() + ((c * 3 + ky) * 3 + kx) * hw;
                                  for (std::size_t y = 0; y < h; ++y) {
                                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t xx = 0; xx < w; ++xx) {
                                      const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                                      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                                      gx[((n * cin + c) * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += row[y * w + xx];
                                    }
                                  }
                                }
                          }
                        });
}

// ------------------------------------------------------------------ sampling

// Constant tensor of independent N(0,1) draws.
template <class T>
Tensor<T> randn(const Shape& shape, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  rng.fill_normal(std::span<T>(v));
  return Tensor<T>::from(shape, std::move(v));
}

}  // namespace pvlseg::ops
