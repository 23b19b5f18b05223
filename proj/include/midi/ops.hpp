/*
 * Copyright 2026 The midi-tune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "midi/tape.hpp"

namespace midi {

namespace detail {

template <Scalar T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m×n] (+)= op(A)·op(B), where op(A) is m×k and op(B) is k×n. A is stored
/// k×m when ta is set, B is stored n×k when tb is set.
///
/// Computed row by row as axpy updates, so every output is the k-ordered sum
/// of its own products: a row's result does not depend on how many rows share
/// the call, and zero-weight terms (masked keys) leave it bit for bit intact.
template <Scalar T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c, bool accumulate) {
  using Idx = Eigen::Index;
  Eigen::Map<RowMat<T>> C(c, Idx(m), Idx(n));
  RowMat<T> bt;
  if (tb) bt = Eigen::Map<const RowMat<T>>(b, Idx(n), Idx(k)).transpose();
  Eigen::Map<const RowMat<T>> B(tb ? bt.data() : b, Idx(k), Idx(n));
  if (!accumulate) C.setZero();
  for (std::size_t i = 0; i < m; ++i) {
    auto row = C.row(Idx(i));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta ? a[p * m + i] : a[i * k + p];
      row.noalias() += av * B.row(Idx(p));
    }
  }
}

template <Scalar T>
void accumulate(Array<T>& dst, const Array<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

template <Scalar T>
void require_finite(const Array<T>& x, const char* op) {
  for (T v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

/// Plain 2-D matrix product. dA = dC·Bᵀ, dB = Aᵀ·dC.
template <Scalar T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(av.shape()) + " by " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array<T> out({m, n});
  detail::gemm(false, false, m, n, k, av.ptr(), bv.ptr(), out.ptr(), false);
  return a.tape().emit(std::move(out), {a, b}, [a, b, m, n, k](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    if (t.requires_grad(a)) detail::gemm(false, true, m, k, n, g.ptr(), b.value().ptr(), t.grad(a).ptr(), true);
    if (t.requires_grad(b)) detail::gemm(true, false, k, n, m, a.value().ptr(), g.ptr(), t.grad(b).ptr(), true);
  });
}

/// y = x·Wᵀ over the last axis of x; W is [out × in].
template <Scalar T>
Var<T> linear(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.shape().back() != wv.dim(1)) {
    throw DimensionError("linear: input " + shape_string(xv.shape()) + " does not conform to weight " +
                         shape_string(wv.shape()));
  }
  const std::size_t k = wv.dim(1), n = wv.dim(0), rows = xv.size() / k;
  Shape os = xv.shape();
  os.back() = n;
  Array<T> out(os);
  detail::gemm(false, true, rows, n, k, xv.ptr(), wv.ptr(), out.ptr(), false);
  return x.tape().emit(std::move(out), {x, w}, [x, w, rows, n, k](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    if (t.requires_grad(x)) detail::gemm(false, false, rows, k, n, g.ptr(), w.value().ptr(), t.grad(x).ptr(), true);
    if (t.requires_grad(w)) detail::gemm(true, false, n, k, rows, g.ptr(), x.value().ptr(), t.grad(w).ptr(), true);
  });
}

/// Batched product over identical leading axes: C = op(A)·op(B) on the last
/// two axes, with op a transpose when the matching flag is set.
template <Scalar T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t r = av.rank();
  if (r < 2 || bv.rank() != r ||
      !std::equal(av.shape().begin(), av.shape().end() - 2, bv.shape().begin())) {
    throw DimensionError("bmm: batch axes differ " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = trans_a ? av.dim(r - 1) : av.dim(r - 2);
  const std::size_t k = trans_a ? av.dim(r - 2) : av.dim(r - 1);
  const std::size_t kb = trans_b ? bv.dim(r - 1) : bv.dim(r - 2);
  const std::size_t n = trans_b ? bv.dim(r - 2) : bv.dim(r - 1);
  if (k != kb) {
    throw DimensionError("bmm: inner extents differ " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t batch = av.size() / (m * k);
  Shape os(av.shape().begin(), av.shape().end() - 2);
  os.push_back(m);
  os.push_back(n);
  Array<T> out(os);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(trans_a, trans_b, m, n, k, av.ptr() + i * m * k, bv.ptr() + i * k * n,
                 out.ptr() + i * m * n, false);
  }
  return a.tape().emit(std::move(out), {a, b}, [=](Tape<T>& t, Var<T> y) {
    const T* g = t.grad(y).ptr();
    const T* ap = a.value().ptr();
    const T* bp = b.value().ptr();
    if (t.requires_grad(a)) {
      T* ga = t.grad(a).ptr();
      for (std::size_t i = 0; i < batch; ++i) {
        if (!trans_a) {
          detail::gemm(false, !trans_b, m, k, n, g + i * m * n, bp + i * k * n, ga + i * m * k, true);
        } else {
          detail::gemm(trans_b, true, k, m, n, bp + i * k * n, g + i * m * n, ga + i * m * k, true);
        }
      }
    }
    if (t.requires_grad(b)) {
      T* gb = t.grad(b).ptr();
      for (std::size_t i = 0; i < batch; ++i) {
        if (!trans_b) {
          detail::gemm(!trans_a, false, k, n, m, ap + i * m * k, g + i * m * n, gb + i * k * n, true);
        } else {
          detail::gemm(true, trans_a, n, k, m, g + i * m * n, ap + i * m * k, gb + i * k * n, true);
        }
      }
    }
  });
}

template <Scalar T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Array<T> out = a.value();
  detail::accumulate(out, b.value());
  return a.tape().emit(std::move(out), {a, b}, [a, b](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    if (t.requires_grad(a)) detail::accumulate(t.grad(a), g);
    if (t.requires_grad(b)) detail::accumulate(t.grad(b), g);
  });
}

/// Elementwise product.
template <Scalar T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Array<T> out = a.value();
  const T* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  return a.tape().emit(std::move(out), {a, b}, [a, b](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    const std::size_t n = g.size();
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      const auto& bv = b.value();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      const auto& av = a.value();
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <Scalar T>
Var<T> scale(Var<T> a, T c) {
  Array<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.tape().emit(std::move(out), {a}, [a, c](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

/// Sum of all elements as a rank-0 array.
template <Scalar T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  return a.tape().emit(Array<T>::scalar(s), {a}, [a](Tape<T>& t, Var<T> y) {
    const T g = t.grad(y)[0];
    for (auto& v : t.grad(a).data()) v += g;
  });
}

/// Max-subtracted softmax along one axis.
template <Scalar T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(xv.shape()));
  }
  detail::require_finite(xv, "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t n = xv.dim(axis);
  Array<T> out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z{0};
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return x.tape().emit(std::move(out), {x}, [x, outer, inner, n](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    const auto& yv = y.value();
    auto& gx = t.grad(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * yv[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          gx[i] += yv[i] * (g[i] - dot);
        }
      }
    }
  });
}

/// Softmax over the last axis of scores [B, H, S, L] restricted to the slots
/// allowed by a [B, S, L] 0/1 mask shared across heads. Disallowed slots get
/// probability exactly 0; a row with no allowed slot is inert (all zeros).
template <Scalar T>
Var<T> masked_softmax(Var<T> scores, std::shared_ptr<const std::vector<std::uint8_t>> allow) {
  const auto& sv = scores.value();
  if (sv.rank() != 4 || allow->size() != sv.dim(0) * sv.dim(2) * sv.dim(3)) {
    throw DimensionError("masked_softmax: mask does not conform to scores " + shape_string(sv.shape()));
  }
  const std::size_t B = sv.dim(0), H = sv.dim(1), S = sv.dim(2), L = sv.dim(3);
  Array<T> out(sv.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t s = 0; s < S; ++s) {
        const T* row = sv.ptr() + ((b * H + h) * S + s) * L;
        const std::uint8_t* m = allow->data() + (b * S + s) * L;
        T* o = out.ptr() + ((b * H + h) * S + s) * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (!m[j]) continue;
          if (!std::isfinite(row[j])) throw NumericError("masked_softmax: non-finite input");
          mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T z{0};
        for (std::size_t j = 0; j < L; ++j) {
          if (!m[j]) continue;
          o[j] = std::exp(row[j] - mx);
          z += o[j];
        }
        for (std::size_t j = 0; j < L; ++j) o[j] /= z;
      }
    }
  }
  const std::size_t rows = B * H * S;
  return scores.tape().emit(std::move(out), {scores}, [scores, rows, L](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    const auto& yv = y.value();
    auto& gx = t.grad(scores);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * L;
      T dot{0};
      for (std::size_t j = 0; j < L; ++j) dot += g[base + j] * yv[base + j];
      for (std::size_t j = 0; j < L; ++j) gx[base + j] += yv[base + j] * (g[base + j] - dot);
    }
  });
}

/// Root-mean-square normalisation over the last axis with a learned gain.
template <Scalar T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps) {
  const auto& xv = x.value();
  const std::size_t d = gain.value().size();
  if (xv.shape().back() != d) {
    throw DimensionError("rms_norm: input " + shape_string(xv.shape()) + " vs gain " +
                         shape_string(gain.shape()));
  }
  const std::size_t rows = xv.size() / d;
  Array<T> out(xv.shape());
  auto inv = std::make_shared<std::vector<T>>(rows);
  const auto& gv = gain.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * d;
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T ir = T{1} / std::sqrt(ss / T(d) + eps);
    (*inv)[r] = ir;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * ir * gv[j];
  }
  return x.tape().emit(std::move(out), {x, gain}, [x, gain, rows, d, inv](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const bool need_x = t.requires_grad(x), need_g = t.requires_grad(gain);
    for (std::size_t r = 0; r < rows; ++r) {
      const T ir = (*inv)[r];
      const T* xr = xv.ptr() + r * d;
      const T* gr = g.ptr() + r * d;
      if (need_x) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
        T* dx = t.grad(x).ptr() + r * d;
        const T c = ir * ir * ir * dot / T(d);
        for (std::size_t j = 0; j < d; ++j) dx[j] += ir * gv[j] * gr[j] - c * xr[j];
      }
      if (need_g) {
        auto& dg = t.grad(gain);
        for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xr[j] * ir;
      }
    }
  });
}

/// x·sigmoid(x).
template <Scalar T>
Var<T> silu(Var<T> x) {
  const auto& xv = x.value();
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (T{1} + std::exp(-xv[i]));
  return x.tape().emit(std::move(out), {x}, [x](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    const auto& xv = x.value();
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-xv[i]));
      gx[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
    }
  });
}

/// Row gather: out[..., :] = table[ids[...], :]. `lead` is the shape of ids.
template <Scalar T>
Var<T> embedding(Var<T> table, std::span<const int> ids, const Shape& lead) {
  const auto& tv = table.value();
  if (tv.rank() != 2 || shape_size(lead) != ids.size()) {
    throw DimensionError("embedding: ids do not conform to " + shape_string(lead));
  }
  const std::size_t V = tv.dim(0), D = tv.dim(1);
  Shape os = lead;
  os.push_back(D);
  Array<T> out(os);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= V) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(V));
    }
    std::copy_n(tv.ptr() + std::size_t(ids[i]) * D, D, out.ptr() + i * D);
  }
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return table.tape().emit(std::move(out), {table}, [table, idv, D](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    auto& gt = t.grad(table);
    for (std::size_t i = 0; i < idv->size(); ++i) {
      T* row = gt.ptr() + std::size_t((*idv)[i]) * D;
      for (std::size_t j = 0; j < D; ++j) row[j] += g[i * D + j];
    }
  });
}

/// Joins two arrays along `axis`; all other extents must agree.
template <Scalar T>
Var<T> concat(Var<T> a, Var<T> b, std::size_t axis) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != bv.rank() || axis >= av.rank()) {
    throw DimensionError("concat: cannot join " + shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  }
  for (std::size_t i = 0; i < av.rank(); ++i) {
    if (i != axis && av.dim(i) != bv.dim(i)) {
      throw DimensionError("concat: cannot join " + shape_string(av.shape()) + " and " +
                           shape_string(bv.shape()));
    }
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= av.dim(i);
  for (std::size_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
  const std::size_t ab = av.dim(axis) * inner, bb = bv.dim(axis) * inner;
  Shape os = av.shape();
  os[axis] += bv.dim(axis);
  Array<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.ptr() + o * ab, ab, out.ptr() + o * (ab + bb));
    std::copy_n(bv.ptr() + o * bb, bb, out.ptr() + o * (ab + bb) + ab);
  }
  return a.tape().emit(std::move(out), {a, b}, [a, b, outer, ab, bb](Tape<T>& t, Var<T> y) {
    const auto& g = t.grad(y);
    const bool na = t.requires_grad(a), nb = t.requires_grad(b);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = g.ptr() + o * (ab + bb);
      if (na) {
        T* d = t.grad(a).ptr() + o * ab;
        for (std::size_t i = 0; i < ab; ++i) d[i] += src[i];
      }
      if (nb) {
        T* d = t.grad(b).ptr() + o * bb;
        for (std::size_t i = 0; i < bb; ++i) d[i] += src[ab + i];
      }
    }
  });
}

namespace detail {

/// Copies x into its axis permutation; out axis i is input axis perm[i].
/// With `add` set the result is accumulated into dst instead.
template <Scalar T>
void permute_into(const T* src, const Shape& in_shape, const std::vector<std::size_t>& perm, T* dst,
                  bool inverse_accumulate) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  std::vector<std::size_t> idx(r, 0);
  const std::size_t n = shape_size(in_shape);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    if (inverse_accumulate) {
      dst[off] += src[o];
    } else {
      dst[o] = src[off];
    }
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

/// Axis permutation: output axis i is input axis perm[i].
template <Scalar T>
Var<T> permute(Var<T> x, std::vector<std::size_t> perm) {
  const auto& xv = x.value();
  if (perm.size() != xv.rank()) throw DimensionError("permute: rank mismatch for " + shape_string(xv.shape()));
  Shape os(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) os[i] = xv.dim(perm.at(i));
  Array<T> out(os);
  detail::permute_into(xv.ptr(), xv.shape(), perm, out.ptr(), false);
  return x.tape().emit(std::move(out), {x}, [x, perm](Tape<T>& t, Var<T> y) {
    detail::permute_into(t.grad(y).ptr(), x.value().shape(), perm, t.grad(x).ptr(), true);
  });
}

template <Scalar T>
Var<T> reshape(Var<T> x, Shape s) {
  Array<T> out = x.value().reshaped(std::move(s));
  return x.tape().emit(std::move(out), {x}, [x](Tape<T>& t, Var<T> y) {
    detail::accumulate(t.grad(x), t.grad(y).reshaped(x.value().shape()));
  });
}

/// Summed negative log-likelihood of targets under softmax(logits) over the
/// last axis, counting only positions with mask 1. Masked-out targets are
/// ignored entirely and may hold any value.
template <Scalar T>
Var<T> nll_sum(Var<T> logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  const auto& lv = logits.value();
  const std::size_t V = lv.shape().back();
  const std::size_t n = lv.size() / V;
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  }
  auto probs = std::make_shared<std::vector<T>>();
  auto rows = std::make_shared<std::vector<std::pair<std::size_t, int>>>();
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || std::size_t(targets[i]) >= V) {
      throw IndexError("cross_entropy: target id " + std::to_string(targets[i]) + " outside [0, " +
                       std::to_string(V) + ")");
    }
    const T* row = lv.ptr() + i * V;
    T mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z{0};
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    const T lz = std::log(z);
    total += lz - (row[targets[i]] - mx);
    const std::size_t off = probs->size();
    probs->resize(off + V);
    for (std::size_t j = 0; j < V; ++j) (*probs)[off + j] = std::exp(row[j] - mx - lz);
    rows->emplace_back(i, targets[i]);
  }
  return logits.tape().emit(Array<T>::scalar(total), {logits}, [logits, probs, rows, V](Tape<T>& t, Var<T> y) {
    const T g = t.grad(y)[0];
    auto& gl = t.grad(logits);
    for (std::size_t r = 0; r < rows->size(); ++r) {
      const auto [i, tgt] = (*rows)[r];
      T* d = gl.ptr() + i * V;
      const T* p = probs->data() + r * V;
      for (std::size_t j = 0; j < V; ++j) d[j] += g * p[j];
      d[tgt] -= g;
    }
  });
}

template <Scalar T>
struct CrossEntropy {
  Var<T> loss;
  std::size_t count = 0;
  bool empty = true;
};

/// Mean NLL over masked-in positions; zero with `empty` set when the mask
/// selects nothing.
template <Scalar T>
CrossEntropy<T> cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  Var<T> s = nll_sum(logits, targets, mask);
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) return {logits.tape().constant(Array<T>::scalar(T{0})), 0, true};
  return {scale(s, T{1} / T(count)), count, false};
}

}  // namespace midi
