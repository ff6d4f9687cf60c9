#pragma once

// Differentiable operations over gfm::Tensor. Every op validates shapes,
// computes its forward value eagerly, and (when recording) registers a
// backward closure that accumulates into the inputs' gradients.

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "gfm/box.hpp"
#include "gfm/tensor.hpp"

namespace gfm {

namespace detail {

using I64 = std::int64_t;

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(I64 M, I64 N, I64 K, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
  for (I64 i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (I64 k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (I64 j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A^T * B, A stored [K,M]
template <class T>
void gemm_tn(I64 M, I64 N, I64 K, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
  for (I64 k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (I64 i = 0; i < M; ++i) {
      const T av = a[i];
      T* c = C + i * N;
      for (I64 j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A * B^T, B stored [N,K]
template <class T>
void gemm_nt(I64 M, I64 N, I64 K, const T* A, const T* B, T* C) {
  std::vector<T> bt(static_cast<std::size_t>(K * N));
  for (I64 n = 0; n < N; ++n)
    for (I64 k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
  gemm_nn(M, N, K, A, bt.data(), C);
}

template <class T>
void accumulate(TensorImpl<T>& dst, const std::vector<T>& src) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
}

inline void require_rank(const Shape& s, std::size_t r, const char* op, const char* what) {
  if (s.size() != r)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(r) +
                         ", got " + shape_str(s));
}

// Geometry for 3D (de)convolution lowering. 2D convolutions use T = kt = 1.
struct ConvGeom {
  I64 C, T, H, W;
  I64 kt, kh, kw;
  I64 st, sh, sw;
  I64 pt, ph, pw;
  I64 To, Ho, Wo;

  I64 rows() const { return C * kt * kh * kw; }
  I64 cols() const { return To * Ho * Wo; }
  bool trivial() const {
    return kt == 1 && kh == 1 && kw == 1 && st == 1 && sh == 1 && sw == 1 && pt == 0 &&
           ph == 0 && pw == 0;
  }
};

inline ConvGeom make_geom(I64 C, I64 T, I64 H, I64 W, I64 kt, I64 kh, I64 kw, I64 st, I64 sh,
                          I64 sw, I64 pt, I64 ph, I64 pw, const char* op) {
  ConvGeom g{C, T, H, W, kt, kh, kw, st, sh, sw, pt, ph, pw, 0, 0, 0};
  if (st <= 0 || sh <= 0 || sw <= 0) throw ConfigError(std::string(op) + ": stride must be positive");
  g.To = (T + 2 * pt - kt) / st + 1;
  g.Ho = (H + 2 * ph - kh) / sh + 1;
  g.Wo = (W + 2 * pw - kw) / sw + 1;
  if (T + 2 * pt < kt || H + 2 * ph < kh || W + 2 * pw < kw || g.To <= 0 || g.Ho <= 0 || g.Wo <= 0)
    throw DimensionError(std::string(op) + ": kernel larger than padded input");
  return g;
}

template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const I64 P = g.cols();
  for (I64 c = 0; c < g.C; ++c)
    for (I64 a = 0; a < g.kt; ++a)
      for (I64 b = 0; b < g.kh; ++b)
        for (I64 d = 0; d < g.kw; ++d) {
          T* row = col + (((c * g.kt + a) * g.kh + b) * g.kw + d) * P;
          for (I64 to = 0; to < g.To; ++to) {
            const I64 ti = to * g.st - g.pt + a;
            for (I64 ho = 0; ho < g.Ho; ++ho) {
              const I64 hi = ho * g.sh - g.ph + b;
              T* out = row + (to * g.Ho + ho) * g.Wo;
              if (ti < 0 || ti >= g.T || hi < 0 || hi >= g.H) {
                std::fill(out, out + g.Wo, T(0));
                continue;
              }
              const T* src = x + ((c * g.T + ti) * g.H + hi) * g.W;
              for (I64 wo = 0; wo < g.Wo; ++wo) {
                const I64 wi = wo * g.sw - g.pw + d;
                out[wo] = (wi >= 0 && wi < g.W) ? src[wi] : T(0);
              }
            }
          }
        }
}

template <class T>
void col2im(const ConvGeom& g, const T* col, T* x) {
  const I64 P = g.cols();
  for (I64 c = 0; c < g.C; ++c)
    for (I64 a = 0; a < g.kt; ++a)
      for (I64 b = 0; b < g.kh; ++b)
        for (I64 d = 0; d < g.kw; ++d) {
          const T* row = col + (((c * g.kt + a) * g.kh + b) * g.kw + d) * P;
          for (I64 to = 0; to < g.To; ++to) {
            const I64 ti = to * g.st - g.pt + a;
            if (ti < 0 || ti >= g.T) continue;
            for (I64 ho = 0; ho < g.Ho; ++ho) {
              const I64 hi = ho * g.sh - g.ph + b;
              if (hi < 0 || hi >= g.H) continue;
              const T* in = row + (to * g.Ho + ho) * g.Wo;
              T* dst = x + ((c * g.T + ti) * g.H + hi) * g.W;
              for (I64 wo = 0; wo < g.Wo; ++wo) {
                const I64 wi = wo * g.sw - g.pw + d;
                if (wi >= 0 && wi < g.W) dst[wi] += in[wo];
              }
            }
          }
        }
}

// Shared convolution kernel: x viewed as [C,T,H,W], weight [D, C*kt*kh*kw].
template <class T>
Tensor<T> conv_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeom& g,
                    I64 D, Shape out_shape, const char* op) {
  const I64 K = g.rows(), P = g.cols();
  auto col = std::make_shared<std::vector<T>>();
  const T* colp;
  if (g.trivial()) {
    colp = x.data().data();
  } else {
    col->resize(static_cast<std::size_t>(K * P));
    im2col(g, x.data().data(), col->data());
    colp = col->data();
  }
  std::vector<T> out(static_cast<std::size_t>(D * P), T(0));
  if (b.defined())
    for (I64 d = 0; d < D; ++d) std::fill_n(out.data() + d * P, P, b.data()[d]);
  gemm_nn(D, P, K, w.data().data(), colp, out.data());

  auto xi = x.impl(), wi = w.impl();
  auto bi = b.defined() ? b.impl() : nullptr;
  std::vector<ImplPtr<T>> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return record<T>(std::move(out_shape), std::move(out), op, std::move(inputs),
                   [=](const TensorImpl<T>& o) {
                     const T* gy = o.grad.data();
                     const T* cp = g.trivial() ? xi->data.data() : col->data();
                     if (bi && bi->requires_grad) {
                       bi->ensure_grad();
                       for (I64 d = 0; d < D; ++d) {
                         Acc<T> s = 0;
                         for (I64 p = 0; p < P; ++p) s += gy[d * P + p];
                         bi->grad[d] += static_cast<T>(s);
                       }
                     }
                     if (wi->requires_grad) {
                       wi->ensure_grad();
                       gemm_nt(D, K, P, gy, cp, wi->grad.data());
                     }
                     if (xi->requires_grad) {
                       xi->ensure_grad();
                       if (g.trivial()) {
                         gemm_tn(K, P, D, wi->data.data(), gy, xi->grad.data());
                       } else {
                         std::vector<T> dcol(static_cast<std::size_t>(K * P), T(0));
                         gemm_tn(K, P, D, wi->data.data(), gy, dcol.data());
                         col2im(g, dcol.data(), xi->grad.data());
                       }
                     }
                   });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::record<T>(a.shape(), std::move(out), "add", {ai, bi},
                           [ai, bi](const detail::TensorImpl<T>& o) {
                             if (ai->requires_grad) detail::accumulate(*ai, o.grad);
                             if (bi->requires_grad) detail::accumulate(*bi, o.grad);
                           });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::record<T>(a.shape(), std::move(out), "sub", {ai, bi},
                           [ai, bi](const detail::TensorImpl<T>& o) {
                             if (ai->requires_grad) detail::accumulate(*ai, o.grad);
                             if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 bi->grad[i] -= o.grad[i];
                             }
                           });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::record<T>(a.shape(), std::move(out), "mul", {ai, bi},
                           [ai, bi](const detail::TensorImpl<T>& o) {
                             const std::size_t n = o.grad.size();
                             if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i)
                                 ai->grad[i] += o.grad[i] * bi->data[i];
                             }
                             if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i)
                                 bi->grad[i] += o.grad[i] * ai->data[i];
                             }
                           });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto ai = a.impl();
  return detail::record<T>(a.shape(), std::move(out), "scale", {ai},
                           [ai, s](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               ai->grad[i] += o.grad[i] * s;
                           });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  auto ai = a.impl();
  return detail::record<T>(a.shape(), std::move(out), "relu", {ai},
                           [ai](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               if (ai->data[i] > T(0)) ai->grad[i] += o.grad[i];
                           });
}

// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  auto ai = a.impl();
  return detail::record<T>(
      a.shape(), std::move(out), "gelu", {ai}, [ai](const detail::TensorImpl<T>& o) {
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          const T x = ai->data[i];
          const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
          ai->grad[i] += o.grad[i] * (cdf + x * pdf);
        }
      });
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(a.data()[i]);
  auto ai = a.impl();
  return detail::record<T>(a.shape(), std::move(out), "sigmoid", {ai},
                           [ai](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i) {
                               const T y = o.data[i];
                               ai->grad[i] += o.grad[i] * y * (T(1) - y);
                             }
                           });
}

// ------------------------------------------------------------------ reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Acc<T> s = 0;
  for (T v : a.data()) s += v;
  auto ai = a.impl();
  return detail::record<T>({1}, {static_cast<T>(s)}, "sum", {ai},
                           [ai](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (auto& g : ai->grad) g += o.grad[0];
                           });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  Acc<T> s = 0;
  for (T v : a.data()) s += v;
  const T n = static_cast<T>(a.numel());
  auto ai = a.impl();
  return detail::record<T>({1}, {static_cast<T>(s / n)}, "mean", {ai},
                           [ai, n](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             const T g = o.grad[0] / n;
                             for (auto& x : ai->grad) x += g;
                           });
}

// Sum of a list of scalars (loss terms).
template <class T>
Tensor<T> add_all(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// --------------------------------------------------------------- matrix ops

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(M * N), T(0));
  detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  auto ai = a.impl(), bi = b.impl();
  return detail::record<T>({M, N}, std::move(out), "matmul", {ai, bi},
                           [=](const detail::TensorImpl<T>& o) {
                             if (ai->requires_grad) {
                               ai->ensure_grad();
                               detail::gemm_nt(M, K, N, o.grad.data(), bi->data.data(),
                                               ai->grad.data());
                             }
                             if (bi->requires_grad) {
                               bi->ensure_grad();
                               detail::gemm_tn(K, N, M, ai->data.data(), o.grad.data(),
                                               bi->grad.data());
                             }
                           });
}

// x[M,in] * W[in,out] + b[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
  const auto M = x.dim(0), K = x.dim(1), N = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != N))
    throw DimensionError("linear: bias shape " + shape_str(b.shape()) + " for " +
                         std::to_string(N) + " outputs");
  std::vector<T> out(static_cast<std::size_t>(M * N), T(0));
  if (b.defined())
    for (std::int64_t i = 0; i < M; ++i) std::copy_n(b.data().data(), N, out.data() + i * N);
  detail::gemm_nn(M, N, K, x.data().data(), w.data().data(), out.data());
  auto xi = x.impl(), wi = w.impl();
  auto bi = b.defined() ? b.impl() : nullptr;
  std::vector<detail::ImplPtr<T>> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return detail::record<T>({M, N}, std::move(out), "linear", std::move(inputs),
                           [=](const detail::TensorImpl<T>& o) {
                             const T* g = o.grad.data();
                             if (xi->requires_grad) {
                               xi->ensure_grad();
                               detail::gemm_nt(M, K, N, g, wi->data.data(), xi->grad.data());
                             }
                             if (wi->requires_grad) {
                               wi->ensure_grad();
                               detail::gemm_tn(K, N, M, xi->data.data(), g, wi->grad.data());
                             }
                             if (bi && bi->requires_grad) {
                               bi->ensure_grad();
                               for (std::int64_t i = 0; i < M; ++i)
                                 for (std::int64_t j = 0; j < N; ++j) bi->grad[j] += g[i * N + j];
                             }
                           });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose", "input");
  const auto M = a.dim(0), N = a.dim(1);
  std::vector<T> out(a.numel());
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = 0; j < N; ++j) out[j * M + i] = a.data()[i * N + j];
  auto ai = a.impl();
  return detail::record<T>({N, M}, std::move(out), "transpose", {ai},
                           [=](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::int64_t i = 0; i < M; ++i)
                               for (std::int64_t j = 0; j < N; ++j)
                                 ai->grad[i * N + j] += o.grad[j * M + i];
                           });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != static_cast<std::int64_t>(a.numel()))
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  auto ai = a.impl();
  return detail::record<T>(std::move(shape), a.vec(), "reshape", {ai},
                           [ai](const detail::TensorImpl<T>& o) {
                             detail::accumulate(*ai, o.grad);
                           });
}

// Rows of a 2D tensor selected (and possibly repeated) by index.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::int64_t>& idx) {
  detail::require_rank(a.shape(), 2, "gather_rows", "input");
  const auto M = a.dim(0), N = a.dim(1);
  const auto R = static_cast<std::int64_t>(idx.size());
  std::vector<T> out(static_cast<std::size_t>(R * N));
  for (std::int64_t r = 0; r < R; ++r) {
    if (idx[r] < 0 || idx[r] >= M)
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) + " out of range " +
                           std::to_string(M));
    std::copy_n(a.data().data() + idx[r] * N, N, out.data() + r * N);
  }
  auto ai = a.impl();
  return detail::record<T>({R, N}, std::move(out), "gather_rows", {ai},
                           [=](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::int64_t r = 0; r < R; ++r)
                               for (std::int64_t j = 0; j < N; ++j)
                                 ai->grad[idx[r] * N + j] += o.grad[r * N + j];
                           });
}

// Elements of a tensor (flattened) selected by index; result is 1D.
template <class T>
Tensor<T> gather(const Tensor<T>& a, const std::vector<std::int64_t>& idx) {
  const auto n = static_cast<std::int64_t>(a.numel());
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n)
      throw DimensionError("gather: index " + std::to_string(idx[i]) + " out of range " +
                           std::to_string(n));
    out[i] = a.data()[idx[i]];
  }
  auto ai = a.impl();
  return detail::record<T>({static_cast<std::int64_t>(idx.size())}, std::move(out), "gather",
                           {ai}, [=](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               ai->grad[idx[i]] += o.grad[i];
                           });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t start, std::int64_t len) {
  detail::require_rank(a.shape(), 2, "slice_rows", "input");
  if (start < 0 || len < 0 || start + len > a.dim(0))
    throw DimensionError("slice_rows: range out of bounds");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(len));
  std::iota(idx.begin(), idx.end(), start);
  return gather_rows(a, idx);
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t start, std::int64_t len) {
  detail::require_rank(a.shape(), 2, "slice_cols", "input");
  const auto M = a.dim(0), N = a.dim(1);
  if (start < 0 || len < 0 || start + len > N)
    throw DimensionError("slice_cols: range out of bounds");
  std::vector<T> out(static_cast<std::size_t>(M * len));
  for (std::int64_t i = 0; i < M; ++i)
    std::copy_n(a.data().data() + i * N + start, len, out.data() + i * len);
  auto ai = a.impl();
  return detail::record<T>({M, len}, std::move(out), "slice_cols", {ai},
                           [=](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::int64_t i = 0; i < M; ++i)
                               for (std::int64_t j = 0; j < len; ++j)
                                 ai->grad[i * N + start + j] += o.grad[i * len + j];
                           });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const auto N = parts[0].dim(1);
  std::int64_t M = 0;
  std::vector<detail::ImplPtr<T>> inputs;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_rows", "input");
    if (p.dim(1) != N) throw DimensionError("concat_rows: column mismatch");
    M += p.dim(0);
    inputs.push_back(p.impl());
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(M * N));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::record<T>({M, N}, std::move(out), "concat_rows", inputs,
                           [inputs](const detail::TensorImpl<T>& o) {
                             std::size_t off = 0;
                             for (const auto& in : inputs) {
                               if (in->requires_grad) {
                                 in->ensure_grad();
                                 for (std::size_t i = 0; i < in->data.size(); ++i)
                                   in->grad[i] += o.grad[off + i];
                               }
                               off += in->data.size();
                             }
                           });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const auto M = parts[0].dim(0);
  std::int64_t N = 0;
  std::vector<detail::ImplPtr<T>> inputs;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_cols", "input");
    if (p.dim(0) != M) throw DimensionError("concat_cols: row mismatch");
    widths.push_back(p.dim(1));
    N += p.dim(1);
    inputs.push_back(p.impl());
  }
  std::vector<T> out(static_cast<std::size_t>(M * N));
  std::int64_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::int64_t i = 0; i < M; ++i)
      std::copy_n(parts[k].data().data() + i * widths[k], widths[k], out.data() + i * N + off);
    off += widths[k];
  }
  return detail::record<T>({M, N}, std::move(out), "concat_cols", inputs,
                           [=](const detail::TensorImpl<T>& o) {
                             std::int64_t c0 = 0;
                             for (std::size_t k = 0; k < inputs.size(); ++k) {
                               auto& in = inputs[k];
                               if (in->requires_grad) {
                                 in->ensure_grad();
                                 for (std::int64_t i = 0; i < M; ++i)
                                   for (std::int64_t j = 0; j < widths[k]; ++j)
                                     in->grad[i * widths[k] + j] += o.grad[i * N + c0 + j];
                               }
                               c0 += widths[k];
                             }
                           });
}

// ------------------------------------------------------------ normalization

// Softmax over the last axis, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() == 0 || a.shape().back() == 0) throw DimensionError("softmax: empty axis");
  const auto n = a.shape().back();
  const auto rows = static_cast<std::int64_t>(a.numel()) / n;
  std::vector<T> out(a.numel());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * n;
    T* y = out.data() + r * n;
    T m = x[0];
    for (std::int64_t j = 1; j < n; ++j) m = std::max(m, x[j]);
    Acc<T> s = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (std::int64_t j = 0; j < n; ++j) y[j] = static_cast<T>(y[j] / s);
  }
  auto ai = a.impl();
  return detail::record<T>(a.shape(), std::move(out), "softmax", {ai},
                           [=](const detail::TensorImpl<T>& o) {
                             ai->ensure_grad();
                             for (std::int64_t r = 0; r < rows; ++r) {
                               const T* y = o.data.data() + r * n;
                               const T* g = o.grad.data() + r * n;
                               Acc<T> dot = 0;
                               for (std::int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
                               for (std::int64_t j = 0; j < n; ++j)
                                 ai->grad[r * n + j] += y[j] * (g[j] - static_cast<T>(dot));
                             }
                           });
}

namespace detail {

// Normalizes `groups` contiguous blocks of `x` (each of size `len`), then
// applies a per-channel affine; channel of element i in block b is
// channel_of(b, i). Shared by layer_norm and group_norm.
template <class T, class ChannelOf>
Tensor<T> normalize_blocks(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           std::int64_t blocks, std::int64_t len, T eps, ChannelOf channel_of,
                           const char* op) {
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(blocks));
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::int64_t b = 0; b < blocks; ++b) {
    Acc<T> m = 0;
    for (std::int64_t i = 0; i < len; ++i) m += xv[b * len + i];
    m /= static_cast<Acc<T>>(len);
    Acc<T> v = 0;
    for (std::int64_t i = 0; i < len; ++i) {
      const Acc<T> d = xv[b * len + i] - m;
      v += d * d;
    }
    v /= static_cast<Acc<T>>(len);
    const Acc<T> rs = 1.0 / std::sqrt(v + static_cast<Acc<T>>(eps));
    (*rstd)[b] = static_cast<T>(rs);
    for (std::int64_t i = 0; i < len; ++i) {
      const T xh = static_cast<T>((xv[b * len + i] - m) * rs);
      (*xhat)[b * len + i] = xh;
      const auto c = channel_of(b, i);
      out[b * len + i] = xh * gv[c] + bv[c];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return record<T>(x.shape(), std::move(out), op, {xi, gi, bi},
                   [=](const TensorImpl<T>& o) {
                     const T* g = o.grad.data();
                     if (gi->requires_grad) gi->ensure_grad();
                     if (bi->requires_grad) bi->ensure_grad();
                     if (xi->requires_grad) xi->ensure_grad();
                     for (std::int64_t b = 0; b < blocks; ++b) {
                       Acc<T> sum_dxh = 0, sum_dxh_xh = 0;
                       for (std::int64_t i = 0; i < len; ++i) {
                         const auto k = b * len + i;
                         const auto c = channel_of(b, i);
                         const T xh = (*xhat)[k];
                         if (gi->requires_grad) gi->grad[c] += g[k] * xh;
                         if (bi->requires_grad) bi->grad[c] += g[k];
                         const Acc<T> dxh = g[k] * gi->data[c];
                         sum_dxh += dxh;
                         sum_dxh_xh += dxh * xh;
                       }
                       if (!xi->requires_grad) continue;
                       const Acc<T> inv = 1.0 / static_cast<Acc<T>>(len);
                       const Acc<T> rs = (*rstd)[b];
                       for (std::int64_t i = 0; i < len; ++i) {
                         const auto k = b * len + i;
                         const auto c = channel_of(b, i);
                         const Acc<T> dxh = g[k] * gi->data[c];
                         xi->grad[k] += static_cast<T>(
                             rs * (dxh - sum_dxh * inv - (*xhat)[k] * sum_dxh_xh * inv));
                       }
                     }
                   });
}

}  // namespace detail

// Layer norm over the last axis with affine gamma/beta of that length.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const auto n = x.shape().back();
  if (gamma.numel() != static_cast<std::size_t>(n) || beta.numel() != static_cast<std::size_t>(n))
    throw DimensionError("layer_norm: affine size must equal last dim " + std::to_string(n));
  const auto rows = static_cast<std::int64_t>(x.numel()) / n;
  return detail::normalize_blocks(
      x, gamma, beta, rows, n, eps, [](std::int64_t, std::int64_t i) { return i; }, "layer_norm");
}

// Group norm over x[C, ...] with per-channel affine.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::int64_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 2) throw DimensionError("group_norm: input must be [C, ...]");
  const auto C = x.dim(0);
  if (groups <= 0 || C % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  if (gamma.numel() != static_cast<std::size_t>(C) || beta.numel() != static_cast<std::size_t>(C))
    throw DimensionError("group_norm: affine size must equal channel count");
  const auto spatial = static_cast<std::int64_t>(x.numel()) / C;
  const auto per_group = C / groups;
  const auto len = per_group * spatial;
  return detail::normalize_blocks(
      x, gamma, beta, groups, len, eps,
      [per_group, spatial](std::int64_t b, std::int64_t i) {
        return b * per_group + i / spatial;
      },
      "group_norm");
}

// ----------------------------------------------------------------------- losses

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same(pred.shape(), target.shape(), "mse_loss");
  if (pred.numel() == 0) throw DimensionError("mse_loss: empty input");
  Acc<T> s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const Acc<T> d = static_cast<Acc<T>>(pred.data()[i]) - target.data()[i];
    s += d * d;
  }
  const auto n = static_cast<T>(pred.numel());
  auto pi = pred.impl(), ti = target.impl();
  return detail::record<T>({1}, {static_cast<T>(s / n)}, "mse_loss", {pi, ti},
                           [=](const detail::TensorImpl<T>& o) {
                             const T k = T(2) * o.grad[0] / n;
                             if (pi->requires_grad) pi->ensure_grad();
                             if (ti->requires_grad) ti->ensure_grad();
                             for (std::size_t i = 0; i < pi->data.size(); ++i) {
                               const T d = (pi->data[i] - ti->data[i]) * k;
                               if (pi->requires_grad) pi->grad[i] += d;
                               if (ti->requires_grad) ti->grad[i] -= d;
                             }
                           });
}

// Mean over rows of -log softmax(logits)[label].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy", "logits");
  const auto M = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != M)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(M) + " rows");
  if (M == 0) throw DimensionError("cross_entropy: no rows");
  auto prob = std::make_shared<std::vector<T>>(logits.numel());
  Acc<T> loss = 0;
  for (std::int64_t r = 0; r < M; ++r) {
    if (labels[r] < 0 || labels[r] >= K)
      throw DimensionError("cross_entropy: label " + std::to_string(labels[r]) +
                           " out of range");
    const T* x = logits.data().data() + r * K;
    T m = x[0];
    for (std::int64_t j = 1; j < K; ++j) m = std::max(m, x[j]);
    Acc<T> s = 0;
    for (std::int64_t j = 0; j < K; ++j) s += std::exp(static_cast<Acc<T>>(x[j] - m));
    const Acc<T> lse = m + std::log(s);
    loss += lse - x[labels[r]];
    for (std::int64_t j = 0; j < K; ++j)
      (*prob)[r * K + j] = static_cast<T>(std::exp(static_cast<Acc<T>>(x[j]) - lse));
  }
  auto li = logits.impl();
  return detail::record<T>({1}, {static_cast<T>(loss / M)}, "cross_entropy", {li},
                           [=](const detail::TensorImpl<T>& o) {
                             li->ensure_grad();
                             const T k = o.grad[0] / static_cast<T>(M);
                             for (std::int64_t r = 0; r < M; ++r)
                               for (std::int64_t j = 0; j < K; ++j)
                                 li->grad[r * K + j] +=
                                     k * ((*prob)[r * K + j] - (j == labels[r] ? T(1) : T(0)));
                           });
}

// Mean binary cross-entropy on logits against targets in [0,1].
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  if (targets.size() != logits.numel())
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(logits.numel()) + " logits");
  if (targets.empty()) throw DimensionError("bce_with_logits: empty input");
  Acc<T> s = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Acc<T> x = logits.data()[i];
    s += std::max<Acc<T>>(x, 0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const auto n = static_cast<T>(targets.size());
  auto li = logits.impl();
  return detail::record<T>({1}, {static_cast<T>(s / n)}, "bce_with_logits", {li},
                           [=](const detail::TensorImpl<T>& o) {
                             li->ensure_grad();
                             const T k = o.grad[0] / n;
                             for (std::size_t i = 0; i < targets.size(); ++i)
                               li->grad[i] += k * (sigmoid_scalar(li->data[i]) - targets[i]);
                           });
}

// Summed smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta outside.
template <class T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const std::vector<T>& target, T beta = T(1)) {
  if (target.size() != pred.numel())
    throw DimensionError("smooth_l1: target size mismatch");
  Acc<T> s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const Acc<T> d = static_cast<Acc<T>>(pred.data()[i]) - target[i];
    const Acc<T> ad = std::abs(d);
    s += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  auto pi = pred.impl();
  return detail::record<T>({1}, {static_cast<T>(s)}, "smooth_l1", {pi},
                           [=](const detail::TensorImpl<T>& o) {
                             pi->ensure_grad();
                             for (std::size_t i = 0; i < target.size(); ++i) {
                               const T d = pi->data[i] - target[i];
                               const T g = std::abs(d) < beta ? d / beta
                                                              : (d > 0 ? T(1) : T(-1));
                               pi->grad[i] += o.grad[0] * g;
                             }
                           });
}

// ----------------------------------------------------------------- convolutions

struct Stride3 {
  std::int64_t t = 1, h = 1, w = 1;
};

// x[C,T,H,W] (*) kernel[D,C,kt,kh,kw] + bias[D]; padding applies to H and W.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Stride3 stride, std::int64_t pad_hw = 0) {
  detail::require_rank(x.shape(), 4, "conv3d", "input");
  detail::require_rank(kernel.shape(), 5, "conv3d", "kernel");
  if (kernel.dim(1) != x.dim(0))
    throw DimensionError("conv3d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " channels, input " + shape_str(x.shape()) + " has " +
                         std::to_string(x.dim(0)));
  const auto D = kernel.dim(0);
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(D))
    throw DimensionError("conv3d: bias size mismatch");
  const bool patch_mode = pad_hw == 0 && stride.t == kernel.dim(2) && stride.h == kernel.dim(3) &&
                          stride.w == kernel.dim(4);
  if (patch_mode && (x.dim(1) % stride.t || x.dim(2) % stride.h || x.dim(3) % stride.w))
    throw ConfigError("conv3d: input " + shape_str(x.shape()) + " not divisible into patches " +
                      shape_str({stride.t, stride.h, stride.w}));
  const auto g = detail::make_geom(x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(2),
                                   kernel.dim(3), kernel.dim(4), stride.t, stride.h, stride.w, 0,
                                   pad_hw, pad_hw, "conv3d");
  return detail::conv_impl(x, kernel, bias, g, D, {D, g.To, g.Ho, g.Wo}, "conv3d");
}

// x[C,H,W] (*) kernel[D,C,kh,kw] + bias[D]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
  detail::require_rank(x.shape(), 3, "conv2d", "input");
  detail::require_rank(kernel.shape(), 4, "conv2d", "kernel");
  if (kernel.dim(1) != x.dim(0))
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " channels, input " + shape_str(x.shape()) + " has " +
                         std::to_string(x.dim(0)));
  const auto D = kernel.dim(0);
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(D))
    throw DimensionError("conv2d: bias size mismatch");
  const auto g = detail::make_geom(x.dim(0), 1, x.dim(1), x.dim(2), 1, kernel.dim(2),
                                   kernel.dim(3), 1, stride, stride, 0, pad, pad, "conv2d");
  return detail::conv_impl(x, kernel, bias, g, D, {D, g.Ho, g.Wo}, "conv2d");
}

// Transposed 2D convolution: x[C,H,W], kernel[C,D,kh,kw] -> [D, (H-1)s-2p+kh, ...]
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                           std::int64_t stride = 2, std::int64_t pad = 0) {
  detail::require_rank(x.shape(), 3, "conv_transpose2d", "input");
  detail::require_rank(kernel.shape(), 4, "conv_transpose2d", "kernel");
  if (kernel.dim(0) != x.dim(0))
    throw DimensionError("conv_transpose2d: kernel expects " + std::to_string(kernel.dim(0)) +
                         " channels, got " + std::to_string(x.dim(0)));
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto D = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const auto Ho = (H - 1) * stride - 2 * pad + kh;
  const auto Wo = (W - 1) * stride - 2 * pad + kw;
  if (Ho <= 0 || Wo <= 0) throw DimensionError("conv_transpose2d: empty output");
  // Adjoint of a convolution from [D,Ho,Wo] down to [.,H,W].
  auto g = detail::make_geom(D, 1, Ho, Wo, 1, kh, kw, 1, stride, stride, 0, pad, pad,
                             "conv_transpose2d");
  if (g.Ho != H || g.Wo != W) throw DimensionError("conv_transpose2d: inconsistent geometry");
  const auto K = g.rows(), P = g.cols();
  std::vector<T> cols(static_cast<std::size_t>(K * P), T(0));
  detail::gemm_tn(K, P, C, kernel.data().data(), x.data().data(), cols.data());
  std::vector<T> out(static_cast<std::size_t>(D * Ho * Wo), T(0));
  detail::col2im(g, cols.data(), out.data());
  if (bias.defined()) {
    if (bias.numel() != static_cast<std::size_t>(D))
      throw DimensionError("conv_transpose2d: bias size mismatch");
    for (std::int64_t d = 0; d < D; ++d)
      for (std::int64_t i = 0; i < Ho * Wo; ++i) out[d * Ho * Wo + i] += bias.data()[d];
  }
  auto xi = x.impl(), wi = kernel.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<detail::ImplPtr<T>> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return detail::record<T>(
      {D, Ho, Wo}, std::move(out), "conv_transpose2d", std::move(inputs),
      [=](const detail::TensorImpl<T>& o) {
        std::vector<T> dcols(static_cast<std::size_t>(K * P));
        detail::im2col(g, o.grad.data(), dcols.data());
        if (xi->requires_grad) {
          xi->ensure_grad();
          detail::gemm_nn(C, P, K, wi->data.data(), dcols.data(), xi->grad.data());
        }
        if (wi->requires_grad) {
          wi->ensure_grad();
          detail::gemm_nt(C, K, P, xi->data.data(), dcols.data(), wi->grad.data());
        }
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          for (std::int64_t d = 0; d < D; ++d) {
            Acc<T> s = 0;
            for (std::int64_t i = 0; i < Ho * Wo; ++i) s += o.grad[d * Ho * Wo + i];
            bi->grad[d] += static_cast<T>(s);
          }
        }
      });
}

// Pads H and W of x[C,H,W] by repeating edge values.
template <class T>
Tensor<T> pad2d_replicate(const Tensor<T>& x, std::int64_t pad) {
  detail::require_rank(x.shape(), 3, "pad2d_replicate", "input");
  if (pad < 0) throw ConfigError("pad2d_replicate: negative padding");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto Ho = H + 2 * pad, Wo = W + 2 * pad;
  std::vector<std::int64_t> src(static_cast<std::size_t>(C * Ho * Wo));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j) {
        const auto si = std::clamp<std::int64_t>(i - pad, 0, H - 1);
        const auto sj = std::clamp<std::int64_t>(j - pad, 0, W - 1);
        src[(c * Ho + i) * Wo + j] = (c * H + si) * W + sj;
      }
  return reshape(gather(x, src), {C, Ho, Wo});
}

// ---------------------------------------------------------------------- pooling

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::int64_t k, std::int64_t s) {
  detail::require_rank(x.shape(), 3, "max_pool2d", "input");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (k <= 0 || s <= 0 || H < k || W < k) throw DimensionError("max_pool2d: window too large");
  const auto Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  std::vector<T> out(static_cast<std::size_t>(C * Ho * Wo));
  auto arg = std::make_shared<std::vector<std::int64_t>>(out.size());
  const T* xv = x.data().data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j) {
        std::int64_t best = (c * H + i * s) * W + j * s;
        for (std::int64_t a = 0; a < k; ++a)
          for (std::int64_t b = 0; b < k; ++b) {
            const auto idx = (c * H + i * s + a) * W + j * s + b;
            if (xv[idx] > xv[best]) best = idx;
          }
        const auto o = (c * Ho + i) * Wo + j;
        out[o] = xv[best];
        (*arg)[o] = best;
      }
  auto xi = x.impl();
  return detail::record<T>({C, Ho, Wo}, std::move(out), "max_pool2d", {xi},
                           [=](const detail::TensorImpl<T>& o) {
                             xi->ensure_grad();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                               xi->grad[(*arg)[i]] += o.grad[i];
                           });
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::int64_t k, std::int64_t s) {
  detail::require_rank(x.shape(), 3, "avg_pool2d", "input");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (k <= 0 || s <= 0 || H < k || W < k) throw DimensionError("avg_pool2d: window too large");
  const auto Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(static_cast<std::size_t>(C * Ho * Wo));
  const T* xv = x.data().data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j) {
        Acc<T> acc = 0;
        for (std::int64_t a = 0; a < k; ++a)
          for (std::int64_t b = 0; b < k; ++b) acc += xv[(c * H + i * s + a) * W + j * s + b];
        out[(c * Ho + i) * Wo + j] = static_cast<T>(acc * inv);
      }
  auto xi = x.impl();
  return detail::record<T>({C, Ho, Wo}, std::move(out), "avg_pool2d", {xi},
                           [=](const detail::TensorImpl<T>& o) {
                             xi->ensure_grad();
                             for (std::int64_t c = 0; c < C; ++c)
                               for (std::int64_t i = 0; i < Ho; ++i)
                                 for (std::int64_t j = 0; j < Wo; ++j) {
                                   const T g = o.grad[(c * Ho + i) * Wo + j] * inv;
                                   for (std::int64_t a = 0; a < k; ++a)
                                     for (std::int64_t b = 0; b < k; ++b)
                                       xi->grad[(c * H + i * s + a) * W + j * s + b] += g;
                                 }
                           });
}

template <class T>
Tensor<T> upsample_nearest2d(const Tensor<T>& x, std::int64_t factor) {
  detail::require_rank(x.shape(), 3, "upsample_nearest2d", "input");
  if (factor <= 0) throw ConfigError("upsample_nearest2d: factor must be positive");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto Ho = H * factor, Wo = W * factor;
  std::vector<T> out(static_cast<std::size_t>(C * Ho * Wo));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j)
        out[(c * Ho + i) * Wo + j] = x.data()[(c * H + i / factor) * W + j / factor];
  auto xi = x.impl();
  return detail::record<T>({C, Ho, Wo}, std::move(out), "upsample_nearest2d", {xi},
                           [=](const detail::TensorImpl<T>& o) {
                             xi->ensure_grad();
                             for (std::int64_t c = 0; c < C; ++c)
                               for (std::int64_t i = 0; i < Ho; ++i)
                                 for (std::int64_t j = 0; j < Wo; ++j)
                                   xi->grad[(c * H + i / factor) * W + j / factor] +=
                                       o.grad[(c * Ho + i) * Wo + j];
                           });
}

// ---------------------------------------------------------------------- RoI Align

namespace detail {

struct BilinearTap {
  std::int64_t index;  // into one H*W plane
  double weight;
};

// Bilinear taps at (y, x) in sample-grid coordinates (pixel centers at
// integer positions). Samples more than one cell outside the map give no taps.
inline int bilinear_taps(std::int64_t H, std::int64_t W, double y, double x, BilinearTap* taps) {
  if (y < -1.0 || y > static_cast<double>(H) || x < -1.0 || x > static_cast<double>(W)) return 0;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  auto y0 = static_cast<std::int64_t>(y), x0 = static_cast<std::int64_t>(x);
  std::int64_t y1, x1;
  if (y0 >= H - 1) {
    y0 = y1 = H - 1;
    y = static_cast<double>(y0);
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= W - 1) {
    x0 = x1 = W - 1;
    x = static_cast<double>(x0);
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - y0, lx = x - x0, hy = 1.0 - ly, hx = 1.0 - lx;
  taps[0] = {y0 * W + x0, hy * hx};
  taps[1] = {y0 * W + x1, hy * lx};
  taps[2] = {y1 * W + x0, ly * hx};
  taps[3] = {y1 * W + x1, ly * lx};
  return 4;
}

}  // namespace detail

// Bilinear value of a single [H,W] plane at sample-grid coordinates.
template <class T>
T bilinear_sample(std::span<const T> plane, std::int64_t H, std::int64_t W, double y, double x) {
  detail::BilinearTap taps[4];
  const int n = detail::bilinear_taps(H, W, y, x, taps);
  double v = 0;
  for (int i = 0; i < n; ++i) v += taps[i].weight * plane[taps[i].index];
  return static_cast<T>(v);
}

struct RoiAlignParams {
  std::int64_t out_h = 7, out_w = 7;
  double spatial_scale = 1.0;  // feature-map cells per image pixel
  int sampling = 2;            // samples per bin side
};

// Quantization-free pooling of each box (image coordinates) over x[C,H,W]
// into [R, C, out_h, out_w]. Each bin averages sampling^2 bilinear samples.
template <class T>
Tensor<T> roi_align(const Tensor<T>& x, const std::vector<Box>& boxes, RoiAlignParams p) {
  detail::require_rank(x.shape(), 3, "roi_align", "input");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto R = static_cast<std::int64_t>(boxes.size());
  const auto cells = p.out_h * p.out_w;
  const int per_cell = 4 * p.sampling * p.sampling;
  // Taps shared across channels: [R, cells, per_cell].
  auto taps = std::make_shared<std::vector<detail::BilinearTap>>(
      static_cast<std::size_t>(R * cells * per_cell), detail::BilinearTap{0, 0.0});
  const double inv_count = 1.0 / (p.sampling * p.sampling);
  for (std::int64_t r = 0; r < R; ++r) {
    const Box& b = boxes[r];
    if (!b.valid() || !std::isfinite(b.x1) || !std::isfinite(b.y2))
      throw EmptyRoiError("roi_align: box " + std::to_string(r) + " has no area");
    const double x1 = b.x1 * p.spatial_scale - 0.5, y1 = b.y1 * p.spatial_scale - 0.5;
    const double bw = (b.x2 - b.x1) * p.spatial_scale / p.out_w;
    const double bh = (b.y2 - b.y1) * p.spatial_scale / p.out_h;
    for (std::int64_t ph = 0; ph < p.out_h; ++ph)
      for (std::int64_t pw = 0; pw < p.out_w; ++pw) {
        auto* cell = taps->data() + ((r * cells) + ph * p.out_w + pw) * per_cell;
        int n = 0;
        for (int iy = 0; iy < p.sampling; ++iy)
          for (int ix = 0; ix < p.sampling; ++ix) {
            const double y = y1 + ph * bh + (iy + 0.5) * bh / p.sampling;
            const double xx = x1 + pw * bw + (ix + 0.5) * bw / p.sampling;
            detail::BilinearTap t[4];
            const int k = detail::bilinear_taps(H, W, y, xx, t);
            for (int q = 0; q < k; ++q) cell[n++] = {t[q].index, t[q].weight * inv_count};
          }
      }
  }
  std::vector<T> out(static_cast<std::size_t>(R * C * cells));
  const T* xv = x.data().data();
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* plane = xv + c * H * W;
      for (std::int64_t q = 0; q < cells; ++q) {
        const auto* cell = taps->data() + (r * cells + q) * per_cell;
        double v = 0;
        for (int k = 0; k < per_cell; ++k) v += cell[k].weight * plane[cell[k].index];
        out[(r * C + c) * cells + q] = static_cast<T>(v);
      }
    }
  auto xi = x.impl();
  return detail::record<T>({R, C, p.out_h, p.out_w}, std::move(out), "roi_align", {xi},
                           [=](const detail::TensorImpl<T>& o) {
                             xi->ensure_grad();
                             for (std::int64_t r = 0; r < R; ++r)
                               for (std::int64_t c = 0; c < C; ++c) {
                                 T* plane = xi->grad.data() + c * H * W;
                                 for (std::int64_t q = 0; q < cells; ++q) {
                                   const T g = o.grad[(r * C + c) * cells + q];
                                   const auto* cell = taps->data() + (r * cells + q) * per_cell;
                                   for (int k = 0; k < per_cell; ++k)
                                     plane[cell[k].index] += static_cast<T>(cell[k].weight * g);
                                 }
                               }
                           });
}

}  // namespace gfm
