#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "sgfnet/detail/fast_exp.hpp"
#include "sgfnet/detail/gemm.hpp"
#include "sgfnet/tensor.hpp"

// Differentiable operations on Tensor<T>. Every op records a backward rule
// on the active tape when at least one input requires a gradient.

namespace sgfnet {

namespace detail {

// Implicit broadcasting is limited to `b` matching a leading prefix of
// `a`'s shape once trailing size-1 axes are dropped: [N,C] or [N,C,1,1]
// against [N,C,H,W], [M,1] against [M,K]. Returns how many consecutive
// elements of `a` share one element of `b`.
inline std::size_t broadcast_repeat(const Shape& a, const Shape& b, std::string_view op) {
  if (a == b) return 1;
  Shape trimmed = b;
  while (!trimmed.empty() && trimmed.back() == 1) trimmed.pop_back();
  if (trimmed.size() <= a.size() && std::equal(trimmed.begin(), trimmed.end(), a.begin())) {
    return numel(a) / numel(trimmed);
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) + " against " + to_string(a));
}

template <class T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

inline void require_rank(const Shape& s, std::size_t rank, std::string_view op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

// Eight interleaved partial results so the reductions vectorize without
// reassociation flags; the combination order is fixed, so results stay deterministic.
template <class T, class Op>
T lane_reduce(const T* x, std::size_t n, T init, Op op) {
  T lane[8];
  std::fill(lane, lane + 8, init);
  const std::size_t full = n - n % 8;
  for (std::size_t i = 0; i < full; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lane[l] = op(lane[l], x[i + l]);
  for (std::size_t i = full; i < n; ++i) lane[0] = op(lane[0], x[i]);
  T r = init;
  for (T v : lane) r = op(r, v);
  return r;
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T lane[8] = {};
  const std::size_t full = n - n % 8;
  for (std::size_t i = 0; i < full; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
  for (std::size_t i = full; i < n; ++i) lane[0] += a[i] * b[i];
  T r = T(0);
  for (T v : lane) r += v;
  return r;
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i / rep];
  if (detail::should_record({&a, &b})) {
    detail::record("add", out, [pa = a.impl(), pb = b.impl(), rep](const std::vector<T>& g) {
      if (auto* ga = detail::sink(pa)) detail::accumulate(*ga, g);
      if (auto* gb = detail::sink(pb)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i / rep] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i / rep];
  if (detail::should_record({&a, &b})) {
    detail::record("sub", out, [pa = a.impl(), pb = b.impl(), rep](const std::vector<T>& g) {
      if (auto* ga = detail::sink(pa)) detail::accumulate(*ga, g);
      if (auto* gb = detail::sink(pb)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i / rep] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i / rep];
  if (detail::should_record({&a, &b})) {
    detail::record("mul", out, [pa = a.impl(), pb = b.impl(), rep](const std::vector<T>& g) {
      if (auto* ga = detail::sink(pa)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * pb->data[i / rep];
      }
      if (auto* gb = detail::sink(pb)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i / rep] += g[i] * pa->data[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat(a.shape(), b.shape(), "div");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] / y[i / rep];
  if (detail::should_record({&a, &b})) {
    detail::record("div", out, [pa = a.impl(), pb = b.impl(), rep](const std::vector<T>& g) {
      if (auto* ga = detail::sink(pa)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / pb->data[i / rep];
      }
      if (auto* gb = detail::sink(pb)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T d = pb->data[i / rep];
          (*gb)[i / rep] -= g[i] * pa->data[i] / (d * d);
        }
      }
    });
  }
  return out;
}

/// s * a
template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * x[i];
  if (detail::should_record({&a})) {
    detail::record("scalar_mul", out, [pa = a.impl(), s](const std::vector<T>& g) {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }
  return out;
}

/// a + s
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + s;
  if (detail::should_record({&a})) {
    detail::record("add_scalar", out, [pa = a.impl()](const std::vector<T>& g) {
      detail::accumulate(pa->grad_buffer(), g);
    });
  }
  return out;
}

/// s - a
template <class T>
Tensor<T> rsub_scalar(T s, const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s - x[i];
  if (detail::should_record({&a})) {
    detail::record("rsub_scalar", out, [pa = a.impl()](const std::vector<T>& g) {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = detail::stable_sigmoid(x[i]);
  if (detail::should_record({&a})) {
    detail::record("sigmoid", out, [pa = a.impl(), po = out.impl()](const std::vector<T>& g) {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = po->data[i];
        ga[i] += g[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::should_record({&a})) {
    detail::record("relu", out, [pa = a.impl()](const std::vector<T>& g) {
      auto& ga = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (pa->data[i] > T(0)) ga[i] += g[i];
      }
    });
  }
  return out;
}

enum class ElementwiseOp { add, sub, mul, scalar_mul, sigmoid };

/// Dispatcher over the elementwise family. `b` is ignored for sigmoid and
/// must be a one-element tensor for scalar_mul.
template <class T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b = {}) {
  switch (op) {
    case ElementwiseOp::add:
      return add(a, b);
    case ElementwiseOp::sub:
      return sub(a, b);
    case ElementwiseOp::mul:
      return mul(a, b);
    case ElementwiseOp::scalar_mul:
      return scalar_mul(a, b.item());
    case ElementwiseOp::sigmoid:
      return sigmoid(a);
  }
  throw RangeError("unknown elementwise op");
}

/// out[n,c,h,w] = x[n,c,h,w] * s[n,c]
template <class T>
Tensor<T> broadcast_mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank(x.shape(), 4, "broadcast_mul_channel");
  if (s.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw DimensionError("broadcast_mul_channel: scores " + to_string(s.shape()) + " do not match features " +
                         to_string(x.shape()));
  }
  return mul(x, s);
}

/// out[n,c,h,w] = x[n,c,h,w] * m[n,0,h,w]
template <class T>
Tensor<T> broadcast_mul_spatial(const Tensor<T>& x, const Tensor<T>& m) {
  detail::require_rank(x.shape(), 4, "broadcast_mul_spatial");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (m.shape() != Shape{n, 1, x.dim(2), x.dim(3)}) {
    throw DimensionError("broadcast_mul_spatial: map " + to_string(m.shape()) + " does not match features " +
                         to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  auto md = m.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) o[base + p] = xd[base + p] * md[b * hw + p];
    }
  if (detail::should_record({&x, &m})) {
    detail::record("broadcast_mul_spatial", out, [px = x.impl(), pm = m.impl(), n, c, hw](const std::vector<T>& g) {
      auto* gx = detail::sink(px);
      auto* gm = detail::sink(pm);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            if (gx) (*gx)[base + p] += g[base + p] * pm->data[b * hw + p];
            if (gm) (*gm)[b * hw + p] += g[base + p] * px->data[base + p];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::should_record({&a})) {
    detail::record("sum", out, [pa = a.impl()](const std::vector<T>& g) {
      for (T& v : pa->grad_buffer()) v += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scalar_mul(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// [N,C,...] -> [C], summing over every axis except 1.
template <class T>
Tensor<T> sum_per_channel(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("sum_per_channel: rank must be >= 2");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  Tensor<T> out(Shape{c});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < inner; ++p) o[ch] += xd[(b * c + ch) * inner + p];
  if (detail::should_record({&x})) {
    detail::record("sum_per_channel", out, [px = x.impl(), n, c, inner](const std::vector<T>& g) {
      auto& gx = px->grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < inner; ++p) gx[(b * c + ch) * inner + p] += g[ch];
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (detail::should_record({&a})) {
    detail::record("reshape", out, [pa = a.impl()](const std::vector<T>& g) {
      detail::accumulate(pa->grad_buffer(), g);
    });
  }
  return out;
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2 && a.rank() != 3) throw DimensionError("transpose: rank must be 2 or 3");
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t rows = a.dim(a.rank() - 2), cols = a.dim(a.rank() - 1);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) o[b * rows * cols + c * rows + r] = x[b * rows * cols + r * cols + c];
  if (detail::should_record({&a})) {
    detail::record("transpose", out, [pa = a.impl(), batch, rows, cols](const std::vector<T>& g) {
      auto& ga = pa->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            ga[b * rows * cols + r * cols + c] += g[b * rows * cols + c * rows + r];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M,K]x[K,P] -> [M,P], or batched [B,M,K]x[B,K,P] -> [B,M,P].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw DimensionError("matmul: operands must both be rank 2 or both rank 3, got " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) throw DimensionError("matmul: batch mismatch");
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), p = b.dim(b.rank() - 1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor<T> out(batched ? Shape{batch, m, p} : Shape{m, p});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, false, m, p, k, T(1), a.data().data() + i * m * k, b.data().data() + i * k * p, T(0),
                 out.mutable_data().data() + i * m * p);
  }
  if (detail::should_record({&a, &b})) {
    detail::record("matmul", out, [pa = a.impl(), pb = b.impl(), batch, m, k, p](const std::vector<T>& g) {
      auto* ga = detail::sink(pa);
      auto* gb = detail::sink(pb);
      for (std::size_t i = 0; i < batch; ++i) {
        const T* gi = g.data() + i * m * p;
        if (ga) detail::gemm(false, true, m, k, p, T(1), gi, pb->data.data() + i * k * p, T(1), ga->data() + i * m * k);
        if (gb) detail::gemm(true, false, k, p, m, T(1), pa->data.data() + i * m * k, gi, T(1), gb->data() + i * k * p);
      }
    });
  }
  return out;
}

/// x[N,in] * w[out,in]^T + b[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), outc = w.dim(0);
  if (w.dim(1) != in || b.shape() != Shape{outc}) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(w.shape()) + " / bias " + to_string(b.shape()));
  }
  Tensor<T> out(Shape{n, outc});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < outc; ++c) o[r * outc + c] = b.data()[c];
  detail::gemm(false, true, n, outc, in, T(1), x.data().data(), w.data().data(), T(1), o.data());
  if (detail::should_record({&x, &w, &b})) {
    detail::record("linear", out, [px = x.impl(), pw = w.impl(), pb = b.impl(), n, in, outc](const std::vector<T>& g) {
      if (auto* gx = detail::sink(px)) detail::gemm(false, false, n, in, outc, T(1), g.data(), pw->data.data(), T(1), gx->data());
      if (auto* gw = detail::sink(pw)) detail::gemm(true, false, outc, in, n, T(1), g.data(), px->data.data(), T(1), gw->data());
      if (auto* gb = detail::sink(pb)) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < outc; ++c) (*gb)[c] += g[r * outc + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions and resampling (feature layout [N,C,H,W])

/// 1x1 convolution: a per-pixel linear map across channels.
template <class T>
Tensor<T> conv2d_pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 4, "conv2d_pointwise");
  detail::require_rank(w.shape(), 2, "conv2d_pointwise");
  const std::size_t n = x.dim(0), cin = x.dim(1), hw = x.dim(2) * x.dim(3), cout = w.dim(0);
  if (w.dim(1) != cin || bias.shape() != Shape{cout}) {
    throw DimensionError("conv2d_pointwise: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(w.shape()) + " / bias " + to_string(bias.shape()));
  }
  Tensor<T> out(Shape{n, cout, x.dim(2), x.dim(3)});
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < cout; ++c) std::fill_n(o.data() + (b * cout + c) * hw, hw, bias.data()[c]);
    detail::gemm(false, false, cout, hw, cin, T(1), w.data().data(), x.data().data() + b * cin * hw, T(1),
                 o.data() + b * cout * hw);
  }
  if (detail::should_record({&x, &w, &bias})) {
    detail::record("conv2d_pointwise", out,
                   [px = x.impl(), pw = w.impl(), pb = bias.impl(), n, cin, cout, hw](const std::vector<T>& g) {
                     auto* gx = detail::sink(px);
                     auto* gw = detail::sink(pw);
                     auto* gb = detail::sink(pb);
                     for (std::size_t b = 0; b < n; ++b) {
                       const T* gi = g.data() + b * cout * hw;
                       if (gx) detail::gemm(true, false, cin, hw, cout, T(1), pw->data.data(), gi, T(1), gx->data() + b * cin * hw);
                       if (gw) detail::gemm(false, true, cout, cin, hw, T(1), gi, px->data.data() + b * cin * hw, T(1), gw->data());
                       if (gb) {
                         for (std::size_t c = 0; c < cout; ++c)
                           for (std::size_t p = 0; p < hw; ++p) (*gb)[c] += gi[c * hw + p];
                       }
                     }
                   });
  }
  return out;
}

/// Depthwise k x k convolution (cross-correlation) with dilation and zero
/// "same" padding of dilation*(k-1)/2.
template <class T>
Tensor<T> conv2d_depthwise(const Tensor<T>& x, const Tensor<T>& w, std::size_t dilation = 1) {
  detail::require_rank(x.shape(), 4, "conv2d_depthwise");
  detail::require_rank(w.shape(), 3, "conv2d_depthwise");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), k = w.dim(1);
  if (w.dim(0) != c || w.dim(2) != k) {
    throw DimensionError("conv2d_depthwise: weight " + to_string(w.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  if (k % 2 == 0) throw DimensionError("conv2d_depthwise: kernel size must be odd, got " + std::to_string(k));
  if (dilation == 0) throw RangeError("conv2d_depthwise: dilation must be positive");
  const long pad = static_cast<long>(dilation * (k - 1) / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(wd);

  // Visits every (output pixel, tap) pair with an in-bounds input, row by row.
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      const long dy = static_cast<long>(ki * dilation) - pad;
      const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
      for (std::size_t kj = 0; kj < k; ++kj) {
        const long dx = static_cast<long>(kj * dilation) - pad;
        const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
        if (y0 >= y1 || x0 >= x1) continue;
        for (long y = y0; y < y1; ++y) body(ki, kj, y, y + dy, x0, x1, dx);
      }
    }
  };

  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  auto wdata = w.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* in = xd.data() + (b * c + ch) * h * wd;
      T* dst = o.data() + (b * c + ch) * h * wd;
      const T* kern = wdata.data() + ch * k * k;
      for_each_tap([&](std::size_t ki, std::size_t kj, long y, long sy, long x0, long x1, long dx) {
        const T wv = kern[ki * k + kj];
        T* row = dst + y * W;
        const T* src = in + sy * W + dx;
        for (long xx = x0; xx < x1; ++xx) row[xx] += wv * src[xx];
      });
    }
  if (detail::should_record({&x, &w})) {
    detail::record("conv2d_depthwise", out,
                   [px = x.impl(), pw = w.impl(), n, c, h, wd, k, W, for_each_tap](const std::vector<T>& g) {
                     auto* gx = detail::sink(px);
                     auto* gw = detail::sink(pw);
                     for (std::size_t b = 0; b < n; ++b)
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const std::size_t base = (b * c + ch) * h * wd;
                         const T* gout = g.data() + base;
                         const T* in = px->data.data() + base;
                         const T* kern = pw->data.data() + ch * k * k;
                         for_each_tap([&](std::size_t ki, std::size_t kj, long y, long sy, long x0, long x1, long dx) {
                           const T* grow = gout + y * W;
                           if (gx) {
                             const T wv = kern[ki * k + kj];
                             T* dst = gx->data() + base + sy * W + dx;
                             for (long xx = x0; xx < x1; ++xx) dst[xx] += wv * grow[xx];
                           }
                           if (gw) {
                             const T* src = in + sy * W + dx;
                             (*gw)[ch * k * k + ki * k + kj] += detail::dot(grow + x0, src + x0, static_cast<std::size_t>(x1 - x0));
                           }
                         });
                       }
                   });
  }
  return out;
}

namespace detail {

struct PoolWindow {
  std::size_t begin, end;
};

// Adaptive pooling bounds: floor(i*in/out) .. ceil((i+1)*in/out).
inline std::vector<PoolWindow> adaptive_windows(std::size_t in, std::size_t out) {
  std::vector<PoolWindow> win(out);
  for (std::size_t i = 0; i < out; ++i) win[i] = {(i * in) / out, ((i + 1) * in + out - 1) / out};
  return win;
}

}  // namespace detail

template <class T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "adaptive_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw DimensionError("adaptive_avg_pool: cannot pool " + to_string(x.shape()) + " to " + std::to_string(out_h) +
                         "x" + std::to_string(out_w));
  }
  if (out_h == h && out_w == w) {
    // Identity; keep a distinct node so the caller owns a fresh tensor.
    return reshape(x, x.shape());
  }
  const auto rows = detail::adaptive_windows(h, out_h);
  const auto cols = detail::adaptive_windows(w, out_w);
  Tensor<T> out(Shape{n, c, out_h, out_w});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        T acc = T(0);
        for (std::size_t y = rows[i].begin; y < rows[i].end; ++y)
          for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) acc += xd[(plane * h + y) * w + xx];
        const auto count = (rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin);
        o[(plane * out_h + i) * out_w + j] = acc / static_cast<T>(count);
      }
  if (detail::should_record({&x})) {
    detail::record("adaptive_avg_pool", out, [px = x.impl(), n, c, h, w, out_h, out_w, rows, cols](const std::vector<T>& g) {
      auto& gx = px->grad_buffer();
      for (std::size_t plane = 0; plane < n * c; ++plane)
        for (std::size_t i = 0; i < out_h; ++i)
          for (std::size_t j = 0; j < out_w; ++j) {
            const auto count = (rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin);
            const T share = g[(plane * out_h + i) * out_w + j] / static_cast<T>(count);
            for (std::size_t y = rows[i].begin; y < rows[i].end; ++y)
              for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) gx[(plane * h + y) * w + xx] += share;
          }
    });
  }
  return out;
}

namespace detail {

template <class T>
struct LerpTap {
  std::size_t lo, hi;
  T frac;
};

// Half-pixel (align_corners = false) source coordinates.
template <class T>
std::vector<LerpTap<T>> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap<T>> taps(out);
  const T scale = static_cast<T>(in) / static_cast<T>(out);
  for (std::size_t i = 0; i < out; ++i) {
    T src = (static_cast<T>(i) + T(0.5)) * scale - T(0.5);
    if (src < T(0)) src = T(0);
    std::size_t lo = std::min(static_cast<std::size_t>(src), in - 1);
    std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<T>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize, align_corners = false.
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "upsample_bilinear");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return reshape(x, x.shape());
  const auto ty = detail::lerp_taps<T>(h, out_h);
  const auto tx = detail::lerp_taps<T>(w, out_w);
  Tensor<T> out(Shape{n, c, out_h, out_w});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = xd.data() + plane * h * w;
    T* dst = o.data() + plane * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        const T top = src[a.lo * w + b.lo] * (T(1) - b.frac) + src[a.lo * w + b.hi] * b.frac;
        const T bot = src[a.hi * w + b.lo] * (T(1) - b.frac) + src[a.hi * w + b.hi] * b.frac;
        dst[i * out_w + j] = top * (T(1) - a.frac) + bot * a.frac;
      }
    }
  }
  if (detail::should_record({&x})) {
    detail::record("upsample_bilinear", out, [px = x.impl(), n, c, h, w, out_h, out_w, ty, tx](const std::vector<T>& g) {
      auto& gx = px->grad_buffer();
      for (std::size_t plane = 0; plane < n * c; ++plane) {
        T* dst = gx.data() + plane * h * w;
        const T* gp = g.data() + plane * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const auto& a = ty[i];
          for (std::size_t j = 0; j < out_w; ++j) {
            const auto& b = tx[j];
            const T v = gp[i * out_w + j];
            dst[a.lo * w + b.lo] += v * (T(1) - a.frac) * (T(1) - b.frac);
            dst[a.lo * w + b.hi] += v * (T(1) - a.frac) * b.frac;
            dst[a.hi * w + b.lo] += v * a.frac * (T(1) - b.frac);
            dst[a.hi * w + b.hi] += v * a.frac * b.frac;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

struct AxisSplit {
  std::size_t outer, dim, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) throw DimensionError(std::string(op) + ": axis out of range for " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Loops keep the inner (contiguous) index innermost so they vectorize.
template <class T>
void softmax_forward(const T* x, T* y, const AxisSplit& ax, bool log_space) {
  std::vector<T> mx(ax.inner), acc(ax.inner);
  for (std::size_t o = 0; o < ax.outer; ++o) {
    const T* xs = x + o * ax.dim * ax.inner;
    T* ys = y + o * ax.dim * ax.inner;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    std::fill(acc.begin(), acc.end(), T(0));
    for (std::size_t d = 0; d < ax.dim; ++d)
      for (std::size_t i = 0; i < ax.inner; ++i) mx[i] = std::max(mx[i], xs[d * ax.inner + i]);
    for (std::size_t d = 0; d < ax.dim; ++d)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        const T e = detail::vexp(xs[d * ax.inner + i] - mx[i]);
        if (!log_space) ys[d * ax.inner + i] = e;
        acc[i] += e;
      }
    if (log_space) {
      for (std::size_t i = 0; i < ax.inner; ++i) acc[i] = mx[i] + std::log(acc[i]);
      for (std::size_t d = 0; d < ax.dim; ++d)
        for (std::size_t i = 0; i < ax.inner; ++i) ys[d * ax.inner + i] = xs[d * ax.inner + i] - acc[i];
    } else {
      for (std::size_t i = 0; i < ax.inner; ++i) acc[i] = T(1) / acc[i];
      for (std::size_t d = 0; d < ax.dim; ++d)
        for (std::size_t i = 0; i < ax.inner; ++i) ys[d * ax.inner + i] *= acc[i];
    }
  }
}

}  // namespace detail

/// Numerically stable softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto ax = detail::split_axis(x.shape(), axis, "softmax");
  Tensor<T> out(x.shape());
  detail::softmax_forward(x.data().data(), out.mutable_data().data(), ax, false);
  if (detail::should_record({&x})) {
    detail::record("softmax", out, [px = x.impl(), po = out.impl(), ax](const std::vector<T>& g) {
      auto& gx = px->grad_buffer();
      const T* y = po->data.data();
      std::vector<T> dot(ax.inner);
      for (std::size_t o = 0; o < ax.outer; ++o) {
        const std::size_t base = o * ax.dim * ax.inner;
        std::fill(dot.begin(), dot.end(), T(0));
        for (std::size_t d = 0; d < ax.dim; ++d)
          for (std::size_t i = 0; i < ax.inner; ++i) dot[i] += g[base + d * ax.inner + i] * y[base + d * ax.inner + i];
        for (std::size_t d = 0; d < ax.dim; ++d)
          for (std::size_t i = 0; i < ax.inner; ++i) {
            const std::size_t k = base + d * ax.inner + i;
            gx[k] += y[k] * (g[k] - dot[i]);
          }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto ax = detail::split_axis(x.shape(), axis, "log_softmax");
  Tensor<T> out(x.shape());
  detail::softmax_forward(x.data().data(), out.mutable_data().data(), ax, true);
  if (detail::should_record({&x})) {
    detail::record("log_softmax", out, [px = x.impl(), po = out.impl(), ax](const std::vector<T>& g) {
      auto& gx = px->grad_buffer();
      const T* y = po->data.data();
      std::vector<T> total(ax.inner);
      for (std::size_t o = 0; o < ax.outer; ++o) {
        const std::size_t base = o * ax.dim * ax.inner;
        std::fill(total.begin(), total.end(), T(0));
        for (std::size_t d = 0; d < ax.dim; ++d)
          for (std::size_t i = 0; i < ax.inner; ++i) total[i] += g[base + d * ax.inner + i];
        for (std::size_t d = 0; d < ax.dim; ++d)
          for (std::size_t i = 0; i < ax.inner; ++i) {
            const std::size_t k = base + d * ax.inner + i;
            gx[k] += g[k] - std::exp(y[k]) * total[i];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

template <class T>
struct AttentionOutput {
  Tensor<T> out;      // [N,C,P]
  Tensor<T> probs_t;  // [N,P,P] if requested, detached; row j holds softmax over i of (q^T k)[i][j]
};

namespace detail {

inline constexpr std::size_t kAttentionBlock = 64;

// Softmax of each of `rows` contiguous rows of length p, in place.
template <class T>
void softmax_rows(T* x, std::size_t rows, std::size_t p) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x + r * p;
    const T mx = lane_reduce(row, p, -std::numeric_limits<T>::infinity(), [](T a, T b) { return a > b ? a : b; });
    for (std::size_t i = 0; i < p; ++i) row[i] = vexp(row[i] - mx);
    const T inv = T(1) / lane_reduce(row, p, T(0), [](T a, T b) { return a + b; });
    for (std::size_t i = 0; i < p; ++i) row[i] *= inv;
  }
}

}  // namespace detail

/// out = v * softmax(q^T k, axis 1) for q, k [N,D,P] and v [N,C,P]. The
/// probabilities are produced and differentiated in row blocks of their
/// transpose so each block stays in cache.
template <class T>
AttentionOutput<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, bool keep_probs = false) {
  detail::require_rank(q.shape(), 3, "attention");
  if (k.shape() != q.shape() || v.rank() != 3 || v.dim(0) != q.dim(0) || v.dim(2) != q.dim(2)) {
    throw DimensionError("attention: incompatible q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                         to_string(v.shape()));
  }
  const std::size_t n = q.dim(0), d = q.dim(1), p = q.dim(2), c = v.dim(1);
  AttentionOutput<T> r{Tensor<T>(Shape{n, c, p}), {}};
  // Left uninitialized: every entry is written by the gemm below.
  std::shared_ptr<T[]> probs(std::make_unique_for_overwrite<T[]>(n * p * p));
  for (std::size_t b = 0; b < n; ++b) {
    const T* qb = q.data().data() + b * d * p;
    const T* kb = k.data().data() + b * d * p;
    T* pt = probs.get() + b * p * p;
    for (std::size_t j0 = 0; j0 < p; j0 += detail::kAttentionBlock) {
      const std::size_t rows = std::min(detail::kAttentionBlock, p - j0);
      detail::gemm(true, false, rows, p, d, T(1), kb + j0, p, qb, p, T(0), pt + j0 * p, p);
      detail::softmax_rows(pt + j0 * p, rows, p);
    }
    detail::gemm(false, true, c, p, p, T(1), v.data().data() + b * c * p, p, pt, p, T(0),
                 r.out.mutable_data().data() + b * c * p, p);
  }
  if (detail::should_record({&q, &k, &v})) {
    detail::record("attention", r.out,
                   [pq = q.impl(), pk = k.impl(), pv = v.impl(), probs, n, d, p, c](const std::vector<T>& g) {
                     auto* gq = detail::sink(pq);
                     auto* gk = detail::sink(pk);
                     auto* gv = detail::sink(pv);
                     std::unique_ptr<T[]> dl;
                     if (gq || gk) dl = std::make_unique_for_overwrite<T[]>(detail::kAttentionBlock * p);
                     for (std::size_t b = 0; b < n; ++b) {
                       const T* pt = probs.get() + b * p * p;
                       const T* gb = g.data() + b * c * p;
                       const T* vb = pv->data.data() + b * c * p;
                       if (gv) detail::gemm(false, false, c, p, p, T(1), gb, p, pt, p, T(1), gv->data() + b * c * p, p);
                       if (!dl) continue;
                       const T* qb = pq->data.data() + b * d * p;
                       const T* kb = pk->data.data() + b * d * p;
                       for (std::size_t j0 = 0; j0 < p; j0 += detail::kAttentionBlock) {
                         const std::size_t rows = std::min(detail::kAttentionBlock, p - j0);
                         // Gradient w.r.t. the transposed probabilities, then the softmax backward per row.
                         detail::gemm(true, false, rows, p, c, T(1), gb + j0, p, vb, p, T(0), dl.get(), p);
                         for (std::size_t r = 0; r < rows; ++r) {
                           T* dr = dl.get() + r * p;
                           const T* yr = pt + (j0 + r) * p;
                           const T dot = detail::dot(dr, yr, p);
                           for (std::size_t i = 0; i < p; ++i) dr[i] = yr[i] * (dr[i] - dot);
                         }
                         if (gq) detail::gemm(false, false, d, p, rows, T(1), kb + j0, p, dl.get(), p, T(1), gq->data() + b * d * p, p);
                         if (gk) detail::gemm(false, true, d, rows, p, T(1), qb, p, dl.get(), p, T(1), gk->data() + b * d * p + j0, p);
                       }
                     }
                   });
  }
  if (keep_probs) r.probs_t = Tensor<T>(Shape{n, p, p}, std::vector<T>(probs.get(), probs.get() + n * p * p));
  return r;
}

// ---------------------------------------------------------------------------
// Channel concatenation

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  const Shape& ref = xs.front().shape();
  if (ref.size() < 2) throw DimensionError("concat_channels: rank must be >= 2");
  std::size_t total_c = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == ref[i];
    if (!ok) throw DimensionError("concat_channels: " + to_string(s) + " incompatible with " + to_string(ref));
    total_c += s[1];
  }
  const std::size_t n = ref[0];
  const std::size_t inner = xs.front().numel() / (n * ref[1]);
  Shape shape = ref;
  shape[1] = total_c;
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  std::vector<std::size_t> offsets;
  std::size_t c0 = 0;
  for (const auto& t : xs) {
    offsets.push_back(c0);
    const std::size_t c = t.dim(1);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(t.data().data() + b * c * inner, c * inner, o.data() + (b * total_c + c0) * inner);
    c0 += c;
  }
  if (detail::should_record(xs)) {
    std::vector<std::shared_ptr<TensorImpl<T>>> parts;
    for (const auto& t : xs) parts.push_back(t.impl());
    detail::record("concat_channels", out, [parts, offsets, n, inner, total_c](const std::vector<T>& g) {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        auto* gp = detail::sink(parts[k]);
        if (!gp) continue;
        const std::size_t c = parts[k]->shape[1];
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < c * inner; ++i) (*gp)[b * c * inner + i] += g[(b * total_c + offsets[k]) * inner + i];
      }
    });
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<std::size_t>& sizes) {
  if (x.rank() < 2) throw DimensionError("split_channels: rank must be >= 2");
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  if (total != x.dim(1)) {
    throw DimensionError("split_channels: sizes sum to " + std::to_string(total) + " but input has " +
                         std::to_string(x.dim(1)) + " channels");
  }
  const std::size_t n = x.dim(0), c_all = x.dim(1), inner = x.numel() / (n * c_all);
  const bool rec = detail::should_record({&x});
  std::vector<Tensor<T>> outs;
  std::size_t c0 = 0;
  for (std::size_t c : sizes) {
    Shape shape = x.shape();
    shape[1] = c;
    Tensor<T> part(shape);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(x.data().data() + (b * c_all + c0) * inner, c * inner, part.mutable_data().data() + b * c * inner);
    if (rec) {
      detail::record("split_channels", part, [px = x.impl(), c0, c, n, c_all, inner](const std::vector<T>& g) {
        auto& gx = px->grad_buffer();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < c * inner; ++i) gx[(b * c_all + c0) * inner + i] += g[b * c * inner + i];
      });
    }
    outs.push_back(std::move(part));
    c0 += c;
  }
  return outs;
}

// ---------------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) throw Error("backward(): no active tape");
  tape->backward(loss);
}

}  // namespace sgfnet
