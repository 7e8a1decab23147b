#pragma once

// Straight-line reference implementations of the SGF block, written with
// explicit index loops over plain vectors. They share no code with the
// tensor ops so they can serve as independent oracles.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "sgfnet/sgf.hpp"

namespace sgfnet::oracle {

struct Map {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Map() = default;
  Map(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_) : n(n_), c(c_), h(h_), w(w_), v(n_ * c_ * h_ * w_) {}
  double& at(std::size_t a, std::size_t b, std::size_t y, std::size_t x) { return v[((a * c + b) * h + y) * w + x]; }
  double at(std::size_t a, std::size_t b, std::size_t y, std::size_t x) const { return v[((a * c + b) * h + y) * w + x]; }
};

template <class T>
Map to_map(const Tensor<T>& t) {
  Map m(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(t[i]);
  return m;
}

template <class T>
std::vector<double> values(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <class T>
Map dwconv(const Map& x, const Tensor<T>& kernel, std::size_t dilation) {
  const std::size_t k = kernel.dim(1);
  const long pad = static_cast<long>(dilation * (k - 1) / 2);
  Map y(x.n, x.c, x.h, x.w);
  for (std::size_t a = 0; a < x.n; ++a)
    for (std::size_t ch = 0; ch < x.c; ++ch)
      for (long r = 0; r < static_cast<long>(x.h); ++r)
        for (long q = 0; q < static_cast<long>(x.w); ++q) {
          double acc = 0.0;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const long sy = r + static_cast<long>(i * dilation) - pad;
              const long sx = q + static_cast<long>(j * dilation) - pad;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(x.h) || sx >= static_cast<long>(x.w)) continue;
              acc += kernel.at(ch, i, j) * x.at(a, ch, sy, sx);
            }
          y.at(a, ch, r, q) = acc;
        }
  return y;
}

template <class T>
Map pointwise(const Map& x, const sgf::Pointwise<T>& p) {
  const std::size_t out = p.w.dim(0);
  Map y(x.n, out, x.h, x.w);
  for (std::size_t a = 0; a < x.n; ++a)
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t r = 0; r < x.h; ++r)
        for (std::size_t q = 0; q < x.w; ++q) {
          double acc = p.b[o];
          for (std::size_t i = 0; i < x.c; ++i) acc += p.w.at(o, i) * x.at(a, i, r, q);
          y.at(a, o, r, q) = acc;
        }
  return y;
}

inline Map avg_pool(const Map& x, std::size_t oh, std::size_t ow) {
  Map y(x.n, x.c, oh, ow);
  for (std::size_t a = 0; a < x.n; ++a)
    for (std::size_t ch = 0; ch < x.c; ++ch)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t y0 = i * x.h / oh, y1 = ((i + 1) * x.h + oh - 1) / oh;
          const std::size_t x0 = j * x.w / ow, x1 = ((j + 1) * x.w + ow - 1) / ow;
          double acc = 0.0;
          for (std::size_t r = y0; r < y1; ++r)
            for (std::size_t q = x0; q < x1; ++q) acc += x.at(a, ch, r, q);
          y.at(a, ch, i, j) = acc / static_cast<double>((y1 - y0) * (x1 - x0));
        }
  return y;
}

/// S[n][c] by the double loop over the cosine basis, basis entries computed inline.
template <class T>
std::vector<std::vector<double>> dct_descriptor(const Map& x, const spectral::SpectralBasisSet<T>& set) {
  const std::size_t bh = set.basis_h, bw = set.basis_w;
  const Map p = avg_pool(x, bh, bw);
  const std::size_t group = x.c / set.group_count();
  std::vector<std::vector<double>> s(x.n, std::vector<double>(x.c));
  for (std::size_t a = 0; a < x.n; ++a)
    for (std::size_t ch = 0; ch < x.c; ++ch) {
      const auto [fh, fw] = set.freq_pairs[ch / group];
      double acc = 0.0;
      for (std::size_t h = 0; h < bh; ++h)
        for (std::size_t w = 0; w < bw; ++w) {
          const double basis = std::cos((h + 0.5) * std::numbers::pi * static_cast<double>(fh) / static_cast<double>(bh)) *
                               std::cos((w + 0.5) * std::numbers::pi * static_cast<double>(fw) / static_cast<double>(bw));
          acc += p.at(a, ch, h, w) * basis;
        }
      s[a][ch] = acc;
    }
  return s;
}

template <class T>
std::vector<double> mlp(const std::vector<double>& s, const sgf::Mlp<T>& m) {
  const std::size_t hidden = m.w1.dim(0), width = m.w2.dim(0);
  std::vector<double> z(hidden), y(width);
  for (std::size_t j = 0; j < hidden; ++j) {
    double acc = m.b1[j];
    for (std::size_t i = 0; i < s.size(); ++i) acc += m.w1.at(j, i) * s[i];
    z[j] = std::max(acc, 0.0);
  }
  for (std::size_t o = 0; o < width; ++o) {
    double acc = m.b2[o];
    for (std::size_t j = 0; j < hidden; ++j) acc += m.w2.at(o, j) * z[j];
    y[o] = acc;
  }
  return y;
}

/// Large-kernel features -> DCT descriptor -> MLP -> sigmoid, applied to enh.
template <class T>
Map channel_attention(const Map& enh, const sgf::SgfParams<T>& p, const sgf::SgfBases<T>& bases) {
  const Map lka = pointwise(dwconv(dwconv(enh, p.lka->dw5, 1), p.lka->dw7, 3), p.lka->pw);
  const auto s = dct_descriptor(lka, bases.joint);
  Map out = enh;
  for (std::size_t a = 0; a < enh.n; ++a) {
    const auto q = mlp(s[a], *p.mlp_rgbt);
    for (std::size_t ch = 0; ch < enh.c; ++ch)
      for (std::size_t r = 0; r < enh.h; ++r)
        for (std::size_t c2 = 0; c2 < enh.w; ++c2) out.at(a, ch, r, c2) = enh.at(a, ch, r, c2) * sigmoid(q[ch]);
  }
  return out;
}

struct CrossResult {
  Map att_rgb, att_t, cross_rgb, cross_t;
  std::vector<double> mask_rgb, mask_t;  // [n][i][j], column j normalized over i
  std::vector<double> spatial_rgb, spatial_t;
};

/// Index-by-index global cross-modal attention.
template <class T>
CrossResult cross_attention(const Map& agg_rgb, const Map& agg_t, const sgf::SgfParams<T>& p) {
  const std::size_t n = agg_rgb.n, c = agg_rgb.c, hw = agg_rgb.h * agg_rgb.w;
  CrossResult r;

  auto mask_of = [&](const Map& x, const sgf::CrossAttention<T>& w) {
    const Map q = pointwise(x, w.query), k = pointwise(x, w.key);
    std::vector<double> m(n * hw * hw);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t j = 0; j < hw; ++j) {
        std::vector<double> col(hw);
        for (std::size_t i = 0; i < hw; ++i) {
          double acc = 0.0;
          for (std::size_t d = 0; d < q.c; ++d) acc += q.v[(a * q.c + d) * hw + i] * k.v[(a * k.c + d) * hw + j];
          col[i] = acc;
        }
        const double mx = *std::max_element(col.begin(), col.end());
        double z = 0.0;
        for (double& e : col) z += (e = std::exp(e - mx));
        for (std::size_t i = 0; i < hw; ++i) m[(a * hw + i) * hw + j] = col[i] / z;
      }
    return m;
  };
  r.mask_rgb = mask_of(agg_rgb, *p.attn_rgb);
  r.mask_t = mask_of(agg_t, *p.attn_t);

  auto cross_of = [&](const Map& values_src, const sgf::CrossAttention<T>& w, const std::vector<double>& mask,
                      const Map& residual) {
    const Map v = pointwise(values_src, w.value);
    Map out(n, c, agg_rgb.h, agg_rgb.w);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < hw; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += v.v[(a * c + ch) * hw + i] * mask[(a * hw + i) * hw + j];
          out.v[(a * c + ch) * hw + j] = acc + residual.v[(a * c + ch) * hw + j];
        }
    return out;
  };
  r.cross_t = cross_of(agg_t, *p.attn_t, r.mask_rgb, agg_t);
  r.cross_rgb = cross_of(agg_rgb, *p.attn_rgb, r.mask_t, agg_rgb);

  auto attend = [&](const Map& cross, const Map& agg, const sgf::CrossAttention<T>& w, std::vector<double>& spatial) {
    const Map logits = pointwise(cross, w.gate);
    spatial.assign(n * hw, 0.0);
    Map out = agg;
    for (std::size_t a = 0; a < n; ++a) {
      double mx = -1e300, z = 0.0;
      for (std::size_t i = 0; i < hw; ++i) mx = std::max(mx, logits.v[a * hw + i]);
      for (std::size_t i = 0; i < hw; ++i) z += std::exp(logits.v[a * hw + i] - mx);
      for (std::size_t i = 0; i < hw; ++i) spatial[a * hw + i] = std::exp(logits.v[a * hw + i] - mx) / z;
      const double scale = p.options.rescale_spatial_gate ? static_cast<double>(hw) : 1.0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out.v[(a * c + ch) * hw + i] *= scale * spatial[a * hw + i];
    }
    return out;
  };
  r.att_rgb = attend(r.cross_rgb, agg_rgb, *p.attn_rgb, r.spatial_rgb);
  r.att_t = attend(r.cross_t, agg_t, *p.attn_t, r.spatial_t);
  return r;
}

inline double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? worst : 1e300;
}

}  // namespace sgfnet::oracle
