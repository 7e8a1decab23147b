#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sgfnet/grid.hpp"
#include "sgfnet/ops.hpp"
#include "sgfnet/tensor.hpp"

// Cosine-basis machinery for multi-spectral channel descriptors, and a
// full-image orthonormal DCT used for high-pass filtering.

namespace sgfnet::spectral {

struct FrequencyPair {
  std::size_t fh = 0;
  std::size_t fw = 0;
  friend bool operator==(const FrequencyPair&, const FrequencyPair&) = default;
  friend auto operator<=>(const FrequencyPair&, const FrequencyPair&) = default;
};

/// B[h][w] = cos((h + 1/2) pi fh / H') * cos((w + 1/2) pi fw / W')
template <class T = double>
Grid<T> make_basis(std::size_t basis_h, std::size_t basis_w, std::size_t fh, std::size_t fw) {
  if (basis_h == 0 || basis_w == 0) throw RangeError("make_basis: basis size must be positive");
  if (fh >= basis_h || fw >= basis_w) {
    throw RangeError("make_basis: frequency (" + std::to_string(fh) + "," + std::to_string(fw) +
                     ") outside basis " + std::to_string(basis_h) + "x" + std::to_string(basis_w));
  }
  constexpr double pi = std::numbers::pi;
  Grid<T> g(basis_h, basis_w);
  for (std::size_t h = 0; h < basis_h; ++h) {
    const double ch = std::cos((static_cast<double>(h) + 0.5) * pi * static_cast<double>(fh) / static_cast<double>(basis_h));
    for (std::size_t w = 0; w < basis_w; ++w) {
      const double cw = std::cos((static_cast<double>(w) + 0.5) * pi * static_cast<double>(fw) / static_cast<double>(basis_w));
      g(h, w) = static_cast<T>(ch * cw);
    }
  }
  return g;
}

/// First `count` pairs in zigzag order: ascending fh + fw, ties by ascending
/// fh. Pair 0 is always (0,0).
inline std::vector<FrequencyPair> select_frequency_pairs(std::size_t count, std::size_t basis_h, std::size_t basis_w) {
  if (count == 0) throw RangeError("select_frequency_pairs: need at least one pair");
  if (count > basis_h * basis_w) {
    throw RangeError("select_frequency_pairs: " + std::to_string(count) + " pairs requested but a " +
                     std::to_string(basis_h) + "x" + std::to_string(basis_w) + " basis has only " +
                     std::to_string(basis_h * basis_w));
  }
  std::vector<FrequencyPair> pairs;
  pairs.reserve(count);
  for (std::size_t diag = 0; diag <= basis_h + basis_w - 2 && pairs.size() < count; ++diag) {
    for (std::size_t fh = 0; fh <= diag && pairs.size() < count; ++fh) {
      const std::size_t fw = diag - fh;
      if (fh < basis_h && fw < basis_w) pairs.push_back({fh, fw});
    }
  }
  return pairs;
}

/// Channel-group count used when none is configured.
inline std::size_t default_group_count(std::size_t channels) { return channels >= 16 ? 16 : channels; }

/// N cosine bases of size H' x W' with their frequency pairs.
template <class T>
struct SpectralBasisSet {
  std::size_t basis_h = 0;
  std::size_t basis_w = 0;
  std::vector<FrequencyPair> freq_pairs;
  std::vector<Grid<T>> bases;

  std::size_t group_count() const { return freq_pairs.size(); }

  static SpectralBasisSet make(std::size_t basis_h, std::size_t basis_w, std::vector<FrequencyPair> pairs) {
    if (pairs.empty()) throw RangeError("SpectralBasisSet: no frequency pairs");
    std::set<FrequencyPair> seen(pairs.begin(), pairs.end());
    if (seen.size() != pairs.size()) throw RangeError("SpectralBasisSet: frequency pairs must be distinct");
    SpectralBasisSet set;
    set.basis_h = basis_h;
    set.basis_w = basis_w;
    for (const auto& p : pairs) set.bases.push_back(make_basis<T>(basis_h, basis_w, p.fh, p.fw));
    set.freq_pairs = std::move(pairs);
    return set;
  }

  static SpectralBasisSet zigzag(std::size_t groups, std::size_t basis_h, std::size_t basis_w) {
    return make(basis_h, basis_w, select_frequency_pairs(groups, basis_h, basis_w));
  }
};

/// Per-channel DCT descriptor S[n,c] = sum_{h,w} pool(x)[n,c,h,w] * B_g(c)[h,w],
/// where channels are split into group_count() contiguous groups and x is
/// first average-pooled to the basis size. Unnormalized.
template <class T>
Tensor<T> dct_pool(const Tensor<T>& x, const SpectralBasisSet<T>& basis_set) {
  detail::require_rank(x.shape(), 4, "dct_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), groups = basis_set.group_count();
  if (c % groups != 0) {
    throw DimensionError("dct_pool: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
                         " groups");
  }
  const std::size_t bh = basis_set.basis_h, bw = basis_set.basis_w, area = bh * bw, group_size = c / groups;
  const Tensor<T> pooled = adaptive_avg_pool(x, bh, bw);

  // Per-channel weight planes, shared by forward and backward.
  std::vector<T> weights(c * area);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const auto& b = basis_set.bases[ch / group_size].values;
    std::copy(b.begin(), b.end(), weights.begin() + ch * area);
  }

  Tensor<T> out(Shape{n, c});
  auto o = out.mutable_data();
  auto p = pooled.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = T(0);
      for (std::size_t k = 0; k < area; ++k) acc += p[(b * c + ch) * area + k] * weights[ch * area + k];
      o[b * c + ch] = acc;
    }
  if (detail::should_record({&pooled})) {
    detail::record("dct_pool", out, [pp = pooled.impl(), weights = std::move(weights), n, c, area](const std::vector<T>& g) {
      auto& gp = pp->grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t k = 0; k < area; ++k) gp[(b * c + ch) * area + k] += g[b * c + ch] * weights[ch * area + k];
    });
  }
  return out;
}

namespace detail {

// Orthonormal DCT-II matrix, row k = frequency.
inline std::vector<double> dct_matrix(std::size_t n) {
  constexpr double pi = std::numbers::pi;
  std::vector<double> m(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    const double alpha = k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      m[k * n + i] = alpha * std::cos(pi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) / static_cast<double>(n));
    }
  }
  return m;
}

// out = L * in * R^T, with L rows x rows and R cols x cols (or their transposes).
inline Grid<double> separable(const Grid<double>& in, const std::vector<double>& l, const std::vector<double>& r,
                              bool transpose) {
  const std::size_t rows = in.rows, cols = in.cols;
  Grid<double> tmp(rows, cols), out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cols; ++k) acc += in(i, k) * (transpose ? r[k * cols + j] : r[j * cols + k]);
      tmp(i, j) = acc;
    }
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < rows; ++k) acc += (transpose ? l[k * rows + i] : l[i * rows + k]) * tmp(k, j);
      out(i, j) = acc;
    }
  return out;
}

}  // namespace detail

/// Orthonormal 2-D DCT-II.
inline Grid<double> dct2_full(const Grid<double>& img) {
  if (img.rows == 0 || img.cols == 0) throw DimensionError("dct2_full: empty image");
  return detail::separable(img, detail::dct_matrix(img.rows), detail::dct_matrix(img.cols), false);
}

/// Inverse of dct2_full (orthonormal DCT-III).
inline Grid<double> idct2_full(const Grid<double>& coeffs) {
  if (coeffs.rows == 0 || coeffs.cols == 0) throw DimensionError("idct2_full: empty grid");
  return detail::separable(coeffs, detail::dct_matrix(coeffs.rows), detail::dct_matrix(coeffs.cols), true);
}

/// True when coefficient (fh, fw) of an H x W transform is removed at `cutoff`.
inline bool is_suppressed(std::size_t fh, std::size_t fw, std::size_t h, std::size_t w, double cutoff) {
  const double rh = static_cast<double>(fh) / static_cast<double>(h);
  const double rw = static_cast<double>(fw) / static_cast<double>(w);
  return std::sqrt(rh * rh + rw * rw) < cutoff * std::numbers::sqrt2;
}

/// Zeroes DCT coefficients with normalized radius below cutoff * sqrt(2)
/// and transforms back.
inline Grid<double> high_pass(const Grid<double>& img, double cutoff) {
  if (!(cutoff >= 0.0 && cutoff <= 1.0)) throw RangeError("high_pass: cutoff must lie in [0,1]");
  Grid<double> coeffs = dct2_full(img);
  for (std::size_t fh = 0; fh < coeffs.rows; ++fh)
    for (std::size_t fw = 0; fw < coeffs.cols; ++fw)
      if (is_suppressed(fh, fw, coeffs.rows, coeffs.cols, cutoff)) coeffs(fh, fw) = 0.0;
  return idct2_full(coeffs);
}

}  // namespace sgfnet::spectral
