#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "sgfnet/data.hpp"
#include "sgfnet/grid.hpp"
#include "sgfnet/random.hpp"
#include "sgfnet/spectral.hpp"

namespace sgfnet::hpf {

/// Test image with its piecewise-constant region map: a rectangle and a disk
/// with hard edges over a smooth Gaussian blob. Only region boundaries are edges.
struct EdgeImage {
  Grid<double> image;
  Grid<int> region;
};

inline EdgeImage make_edge_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  if (h < 16 || w < 16) throw DimensionError("make_edge_image: need at least 16x16");
  Rng rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  const double r0 = uni(0.15, 0.3) * hd, r1 = uni(0.55, 0.8) * hd, c0 = uni(0.1, 0.25) * wd, c1 = uni(0.35, 0.5) * wd;
  const double dy = uni(0.3, 0.7) * hd, dx = uni(0.6, 0.8) * wd, dr = uni(0.12, 0.2) * std::min(hd, wd);
  const double by = uni(0.2, 0.8) * hd, bx = uni(0.2, 0.8) * wd, bs = 0.25 * std::min(hd, wd);

  EdgeImage out{Grid<double>(h, w), Grid<int>(h, w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      const double blob = 0.3 * std::exp(-((py - by) * (py - by) + (px - bx) * (px - bx)) / (2 * bs * bs));
      int region = 0;
      double v = 0.2;
      if (py >= r0 && py < r1 && px >= c0 && px < c1) region = 1, v = 0.75;
      if ((py - dy) * (py - dy) + (px - dx) * (px - dx) <= dr * dr) region = 2, v = 0.55;
      out.image(y, x) = v + blob;
      out.region(y, x) = region;
    }
  return out;
}

/// Pixels within `radius` (Chebyshev) of a pixel whose 4-neighbour lies in another region.
inline Grid<int> near_edges(const Grid<int>& region, std::size_t radius) {
  const std::size_t h = region.rows, w = region.cols;
  Grid<int> edge(h, w), near(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const int r = region(y, x);
      edge(y, x) = (y > 0 && region(y - 1, x) != r) || (y + 1 < h && region(y + 1, x) != r) ||
                   (x > 0 && region(y, x - 1) != r) || (x + 1 < w && region(y, x + 1) != r);
    }
  const auto rad = static_cast<std::ptrdiff_t>(radius);
  for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(h); ++y)
    for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(w); ++x) {
      if (!edge(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) continue;
      for (std::ptrdiff_t yy = std::max<std::ptrdiff_t>(0, y - rad); yy <= std::min<std::ptrdiff_t>(h - 1, y + rad); ++yy)
        for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, x - rad); xx <= std::min<std::ptrdiff_t>(w - 1, x + rad); ++xx)
          near(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) = 1;
    }
  return near;
}

/// Share of sum(v^2) that falls on pixels where mask is set; 0 for an all-zero image.
inline double energy_fraction(const Grid<double>& v, const Grid<int>& mask) {
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double e = v.values[i] * v.values[i];
    total += e;
    if (mask.values[i]) inside += e;
  }
  return total > 0.0 ? inside / total : 0.0;
}

/// Grayscale in [0,1]; colour images are reduced with Rec. 601 luma weights.
inline Grid<double> to_gray(const Image& img) {
  Grid<double> g(img.height, img.width);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const std::uint8_t* p = &img.pixels[i * img.channels];
    g.values[i] = img.channels == 1 ? p[0] / 255.0 : (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
  }
  return g;
}

/// 8-bit rendering of a filtered image. With nothing removed (cutoff 0) the
/// values are written directly; otherwise zero maps to mid-gray 128 and the
/// largest magnitude to 1 or 255. A response below 1e-9 (transform roundoff
/// on a flat image) renders as flat gray.
inline Image render(const Grid<double>& v, bool signed_output) {
  Image img(1, v.rows, v.cols);
  double peak = 0.0;
  for (double x : v.values) peak = std::max(peak, std::abs(x));
  const bool flat = peak < 1e-9;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = signed_output ? 128.0 + (flat ? 0.0 : 127.0 * v.values[i] / peak) : 255.0 * v.values[i];
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 255.0)));
  }
  return img;
}

inline Image filter_image(const Image& in, double cutoff) {
  return render(spectral::high_pass(to_gray(in), cutoff), cutoff > 0.0);
}

}  // namespace sgfnet::hpf
