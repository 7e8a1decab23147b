#pragma once

#include <cstddef>
#include <vector>

#include "sgfnet/tensor.hpp"

namespace sgfnet {

/// Plain 2-D real grid (images, cosine bases, DCT coefficients).
template <class T>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), values(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  T operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t size() const { return values.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

}  // namespace sgfnet
