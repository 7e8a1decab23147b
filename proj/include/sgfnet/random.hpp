#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "sgfnet/tensor.hpp"

namespace sgfnet {

using Rng = std::mt19937_64;

/// Tensor with entries uniform in [-bound, bound).
template <class T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Learnable weight initialized uniform in +-sqrt(1 / fan_in).
template <class T>
Tensor<T> init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  auto t = uniform<T>(std::move(shape), std::sqrt(1.0 / static_cast<double>(fan_in)), rng);
  t.set_requires_grad(true);
  return t;
}

}  // namespace sgfnet
