#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "sgfnet/random.hpp"
#include "sgfnet/tensor.hpp"

namespace sgfnet {

namespace detail {

template <class T>
double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace detail

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued f at x.
template <class T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double eps = 1e-5) {
  Tensor<T> leaf = x.clone();
  leaf.set_requires_grad(true);
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    tape.backward(f(leaf));
  }
  const std::vector<T> analytic = leaf.grad();

  NoTapeScope<T> no_tape;
  Tensor<T> probe = x.clone();
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const T saved = probe.mutable_data()[i];
    probe.mutable_data()[i] = saved + static_cast<T>(eps);
    const double up = static_cast<double>(f(probe).item());
    probe.mutable_data()[i] = saved - static_cast<T>(eps);
    const double down = static_cast<double>(f(probe).item());
    probe.mutable_data()[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, detail::relative_error<T>(static_cast<double>(analytic[i]), numeric));
  }
  return worst;
}

/// Same metric for a scalar function of several leaf tensors, probing at
/// most `max_coords` randomly chosen coordinates per tensor (0 = all).
template <class T>
double finite_diff_check_params(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                                double eps = 1e-5, std::size_t max_coords = 0, std::uint64_t seed = 0) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    tape.backward(f());
  }
  std::vector<std::vector<T>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());

  NoTapeScope<T> no_tape;
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].mutable_data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords != 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t i : coords) {
      const T saved = data[i];
      data[i] = saved + static_cast<T>(eps);
      const double up = static_cast<double>(f().item());
      data[i] = saved - static_cast<T>(eps);
      const double down = static_cast<double>(f().item());
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, detail::relative_error<T>(static_cast<double>(analytic[k][i]), numeric));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace sgfnet
