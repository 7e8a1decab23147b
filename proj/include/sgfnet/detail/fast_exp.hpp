#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

namespace sgfnet::detail {

// Branch-free single-precision exp (Cephes polynomial, ~2 ulp) that the
// compiler can vectorize, unlike the libm call. Double precision keeps std::exp.
inline float vexp(float x) {
  x = std::max(x, -87.0f);
  x = std::min(x, 88.0f);
  // Adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the low mantissa bits.
  const float shifted = x * 1.44269504088896341f + 12582912.0f;
  const float n = shifted - 12582912.0f;
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const std::uint32_t bits = (std::bit_cast<std::uint32_t>(shifted) - 0x4B400000u + 127u) << 23;
  return y * std::bit_cast<float>(bits);
}

inline double vexp(double x) { return std::exp(x); }

}  // namespace sgfnet::detail
