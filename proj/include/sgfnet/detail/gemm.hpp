#pragma once

#include <cblas.h>

#include <algorithm>
#include <cstddef>
#include <vector>

namespace sgfnet::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C, op(A) is m x k, op(B) is k x n,
// with explicit leading dimensions.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

// Double precision stays off BLAS: OpenBLAS 0.3.20's AVX-512 dgemm kernels return
// wrong results for some shapes (e.g. m >= 8 with n >= 193). Double is only used
// for reference and gradient checks, so a plain loop kernel is fast enough.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  std::vector<double> packed;
  if (trans_b) {
    packed.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t l = 0; l < k; ++l) packed[l * n + j] = b[j * ldb + l];
    b = packed.data();
    ldb = n;
  }
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = trans_a ? a[l * lda + i] : a[i * lda + l];
      const double* br = b + l * ldb;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * br[j];
    }
    double* cr = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) cr[j] = alpha * row[j] + (beta == 0.0 ? 0.0 : beta * cr[j]);
  }
}

// Densely packed operands.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, const T* b,
          T beta, T* c) {
  gemm(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

}  // namespace sgfnet::detail
