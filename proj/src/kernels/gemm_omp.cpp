// SPDX-License-Identifier: Apache-2.0
#include "paracnn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace paracnn::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColTile = 256;

// Four rows of C share every load of a B row. Per element the update
// sequence is fma(a[i,p], b[p,j], acc) for p = 0..k-1, same as the reference.
void block4(const double *__restrict a, const double *__restrict b,
            double *__restrict c, std::size_t k, std::size_t n,
            std::size_t j0, std::size_t j1, bool accumulate) {
  double *__restrict c0 = c;
  double *__restrict c1 = c + n;
  double *__restrict c2 = c + 2 * n;
  double *__restrict c3 = c + 3 * n;
  if (!accumulate) {
    for (std::size_t j = j0; j < j1; ++j) {
      c0[j] = 0.0;
      c1[j] = 0.0;
      c2[j] = 0.0;
      c3[j] = 0.0;
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double a0 = a[p];
    const double a1 = a[k + p];
    const double a2 = a[2 * k + p];
    const double a3 = a[3 * k + p];
    const double *__restrict brow = b + p * n;
#pragma omp simd
    for (std::size_t j = j0; j < j1; ++j) {
      const double bv = brow[j];
      c0[j] = std::fma(a0, bv, c0[j]);
      c1[j] = std::fma(a1, bv, c1[j]);
      c2[j] = std::fma(a2, bv, c2[j]);
      c3[j] = std::fma(a3, bv, c3[j]);
    }
  }
}

void block1(const double *__restrict a, const double *__restrict b,
            double *__restrict c, std::size_t k, std::size_t n,
            std::size_t j0, std::size_t j1, bool accumulate) {
  if (!accumulate)
    for (std::size_t j = j0; j < j1; ++j)
      c[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double a0 = a[p];
    const double *__restrict brow = b + p * n;
#pragma omp simd
    for (std::size_t j = j0; j < j1; ++j)
      c[j] = std::fma(a0, brow[j], c[j]);
  }
}

} // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  if (m == 0 || n == 0)
    return;
  const double *ap = a.data();
  const double *bp = b.data();
  double *cp = c.data();
  const auto blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
      const std::size_t j1 = std::min(n, j0 + kColTile);
      if (rows == kRowBlock) {
        block4(ap + i0 * k, bp, cp + i0 * n, k, n, j0, j1, accumulate);
      } else {
        for (std::size_t r = 0; r < rows; ++r)
          block1(ap + (i0 + r) * k, bp, cp + (i0 + r) * n, k, n, j0, j1,
                 accumulate);
      }
    }
  }
}

void transpose(std::span<const double> in, std::span<double> out,
               std::size_t rows, std::size_t cols) {
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile)
    for (std::size_t j0 = 0; j0 < cols; j0 += tile)
      for (std::size_t i = i0; i < std::min(rows, i0 + tile); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + tile); ++j)
          out[j * rows + i] = in[i * cols + j];
}

void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::vector<double> bt(k * n);
  transpose(b, bt, n, k);
  gemm_nn(a, bt, c, m, k, n, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  std::vector<double> at(m * k);
  transpose(a, at, k, m);
  gemm_nn(at, b, c, m, k, n, accumulate);
}

} // namespace paracnn::kernels
