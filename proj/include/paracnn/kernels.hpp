// SPDX-License-Identifier: Apache-2.0
/**
 * @file   kernels.hpp
 * @brief  Dense row-major matrix kernels used by the tensor engine.
 *
 * Every kernel comes in two flavours: an OpenMP-parallel blocked version
 * (namespace paracnn::kernels) and a plain serial reference
 * (namespace paracnn::kernels::reference) that the tests compare against.
 *
 * Each output element is reduced over the inner dimension in ascending order
 * with fused multiply-adds, starting from either 0 or the existing value
 * (accumulate). The parallel split is over output rows only, so results are
 * bit-identical to the reference for any thread count and any number of rows.
 */
#pragma once

#include <cstddef>
#include <span>

namespace paracnn::kernels {

/// c[m×n] (+)= a[m×k] · b[k×n]
void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

/// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

/// c[m×n] (+)= a[k×m]ᵀ · b[k×n]
void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

/// out[cols×rows] = in[rows×cols]ᵀ
void transpose(std::span<const double> in, std::span<double> out,
               std::size_t rows, std::size_t cols);

namespace reference {

void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);

} // namespace reference

/// Number of threads the parallel kernels will use.
int max_threads();

} // namespace paracnn::kernels
