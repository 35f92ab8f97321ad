// SPDX-License-Identifier: Apache-2.0
// Row-major matrix products on top of CBLAS. Internal to the library.
#pragma once

#include <cstddef>

namespace lrnet::detail {

/// c = alpha * op(a) * op(b) + beta * c with op(a) m x k and op(b) k x n.
/// Leading dimensions are the row strides of the matrices as stored.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc);

/// Threads the BLAS library may use inside one call.
void set_gemm_threads(int threads);

}  // namespace lrnet::detail
