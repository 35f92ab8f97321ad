// SPDX-License-Identifier: Apache-2.0
#include "gemm.hpp"

#include <cblas.h>

namespace lrnet::detail {

namespace {

CBLAS_TRANSPOSE op(bool t) { return t ? CblasTrans : CblasNoTrans; }
blasint dim(std::size_t v) { return static_cast<blasint>(v); }
// BLAS rejects a zero leading dimension even when the matrix is empty.
blasint ld(std::size_t v) { return static_cast<blasint>(v == 0 ? 1 : v); }

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, op(trans_a), op(trans_b), dim(m), dim(n), dim(k), alpha, a, ld(lda), b, ld(ldb), beta,
              c, ld(ldc));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, op(trans_a), op(trans_b), dim(m), dim(n), dim(k), alpha, a, ld(lda), b, ld(ldb), beta,
              c, ld(ldc));
}

void set_gemm_threads(int threads) { openblas_set_num_threads(threads); }

}  // namespace lrnet::detail
