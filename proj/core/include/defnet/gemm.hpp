#pragma once

#include <cstddef>

namespace defnet {

enum class Trans { kNo, kYes };

// Row-major C = alpha * op(A) * op(B) + beta * C, op(A) is m x k, op(B) is k x n.
//
// float routes to single-threaded OpenBLAS. double uses an in-house kernel
// whose per-element sums run in increasing k order, so the float64 path agrees
// bit-for-bit with a direct-summation reference (the verification mode).
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, std::size_t lda, const float* b,
          std::size_t ldb, float beta, float* c, std::size_t ldc);

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b,
          std::size_t ldb, double beta, double* c, std::size_t ldc);

}  // namespace defnet
