#include "defnet/gemm.hpp"

#include <cblas.h>

#include <mutex>
#include <vector>

namespace defnet {

namespace {

void pin_blas_threads() {
  static std::once_flag once;
  // Threading lives in the evaluation worker pool; BLAS stays serial so that
  // results do not depend on the machine's core count.
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

}  // namespace

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          float alpha, const float* a, std::size_t lda, const float* b,
          std::size_t ldb, float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  pin_blas_threads();
  cblas_sgemm(CblasRowMajor, trans_a == Trans::kYes ? CblasTrans : CblasNoTrans,
              trans_b == Trans::kYes ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda),
              b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b,
          std::size_t ldb, double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  std::vector<double> acc(n);
  // op(B) materialized row-major so the inner loop is contiguous in j.
  std::vector<double> bt;
  const double* bp = b;
  std::size_t bstride = ldb;
  if (trans_b == Trans::kYes) {
    bt.resize(k * n);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[p * n + j] = b[j * ldb + p];
    bp = bt.data();
    bstride = n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a == Trans::kYes ? a[p * lda + i] : a[i * lda + p];
      const double* brow = bp + p * bstride;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = alpha == 1.0 ? acc[j] : alpha * acc[j];
      crow[j] = beta == 0.0 ? v : beta * crow[j] + v;
    }
  }
}

}  // namespace defnet
