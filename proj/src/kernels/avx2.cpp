#include "storm/kernels.hpp"

#include <immintrin.h>

// Compiled with -mavx2 only. Multiplies and adds stay separate so every lane
// rounds exactly like the scalar reference.
namespace storm::kernels {
namespace {

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void add_avx2(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void mul_avx2(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void scale_avx2(std::size_t n, double alpha, const double* x, double* out) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

// One output row: crow[j] += sum_p coef(p) * brow(p)[j], p ascending. `coef`
// and `brow` abstract over the A vs A^T layouts.
template <class Coef, class Row>
inline void row_update(std::size_t n, std::size_t k, Coef coef, Row brow, double* crow) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256d c0 = _mm256_loadu_pd(crow + j);
    __m256d c1 = _mm256_loadu_pd(crow + j + 4);
    __m256d c2 = _mm256_loadu_pd(crow + j + 8);
    __m256d c3 = _mm256_loadu_pd(crow + j + 12);
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d av = _mm256_set1_pd(coef(p));
      const double* b = brow(p) + j;
      c0 = _mm256_add_pd(c0, _mm256_mul_pd(av, _mm256_loadu_pd(b)));
      c1 = _mm256_add_pd(c1, _mm256_mul_pd(av, _mm256_loadu_pd(b + 4)));
      c2 = _mm256_add_pd(c2, _mm256_mul_pd(av, _mm256_loadu_pd(b + 8)));
      c3 = _mm256_add_pd(c3, _mm256_mul_pd(av, _mm256_loadu_pd(b + 12)));
    }
    _mm256_storeu_pd(crow + j, c0);
    _mm256_storeu_pd(crow + j + 4, c1);
    _mm256_storeu_pd(crow + j + 8, c2);
    _mm256_storeu_pd(crow + j + 12, c3);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d c0 = _mm256_loadu_pd(crow + j);
    for (std::size_t p = 0; p < k; ++p)
      c0 = _mm256_add_pd(c0, _mm256_mul_pd(_mm256_set1_pd(coef(p)), _mm256_loadu_pd(brow(p) + j)));
    _mm256_storeu_pd(crow + j, c0);
  }
  for (; j < n; ++j) {
    double acc = crow[j];
    for (std::size_t p = 0; p < k; ++p) acc = acc + coef(p) * brow(p)[j];
    crow[j] = acc;
  }
}

void gemm_acc_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                   double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    row_update(
        n, k, [arow](std::size_t p) { return arow[p]; },
        [b, n](std::size_t p) { return b + p * n; }, c + i * n);
  }
}

void gemm_tn_acc_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a,
                      const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    row_update(
        n, k, [a, m, i](std::size_t p) { return a[p * m + i]; },
        [b, n](std::size_t p) { return b + p * n; }, c + i * n);
  }
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{Backend::Avx2, "avx2",     axpy_avx2,     add_avx2,
                                 mul_avx2,      scale_avx2, gemm_acc_avx2, gemm_tn_acc_avx2};
  return table;
}

}  // namespace storm::kernels
