#include "storm/kernels.hpp"

#include <arm_neon.h>

// AArch64 variant. vfmaq_f64 is avoided on purpose: separate vmulq/vaddq keep
// rounding identical to the scalar reference.
namespace storm::kernels {
namespace {

void axpy_neon(std::size_t n, double alpha, const double* x, double* y) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vmulq_f64(va, vld1q_f64(x + i))));
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void add_neon(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void mul_neon(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void scale_neon(std::size_t n, double alpha, const double* x, double* out) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(va, vld1q_f64(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

template <class Coef, class Row>
inline void row_update(std::size_t n, std::size_t k, Coef coef, Row brow, double* crow) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    float64x2_t c0 = vld1q_f64(crow + j);
    float64x2_t c1 = vld1q_f64(crow + j + 2);
    float64x2_t c2 = vld1q_f64(crow + j + 4);
    float64x2_t c3 = vld1q_f64(crow + j + 6);
    for (std::size_t p = 0; p < k; ++p) {
      const float64x2_t av = vdupq_n_f64(coef(p));
      const double* b = brow(p) + j;
      c0 = vaddq_f64(c0, vmulq_f64(av, vld1q_f64(b)));
      c1 = vaddq_f64(c1, vmulq_f64(av, vld1q_f64(b + 2)));
      c2 = vaddq_f64(c2, vmulq_f64(av, vld1q_f64(b + 4)));
      c3 = vaddq_f64(c3, vmulq_f64(av, vld1q_f64(b + 6)));
    }
    vst1q_f64(crow + j, c0);
    vst1q_f64(crow + j + 2, c1);
    vst1q_f64(crow + j + 4, c2);
    vst1q_f64(crow + j + 6, c3);
  }
  for (; j < n; ++j) {
    double acc = crow[j];
    for (std::size_t p = 0; p < k; ++p) acc = acc + coef(p) * brow(p)[j];
    crow[j] = acc;
  }
}

void gemm_acc_neon(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                   double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    row_update(
        n, k, [arow](std::size_t p) { return arow[p]; },
        [b, n](std::size_t p) { return b + p * n; }, c + i * n);
  }
}

void gemm_tn_acc_neon(std::size_t m, std::size_t n, std::size_t k, const double* a,
                      const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    row_update(
        n, k, [a, m, i](std::size_t p) { return a[p * m + i]; },
        [b, n](std::size_t p) { return b + p * n; }, c + i * n);
  }
}

}  // namespace

const KernelTable& neon_table() {
  static const KernelTable table{Backend::Neon, "neon",     axpy_neon,     add_neon,
                                 mul_neon,      scale_neon, gemm_acc_neon, gemm_tn_acc_neon};
  return table;
}

}  // namespace storm::kernels
