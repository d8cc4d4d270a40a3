#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Dense inner-loop kernels with a portable scalar reference and SIMD variants.
//
// Every kernel accumulates each output element in ascending order of the
// reduction index, and SIMD variants only vectorize across independent output
// columns (separate multiply and add, no fused multiply-add). The variants are
// therefore bit-identical to the scalar reference, which keeps training runs
// reproducible regardless of which backend the dispatcher picks.
namespace storm::kernels {

enum class Backend { Scalar, Avx2, Neon };

struct KernelTable {
  Backend backend;
  const char* name;
  // y[i] += alpha * x[i]
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // out[i] = x[i] + y[i]
  void (*add)(std::size_t n, const double* x, const double* y, double* out);
  // out[i] = x[i] * y[i]
  void (*mul)(std::size_t n, const double* x, const double* y, double* out);
  // out[i] = alpha * x[i]
  void (*scale)(std::size_t n, double alpha, const double* x, double* out);
  // C[m x n] += A[m x k] * B[k x n], all row-major and dense.
  void (*gemm_acc)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                   double* c);
  // C[m x n] += A^T * B with A stored [k x m] and B stored [k x n].
  void (*gemm_tn_acc)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                      const double* b, double* c);
};

const KernelTable& scalar_table();
#if defined(STORM_HAVE_AVX2_KERNELS)
const KernelTable& avx2_table();
#endif
#if defined(STORM_HAVE_NEON_KERNELS)
const KernelTable& neon_table();
#endif

// Backends compiled in and supported by the running CPU, scalar first.
std::vector<Backend> available_backends();

// The table used by the numerics layer. Chosen once from CPU features; the
// STORM_KERNELS environment variable ("scalar", "avx2", "neon") overrides.
const KernelTable& active();

// Forces a backend; throws storm::Error(Config) when it is unavailable.
void set_active(Backend backend);

const KernelTable& table_for(Backend backend);

std::string to_string(Backend backend);

// Plain transpose: out[n x m] = in[m x n]^T.
void transpose(std::size_t m, std::size_t n, const double* in, double* out);

}  // namespace storm::kernels
