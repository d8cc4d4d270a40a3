#include <cstdlib>
#include <string_view>

#include "storm/error.hpp"
#include "storm/kernels.hpp"

namespace storm::kernels {
namespace {

bool cpu_supports(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      return true;
    case Backend::Avx2:
#if defined(STORM_HAVE_AVX2_KERNELS) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Backend::Neon:
#if defined(STORM_HAVE_NEON_KERNELS)
      return true;  // mandatory on AArch64
#else
      return false;
#endif
  }
  return false;
}

const KernelTable* pick_default() {
  if (const char* env = std::getenv("STORM_KERNELS")) {
    const std::string_view want(env);
    for (Backend b : available_backends())
      if (to_string(b) == want) return &table_for(b);
  }
  const auto backends = available_backends();
  return &table_for(backends.back());
}

const KernelTable*& current() {
  static const KernelTable* table = pick_default();
  return table;
}

}  // namespace

std::vector<Backend> available_backends() {
  std::vector<Backend> out{Backend::Scalar};
  for (Backend b : {Backend::Avx2, Backend::Neon})
    if (cpu_supports(b)) out.push_back(b);
  return out;
}

const KernelTable& table_for(Backend backend) {
  if (!cpu_supports(backend)) fail(ErrorKind::Config, "kernel backend unavailable: " + to_string(backend));
  switch (backend) {
#if defined(STORM_HAVE_AVX2_KERNELS)
    case Backend::Avx2: return avx2_table();
#endif
#if defined(STORM_HAVE_NEON_KERNELS)
    case Backend::Neon: return neon_table();
#endif
    default: return scalar_table();
  }
}

const KernelTable& active() { return *current(); }

void set_active(Backend backend) { current() = &table_for(backend); }

std::string to_string(Backend backend) {
  switch (backend) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
    case Backend::Neon: return "neon";
  }
  return "unknown";
}

}  // namespace storm::kernels
