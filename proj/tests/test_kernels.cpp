#include <doctest.h>

#include <cstring>

#include "storm/kernels.hpp"
#include "test_util.hpp"

using namespace storm;
using storm::testing::Rng;

namespace {

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("scalar backend is always available and listed first") {
  auto backends = kernels::available_backends();
  REQUIRE(!backends.empty());
  CHECK(backends.front() == kernels::Backend::Scalar);
  CHECK(std::string(kernels::scalar_table().name) == "scalar");
}

TEST_CASE("every SIMD backend is bit-identical to the scalar reference") {
  const auto& ref = kernels::scalar_table();
  Rng rng(11);
  for (kernels::Backend b : kernels::available_backends()) {
    const auto& simd = kernels::table_for(b);
    CAPTURE(simd.name);
    // Odd sizes exercise the vector tails.
    for (std::size_t trial = 0; trial < 60; ++trial) {
      const std::size_t m = 1 + rng.index(7), n = 1 + rng.index(41), k = 1 + rng.index(37);
      auto a = rng.vec(m * k), bm = rng.vec(k * n), c0 = rng.vec(m * n), at = rng.vec(k * m);
      auto c_ref = c0, c_simd = c0;
      ref.gemm_acc(m, n, k, a.data(), bm.data(), c_ref.data());
      simd.gemm_acc(m, n, k, a.data(), bm.data(), c_simd.data());
      CHECK(bit_equal(c_ref, c_simd));

      c_ref = c0;
      c_simd = c0;
      ref.gemm_tn_acc(m, n, k, at.data(), bm.data(), c_ref.data());
      simd.gemm_tn_acc(m, n, k, at.data(), bm.data(), c_simd.data());
      CHECK(bit_equal(c_ref, c_simd));

      const std::size_t len = n * k;
      auto x = rng.vec(len), y = rng.vec(len);
      std::vector<double> o1(len), o2(len);
      const double alpha = rng.uniform();
      auto y1 = y, y2 = y;
      ref.axpy(len, alpha, x.data(), y1.data());
      simd.axpy(len, alpha, x.data(), y2.data());
      CHECK(bit_equal(y1, y2));
      ref.add(len, x.data(), y.data(), o1.data());
      simd.add(len, x.data(), y.data(), o2.data());
      CHECK(bit_equal(o1, o2));
      ref.mul(len, x.data(), y.data(), o1.data());
      simd.mul(len, x.data(), y.data(), o2.data());
      CHECK(bit_equal(o1, o2));
      ref.scale(len, alpha, x.data(), o1.data());
      simd.scale(len, alpha, x.data(), o2.data());
      CHECK(bit_equal(o1, o2));
    }
  }
}

TEST_CASE("gemm accumulates into the existing output") {
  const auto& t = kernels::active();
  const double a[] = {1, 2, 3, 4};
  const double b[] = {5, 6, 7, 8};
  double c[] = {1, 1, 1, 1};
  t.gemm_acc(2, 2, 2, a, b, c);
  CHECK(c[0] == 20);
  CHECK(c[1] == 23);
  CHECK(c[2] == 44);
  CHECK(c[3] == 51);
}

TEST_CASE("gemm_tn reads A transposed") {
  // A stored [k=2 x m=2] = [[1,3],[2,4]] so A^T = [[1,2],[3,4]].
  const double a[] = {1, 3, 2, 4};
  const double b[] = {5, 6, 7, 8};
  double c[4] = {};
  kernels::active().gemm_tn_acc(2, 2, 2, a, b, c);
  CHECK(c[0] == 19);
  CHECK(c[1] == 22);
  CHECK(c[2] == 43);
  CHECK(c[3] == 50);
}

TEST_CASE("forcing the scalar backend switches the active table") {
  const auto previous = kernels::active().backend;
  kernels::set_active(kernels::Backend::Scalar);
  CHECK(kernels::active().backend == kernels::Backend::Scalar);
  kernels::set_active(previous);
  CHECK(kernels::active().backend == previous);
}

TEST_CASE("transpose") {
  const double in[] = {1, 2, 3, 4, 5, 6};
  double out[6];
  kernels::transpose(2, 3, in, out);
  const double want[] = {1, 4, 2, 5, 3, 6};
  for (int i = 0; i < 6; ++i) CHECK(out[i] == want[i]);
}
