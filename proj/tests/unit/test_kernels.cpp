#include <doctest.h>

#include <cmath>
#include <vector>

#include "fsit/rng.hpp"
#include "fsit/simd/kernels.hpp"

using namespace fsit;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

template <typename T>
T reference_entry(bool ta, bool tb, int k, const std::vector<T>& a, int lda, const std::vector<T>& b,
                  int ldb, int i, int j) {
  long double acc = 0;
  for (int p = 0; p < k; ++p) {
    const T av = ta ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p];
    const T bv = tb ? b[static_cast<std::size_t>(j) * ldb + p] : b[static_cast<std::size_t>(p) * ldb + j];
    acc += static_cast<long double>(av) * bv;
  }
  return static_cast<T>(acc);
}

template <typename T>
void check_gemm_equivalence(const simd::KernelTable<T>& table, T tol) {
  Rng rng(42);
  for (int trial = 0; trial < 60; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(70));
    const int n = 1 + static_cast<int>(rng.below(90));
    const int k = 1 + static_cast<int>(rng.below(300));
    const bool ta = rng.below(2), tb = rng.below(2), acc = rng.below(2);
    const int lda = ta ? m : k, ldb = tb ? k : n;
    auto a = random_vec<T>(static_cast<std::size_t>(m) * k, rng);
    auto b = random_vec<T>(static_cast<std::size_t>(k) * n, rng);
    auto c0 = random_vec<T>(static_cast<std::size_t>(m) * n, rng);
    auto c = c0;
    table.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c.data(), n, acc);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const T expect = reference_entry(ta, tb, k, a, lda, b, ldb, i, j) +
                         (acc ? c0[static_cast<std::size_t>(i) * n + j] : T(0));
        REQUIRE(std::abs(c[static_cast<std::size_t>(i) * n + j] - expect) <= tol * std::sqrt(static_cast<T>(k)));
      }
  }
}

template <typename T>
void check_vector_kernels(const simd::KernelTable<T>& base, const simd::KernelTable<T>& fast, T tol) {
  Rng rng(7);
  for (std::size_t n : {1u, 3u, 7u, 8u, 15u, 16u, 33u, 100u, 1031u}) {
    auto x = random_vec<T>(n, rng), y = random_vec<T>(n, rng);
    CHECK(std::abs(base.dot(x.data(), y.data(), n) - fast.dot(x.data(), y.data(), n)) <= tol * n);
    CHECK(std::abs(base.sum(x.data(), n) - fast.sum(x.data(), n)) <= tol * n);
    CHECK(std::abs(base.sq_dev_sum(x.data(), n, T(0.1)) - fast.sq_dev_sum(x.data(), n, T(0.1))) <= tol * n);

    auto y1 = y, y2 = y;
    base.axpy(T(0.3), x.data(), y1.data(), n);
    fast.axpy(T(0.3), x.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= tol);

    base.scale_shift(x.data(), T(1.7), T(-0.2), y1.data(), n);
    fast.scale_shift(x.data(), T(1.7), T(-0.2), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= tol);

    auto p1 = x, p2 = x;
    std::vector<T> m1(n, T(0.01)), m2 = m1, v1(n, T(0.02)), v2 = v1;
    base.adam(p1.data(), y.data(), m1.data(), v1.data(), n, T(1e-3), T(0.5), T(0.999), T(1e-8), T(0.5), T(0.01));
    fast.adam(p2.data(), y.data(), m2.data(), v2.data(), n, T(1e-3), T(0.5), T(0.999), T(1e-8), T(0.5), T(0.01));
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(p1[i] - p2[i]) <= tol);
      CHECK(std::abs(m1[i] - m2[i]) <= tol);
      CHECK(std::abs(v1[i] - v2[i]) <= tol);
    }

    auto a1 = x, a2 = x;
    base.ema(a1.data(), y.data(), n, T(0.001));
    fast.ema(a2.data(), y.data(), n, T(0.001));
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(a1[i] - a2[i]) <= tol);
  }
}

}  // namespace

TEST_CASE("scalar gemm matches long-double reference") {
  check_gemm_equivalence<float>(simd::Base::table<float>(), 2e-6f);
  check_gemm_equivalence<double>(simd::Base::table<double>(), 1e-14);
}

TEST_CASE("avx2 kernels are equivalent to the scalar reference") {
  if (!simd::cpu_has_avx2()) {
    MESSAGE("AVX2 not available on this host; skipping");
    return;
  }
  check_gemm_equivalence<float>(simd::Avx2::table<float>(), 2e-6f);
  check_gemm_equivalence<double>(simd::Avx2::table<double>(), 1e-14);
  check_vector_kernels<float>(simd::Base::table<float>(), simd::Avx2::table<float>(), 1e-5f);
  check_vector_kernels<double>(simd::Base::table<double>(), simd::Avx2::table<double>(), 1e-13);
}

TEST_CASE("avx2 gemm rows are independent of the other rows in the call") {
  if (!simd::cpu_has_avx2()) return;
  const auto& t = simd::Avx2::table<float>();
  Rng rng(3);
  const int m = 13, n = 37, k = 300;
  auto a = random_vec<float>(static_cast<std::size_t>(m) * k, rng);
  auto b = random_vec<float>(static_cast<std::size_t>(k) * n, rng);
  std::vector<float> full(static_cast<std::size_t>(m) * n), row(n);
  t.gemm(false, false, m, n, k, a.data(), k, b.data(), n, full.data(), n, false);
  for (int i = 0; i < m; ++i) {
    t.gemm(false, false, 1, n, k, a.data() + static_cast<std::size_t>(i) * k, k, b.data(), n, row.data(), n, false);
    for (int j = 0; j < n; ++j) REQUIRE(row[j] == full[static_cast<std::size_t>(i) * n + j]);
  }
}

TEST_CASE("backend selection") {
  const auto before = simd::active_backend();
  simd::select_backend(simd::Backend::Scalar);
  CHECK(simd::active_backend() == simd::Backend::Scalar);
  CHECK(&simd::kernels<float>() == &simd::Base::table<float>());
  simd::select_backend(simd::Backend::Auto);
  CHECK(simd::active_backend() == (simd::cpu_has_avx2() ? simd::Backend::Avx2 : simd::Backend::Scalar));
  CHECK(simd::parse_backend("cpu-scalar") == simd::Backend::Scalar);
  CHECK_THROWS(simd::parse_backend("gpu"));
  simd::select_backend(before);
}
