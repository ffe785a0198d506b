// Compiled with -mavx2 -mfma. Nothing in this file may run before the
// dispatcher has confirmed AVX2 support.
#include "fsit/simd/kernels.hpp"

#if defined(FSIT_HAVE_AVX2)

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace fsit::simd::Avx2 {
namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using Reg = __m256;
  static constexpr int kWidth = 8;
  static Reg zero() { return _mm256_setzero_ps(); }
  static Reg set1(float x) { return _mm256_set1_ps(x); }
  static Reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, Reg r) { _mm256_storeu_ps(p, r); }
  static Reg add(Reg a, Reg b) { return _mm256_add_ps(a, b); }
  static Reg sub(Reg a, Reg b) { return _mm256_sub_ps(a, b); }
  static Reg mul(Reg a, Reg b) { return _mm256_mul_ps(a, b); }
  static Reg div(Reg a, Reg b) { return _mm256_div_ps(a, b); }
  static Reg sqrt(Reg a) { return _mm256_sqrt_ps(a); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_ps(a, b, c); }
  static float hsum(Reg r) {
    __m128 lo = _mm256_castps256_ps128(r);
    __m128 hi = _mm256_extractf128_ps(r, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

template <>
struct Vec<double> {
  using Reg = __m256d;
  static constexpr int kWidth = 4;
  static Reg zero() { return _mm256_setzero_pd(); }
  static Reg set1(double x) { return _mm256_set1_pd(x); }
  static Reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, Reg r) { _mm256_storeu_pd(p, r); }
  static Reg add(Reg a, Reg b) { return _mm256_add_pd(a, b); }
  static Reg sub(Reg a, Reg b) { return _mm256_sub_pd(a, b); }
  static Reg mul(Reg a, Reg b) { return _mm256_mul_pd(a, b); }
  static Reg div(Reg a, Reg b) { return _mm256_div_pd(a, b); }
  static Reg sqrt(Reg a) { return _mm256_sqrt_pd(a); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_pd(a, b, c); }
  static double hsum(Reg r) {
    __m128d lo = _mm256_castpd256_pd128(r);
    __m128d hi = _mm256_extractf128_pd(r, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

// ---------------------------------------------------------------------------
// Packed GEMM: MR x NR register tile, B packed in NR-wide column panels and
// A in MR-tall row panels. Each C element accumulates its K range in order,
// so a row's result never depends on which other rows share the call.

constexpr int kMr = 6;
constexpr int kKc = 256;
constexpr int kMc = 120;
constexpr int kNc = 2048;

template <typename T>
constexpr int kNr = 2 * Vec<T>::kWidth;

template <typename T>
void pack_a(bool trans, const T* a, int lda, int i0, int mc, int p0, int kc, T* out) {
  for (int ir = 0; ir < mc; ir += kMr) {
    const int rows = std::min(kMr, mc - ir);
    T* panel = out + static_cast<std::size_t>(ir) * kc;
    if (!trans) {
      for (int r = 0; r < kMr; ++r) {
        if (r < rows) {
          const T* src = a + static_cast<std::size_t>(i0 + ir + r) * lda + p0;
          for (int p = 0; p < kc; ++p) panel[p * kMr + r] = src[p];
        } else {
          for (int p = 0; p < kc; ++p) panel[p * kMr + r] = T(0);
        }
      }
    } else {
      for (int p = 0; p < kc; ++p) {
        const T* src = a + static_cast<std::size_t>(p0 + p) * lda + i0 + ir;
        int r = 0;
        for (; r < rows; ++r) panel[p * kMr + r] = src[r];
        for (; r < kMr; ++r) panel[p * kMr + r] = T(0);
      }
    }
  }
}

template <typename T>
void pack_b(bool trans, const T* b, int ldb, int p0, int kc, int j0, int nc, T* out) {
  constexpr int nr = kNr<T>;
  for (int jr = 0; jr < nc; jr += nr) {
    const int cols = std::min(nr, nc - jr);
    T* panel = out + static_cast<std::size_t>(jr) * kc;
    if (!trans) {
      for (int p = 0; p < kc; ++p) {
        const T* src = b + static_cast<std::size_t>(p0 + p) * ldb + j0 + jr;
        T* dst = panel + p * nr;
        if (cols == nr) {
          std::memcpy(dst, src, sizeof(T) * nr);
        } else {
          int c = 0;
          for (; c < cols; ++c) dst[c] = src[c];
          for (; c < nr; ++c) dst[c] = T(0);
        }
      }
    } else {
      for (int c = 0; c < nr; ++c) {
        if (c < cols) {
          const T* src = b + static_cast<std::size_t>(j0 + jr + c) * ldb + p0;
          for (int p = 0; p < kc; ++p) panel[p * nr + c] = src[p];
        } else {
          for (int p = 0; p < kc; ++p) panel[p * nr + c] = T(0);
        }
      }
    }
  }
}

template <typename T>
void micro_kernel(int kc, const T* ap, const T* bp, T* c, int ldc, int rows, int cols,
                  bool overwrite) {
  using V = Vec<T>;
  using Reg = typename V::Reg;
  constexpr int w = V::kWidth;
  Reg acc[kMr][2];
#pragma GCC unroll 6
  for (int r = 0; r < kMr; ++r) {
    acc[r][0] = V::zero();
    acc[r][1] = V::zero();
  }
  for (int p = 0; p < kc; ++p) {
    const Reg b0 = V::load(bp);
    const Reg b1 = V::load(bp + w);
#pragma GCC unroll 6
    for (int r = 0; r < kMr; ++r) {
      const Reg av = V::set1(ap[r]);
      acc[r][0] = V::fmadd(av, b0, acc[r][0]);
      acc[r][1] = V::fmadd(av, b1, acc[r][1]);
    }
    ap += kMr;
    bp += 2 * w;
  }
  if (rows == kMr && cols == 2 * w) {
#pragma GCC unroll 6
    for (int r = 0; r < kMr; ++r) {
      T* crow = c + static_cast<std::size_t>(r) * ldc;
      if (overwrite) {
        V::store(crow, acc[r][0]);
        V::store(crow + w, acc[r][1]);
      } else {
        V::store(crow, V::add(V::load(crow), acc[r][0]));
        V::store(crow + w, V::add(V::load(crow + w), acc[r][1]));
      }
    }
    return;
  }
  alignas(32) T tile[kMr][2 * w];
  for (int r = 0; r < kMr; ++r) {
    V::store(&tile[r][0], acc[r][0]);
    V::store(&tile[r][w], acc[r][1]);
  }
  for (int r = 0; r < rows; ++r) {
    T* crow = c + static_cast<std::size_t>(r) * ldc;
    for (int j = 0; j < cols; ++j) crow[j] = overwrite ? tile[r][j] : crow[j] + tile[r][j];
  }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T* c, int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate)
      for (int i = 0; i < m; ++i) std::fill_n(c + static_cast<std::size_t>(i) * ldc, n, T(0));
    return;
  }
  constexpr int nr = kNr<T>;
  thread_local std::vector<T> a_pack;
  thread_local std::vector<T> b_pack;
  const int nc_max = std::min(kNc, ((n + nr - 1) / nr) * nr);
  const int mc_max = std::min(kMc, ((m + kMr - 1) / kMr) * kMr);
  b_pack.resize(static_cast<std::size_t>(kKc) * nc_max);
  a_pack.resize(static_cast<std::size_t>(kKc) * mc_max);

  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      const bool overwrite = !accumulate && pc == 0;
      pack_b(trans_b, b, ldb, pc, kc, jc, nc, b_pack.data());
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        pack_a(trans_a, a, lda, ic, mc, pc, kc, a_pack.data());
        for (int jr = 0; jr < nc; jr += nr) {
          const int cols = std::min(nr, nc - jr);
          const T* bp = b_pack.data() + static_cast<std::size_t>(jr) * kc;
          for (int ir = 0; ir < mc; ir += kMr) {
            const int rows = std::min(kMr, mc - ir);
            const T* ap = a_pack.data() + static_cast<std::size_t>(ir) * kc;
            T* ct = c + static_cast<std::size_t>(ic + ir) * ldc + jc + jr;
            micro_kernel<T>(kc, ap, bp, ct, ldc, rows, cols, overwrite);
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  auto a0 = V::zero(), a1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    a0 = V::fmadd(V::load(x + i), V::load(y + i), a0);
    a1 = V::fmadd(V::load(x + i + w), V::load(y + i + w), a1);
  }
  for (; i + w <= n; i += w) a0 = V::fmadd(V::load(x + i), V::load(y + i), a0);
  T acc = V::hsum(V::add(a0, a1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
T sum(const T* x, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  auto a0 = V::zero(), a1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    a0 = V::add(V::load(x + i), a0);
    a1 = V::add(V::load(x + i + w), a1);
  }
  for (; i + w <= n; i += w) a0 = V::add(V::load(x + i), a0);
  T acc = V::hsum(V::add(a0, a1));
  for (; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T sq_dev_sum(const T* x, std::size_t n, T mean) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  const auto mv = V::set1(mean);
  auto a0 = V::zero(), a1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    const auto d0 = V::sub(V::load(x + i), mv);
    const auto d1 = V::sub(V::load(x + i + w), mv);
    a0 = V::fmadd(d0, d0, a0);
    a1 = V::fmadd(d1, d1, a1);
  }
  for (; i + w <= n; i += w) {
    const auto d0 = V::sub(V::load(x + i), mv);
    a0 = V::fmadd(d0, d0, a0);
  }
  T acc = V::hsum(V::add(a0, a1));
  for (; i < n; ++i) {
    const T d = x[i] - mean;
    acc += d * d;
  }
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  const auto av = V::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_shift(const T* x, T scale, T shift, T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  const auto sv = V::set1(scale);
  const auto bv = V::set1(shift);
  std::size_t i = 0;
  for (; i + w <= n; i += w) V::store(y + i, V::fmadd(sv, V::load(x + i), bv));
  for (; i < n; ++i) y[i] = scale * x[i] + shift;
}

template <typename T>
void adam(T* param, const T* grad, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps,
          T bias_corr1, T bias_corr2) {
  using V = Vec<T>;
  constexpr std::size_t w = V::kWidth;
  const auto b1 = V::set1(beta1), b2 = V::set1(beta2);
  const auto ob1 = V::set1(T(1) - beta1), ob2 = V::set1(T(1) - beta2);
  const auto bc1 = V::set1(bias_corr1), bc2 = V::set1(bias_corr2);
  const auto lrv = V::set1(lr), epsv = V::set1(eps);
  std::size_t i = 0;
  for (; i + w <= n; i += w) {
    const auto g = V::load(grad + i);
    const auto mi = V::add(V::mul(b1, V::load(m + i)), V::mul(ob1, g));
    const auto vi = V::add(V::mul(b2, V::load(v + i)), V::mul(V::mul(ob2, g), g));
    V::store(m + i, mi);
    V::store(v + i, vi);
    const auto mhat = V::div(mi, bc1);
    const auto vhat = V::div(vi, bc2);
    const auto step = V::div(V::mul(lrv, mhat), V::add(V::sqrt(vhat), epsv));
    V::store(param + i, V::sub(V::load(param + i), step));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * grad[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * grad[i] * grad[i];
    const T mhat = m[i] / bias_corr1;
    const T vhat = v[i] / bias_corr2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
void ema(T* avg, const T* live, std::size_t n, T w) {
  using V = Vec<T>;
  constexpr std::size_t width = V::kWidth;
  const auto keep = V::set1(T(1) - w);
  const auto take = V::set1(w);
  std::size_t i = 0;
  for (; i + width <= n; i += width)
    V::store(avg + i, V::add(V::mul(keep, V::load(avg + i)), V::mul(take, V::load(live + i))));
  for (; i < n; ++i) avg[i] = (T(1) - w) * avg[i] + w * live[i];
}

}  // namespace

template <typename T>
const KernelTable<T>& table() {
  static const KernelTable<T> t{&gemm<T>, &dot<T>, &sum<T>, &sq_dev_sum<T>,
                                &axpy<T>, &scale_shift<T>, &adam<T>, &ema<T>};
  return t;
}

template const KernelTable<float>& table<float>();
template const KernelTable<double>& table<double>();

}  // namespace fsit::simd::Avx2

#endif  // FSIT_HAVE_AVX2
