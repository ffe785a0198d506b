#pragma once

// Hot inner loops used by the tensor ops. Every kernel has a portable scalar
// reference in namespace Base and, where the host supports it, an AVX2/FMA
// variant in namespace Avx2. The active table is chosen once at startup
// (or explicitly through select_backend) and read through kernels<T>().

#include <cstddef>
#include <string>
#include <string_view>

namespace fsit::simd {

enum class Backend { Auto, Scalar, Avx2 };

/// Row-major C = op(A) * op(B), or C += ... when `accumulate` is set.
/// op(A) is M x K, op(B) is K x N.
template <typename T>
using GemmFn = void (*)(bool trans_a, bool trans_b, int m, int n, int k, const T* a, int lda,
                        const T* b, int ldb, T* c, int ldc, bool accumulate);

template <typename T>
struct KernelTable {
  GemmFn<T> gemm;
  T (*dot)(const T* x, const T* y, std::size_t n);
  T (*sum)(const T* x, std::size_t n);
  /// Sum of (x - mean)^2.
  T (*sq_dev_sum)(const T* x, std::size_t n, T mean);
  /// y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  /// y = scale * x + shift
  void (*scale_shift)(const T* x, T scale, T shift, T* y, std::size_t n);
  /// Adam moment update and parameter step with bias-corrected step size.
  void (*adam)(T* param, const T* grad, T* m, T* v, std::size_t n, T lr, T beta1, T beta2,
               T eps, T bias_corr1, T bias_corr2);
  /// avg = (1 - w) * avg + w * live
  void (*ema)(T* avg, const T* live, std::size_t n, T w);
};

namespace Base {
template <typename T>
const KernelTable<T>& table();
}  // namespace Base

namespace Avx2 {
template <typename T>
const KernelTable<T>& table();
}  // namespace Avx2

bool cpu_has_avx2();

/// Selects the kernel table for the whole process. Auto picks AVX2 when
/// available. Throws std::runtime_error when AVX2 is requested but missing.
void select_backend(Backend backend);
Backend active_backend();
std::string_view backend_name(Backend backend);
Backend parse_backend(std::string_view name);

template <typename T>
const KernelTable<T>& kernels();

}  // namespace fsit::simd
