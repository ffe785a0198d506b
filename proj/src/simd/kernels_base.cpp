#include "fsit/simd/kernels.hpp"

#include <cmath>
#include <vector>

namespace fsit::simd::Base {
namespace {

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, int lda, const T* b,
          int ldb, T* c, int ldc, bool accumulate) {
  // Materialize op(B) row-major so the inner loop is unit stride.
  std::vector<T> bt;
  const T* bp = b;
  int ldbp = ldb;
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * ldb + p];
    bp = bt.data();
    ldbp = n;
  }
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (!accumulate)
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    for (int p = 0; p < k; ++p) {
      const T aip = trans_a ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p];
      if (aip == T(0)) continue;
      const T* brow = bp + static_cast<std::size_t>(p) * ldbp;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
T sum(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T sq_dev_sum(const T* x, std::size_t n, T mean) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = x[i] - mean;
    acc += d * d;
  }
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_shift(const T* x, T scale, T shift, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = scale * x[i] + shift;
}

template <typename T>
void adam(T* param, const T* grad, T* m, T* v, std::size_t n, T lr, T beta1, T beta2, T eps,
          T bias_corr1, T bias_corr2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * grad[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * grad[i] * grad[i];
    const T mhat = m[i] / bias_corr1;
    const T vhat = v[i] / bias_corr2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
void ema(T* avg, const T* live, std::size_t n, T w) {
  for (std::size_t i = 0; i < n; ++i) avg[i] = (T(1) - w) * avg[i] + w * live[i];
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

}  // namespace fsit::simd::Base
