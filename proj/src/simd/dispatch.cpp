#include <atomic>
#include <stdexcept>

#include "fsit/simd/kernels.hpp"

namespace fsit::simd {
namespace {

Backend resolve(Backend requested) {
  if (requested == Backend::Auto) return cpu_has_avx2() ? Backend::Avx2 : Backend::Scalar;
  if (requested == Backend::Avx2 && !cpu_has_avx2())
    throw std::runtime_error("avx2 backend requested but the CPU lacks AVX2/FMA");
  return requested;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> backend{resolve(Backend::Auto)};
  return backend;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(FSIT_HAVE_AVX2)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

void select_backend(Backend backend) { current().store(resolve(backend)); }

Backend active_backend() { return current().load(); }

std::string_view backend_name(Backend backend) {
  switch (backend) {
    case Backend::Auto: return "auto";
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "unknown";
}

Backend parse_backend(std::string_view name) {
  if (name == "auto" || name == "cpu") return Backend::Auto;
  if (name == "scalar" || name == "cpu-scalar") return Backend::Scalar;
  if (name == "avx2" || name == "cpu-avx2") return Backend::Avx2;
  throw std::invalid_argument("unknown device/backend '" + std::string(name) +
                              "' (expected cpu, cpu-scalar or cpu-avx2)");
}

template <typename T>
const KernelTable<T>& kernels() {
#if defined(FSIT_HAVE_AVX2)
  if (active_backend() == Backend::Avx2) return Avx2::table<T>();
#endif
  return Base::table<T>();
}

template const KernelTable<float>& kernels<float>();
template const KernelTable<double>& kernels<double>();

}  // namespace fsit::simd
