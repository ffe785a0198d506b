#include "fsit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "fsit/simd/kernels.hpp"

namespace fsit::ops {

namespace {
thread_local BranchRecorder* g_branch_recorder = nullptr;
}  // namespace

BranchRecorder* branch_recorder() { return g_branch_recorder; }
BranchScope::BranchScope(BranchRecorder& r) : prev_(g_branch_recorder) { g_branch_recorder = &r; }
BranchScope::~BranchScope() { g_branch_recorder = prev_; }

namespace {

template <typename T>
void record_signs(const Tensor<T>& x, T offset = T(0)) {
  if (BranchRecorder* r = g_branch_recorder)
    for (T v : x.vec()) r->record(v + offset > T(0) ? 1 : (v + offset < T(0) ? -1 : 0));
}

using ag::Node;

template <typename T>
void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_rank(const Var<T>& x, int rank, const char* op) {
  if (x.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
void require_finite(const Tensor<T>& x, const char* op) {
  if (!x.all_finite()) throw std::domain_error(std::string(op) + ": non-finite input");
}

template <typename T>
Tensor<T>& grad_of(Node<T>& n, std::size_t i) {
  return n.inputs[i]->grad_buffer();
}

template <typename T>
bool wants(Node<T>& n, std::size_t i) {
  return i < n.inputs.size() && n.inputs[i] && n.inputs[i]->requires_grad;
}

// Upper bound on lowered-column elements held per conv call.
constexpr std::size_t kColBudget = std::size_t(1) << 18;

// Output columns [lo, hi) whose input column ox*stride - pad + kw lies inside [0, w).
inline void valid_range(int wo, int w, int stride, int offset, int& lo, int& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  hi = w - offset <= 0 ? 0 : std::min(wo, (w - offset + stride - 1) / stride);
  if (hi < lo) hi = lo;
}

// im2col for one image into columns of a (Ci*K*K, ld) matrix, row index
// (ci*K + kh)*K + kw; the image occupies Ho*Wo consecutive columns.
template <typename T>
void im2col(const T* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, T* col,
            std::size_t ld) {
  for (int c = 0; c < ci; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* row = col + static_cast<std::size_t>((c * k + kh) * k + kw) * ld;
        const int offset = kw - pad;
        int lo, hi;
        valid_range(wo, w, stride, offset, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + kh;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w + offset;
          std::fill_n(dst, lo, T(0));
          if (stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride];
          }
          std::fill(dst + hi, dst + wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, T* x,
                std::size_t ld) {
  for (int c = 0; c < ci; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* row = col + static_cast<std::size_t>((c * k + kh) * k + kw) * ld;
        const int offset = kw - pad;
        int lo, hi;
        valid_range(wo, w, stride, offset, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + kh;
          if (iy < 0 || iy >= h) continue;
          T* dst = xc + static_cast<std::size_t>(iy) * w + offset;
          const T* src = row + oy * wo;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Var<T> unary(const Var<T>& a, auto fwd, auto dfdx_from_x_y) {
  Tensor<T> out(a.shape());
  const T* x = a.value().ptr();
  T* y = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) y[i] = fwd(x[i]);
  return ag::make_result<T>(std::move(out), {a}, [dfdx_from_x_y](Node<T>& n) {
    auto& g = grad_of(n, 0);
    const T* x = n.inputs[0]->value.ptr();
    const T* y = n.value.ptr();
    const T* gy = n.grad.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * dfdx_from_x_y(x[i], y[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------

// Stride-1 convolution with few output channels as shifted row updates;
// lowering would leave most of each GEMM register tile empty.
constexpr int kDirectMaxOut = 4;

template <typename T>
void direct_conv_forward(const T* x, const T* w, int ci, int h, int wd, int co, int k, int pad, T* y) {
  const auto& kern = simd::kernels<T>();
  for (int r = 0; r < co; ++r) {
    T* yr = y + static_cast<std::size_t>(r) * h * wd;
    for (int c = 0; c < ci; ++c)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          const T wv = w[((static_cast<std::size_t>(r) * ci + c) * k + kh) * k + kw];
          const int offset = kw - pad;
          int lo, hi;
          valid_range(wd, wd, 1, offset, lo, hi);
          if (hi <= lo) continue;
          for (int oy = 0; oy < h; ++oy) {
            const int iy = oy - pad + kh;
            if (iy < 0 || iy >= h) continue;
            kern.axpy(wv, x + (static_cast<std::size_t>(c) * h + iy) * wd + offset + lo, yr + oy * wd + lo,
                      static_cast<std::size_t>(hi - lo));
          }
        }
  }
}

template <typename T>
void direct_conv_backward(const T* x, const T* w, const T* gy, int ci, int h, int wd, int co, int k, int pad, T* gx,
                          T* gw) {
  const auto& kern = simd::kernels<T>();
  for (int r = 0; r < co; ++r) {
    const T* gr = gy + static_cast<std::size_t>(r) * h * wd;
    for (int c = 0; c < ci; ++c)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          const std::size_t wi = ((static_cast<std::size_t>(r) * ci + c) * k + kh) * k + kw;
          const int offset = kw - pad;
          int lo, hi;
          valid_range(wd, wd, 1, offset, lo, hi);
          if (hi <= lo) continue;
          const std::size_t len = static_cast<std::size_t>(hi - lo);
          T acc = 0;
          for (int oy = 0; oy < h; ++oy) {
            const int iy = oy - pad + kh;
            if (iy < 0 || iy >= h) continue;
            const std::size_t xi = (static_cast<std::size_t>(c) * h + iy) * wd + offset + lo;
            if (gw) acc += kern.dot(gr + oy * wd + lo, x + xi, len);
            if (gx) kern.axpy(w[wi], gr + oy * wd + lo, gx + xi, len);
          }
          if (gw) gw[wi] += acc;
        }
  }
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  require<T>(w.dim(1) == ci && w.dim(3) == k,
             "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  require<T>(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  require<T>(ho > 0 && wo > 0, "conv2d: output would be empty for input " + shape_str(x.shape()));
  if (bias.defined()) require<T>(bias.size() == static_cast<std::size_t>(co), "conv2d: bias size");

  const int n = ho * wo;
  const int kk = ci * k * k;
  // Images are lowered in chunks so one GEMM covers several of them.
  const int chunk = std::max(1, std::min(b, static_cast<int>(kColBudget / (static_cast<std::size_t>(kk) * n))));
  const std::size_t in_stride = static_cast<std::size_t>(ci) * h * wd;
  const std::size_t out_stride = static_cast<std::size_t>(co) * n;
  const auto& kern = simd::kernels<T>();
  const bool direct = stride == 1 && co <= kDirectMaxOut && ho == h && wo == wd;
  Tensor<T> out({b, co, ho, wo});
  if (direct) {
    for (int i = 0; i < b; ++i) {
      T* ob = out.ptr() + i * out_stride;
      if (bias.defined())
        for (int c = 0; c < co; ++c) std::fill_n(ob + static_cast<std::size_t>(c) * n, n, bias.value()[c]);
      direct_conv_forward(x.value().ptr() + i * in_stride, w.value().ptr(), ci, h, wd, co, k, pad, ob);
    }
  } else {
    std::vector<T> col(static_cast<std::size_t>(kk) * chunk * n);
    std::vector<T> res(static_cast<std::size_t>(co) * chunk * n);
    for (int i0 = 0; i0 < b; i0 += chunk) {
      const int cb = std::min(chunk, b - i0);
      const std::size_t ld = static_cast<std::size_t>(cb) * n;
      for (int j = 0; j < cb; ++j)
        im2col(x.value().ptr() + (i0 + j) * in_stride, ci, h, wd, k, stride, pad, ho, wo, col.data() + j * n, ld);
      kern.gemm(false, false, co, static_cast<int>(ld), kk, w.value().ptr(), kk, col.data(), static_cast<int>(ld),
                res.data(), static_cast<int>(ld), false);
      for (int j = 0; j < cb; ++j)
        for (int c = 0; c < co; ++c) {
          const T* src = res.data() + c * ld + j * n;
          T* dst = out.ptr() + (i0 + j) * out_stride + static_cast<std::size_t>(c) * n;
          if (bias.defined()) {
            const T bc = bias.value()[static_cast<std::size_t>(c)];
            for (int p = 0; p < n; ++p) dst[p] = src[p] + bc;
          } else {
            std::copy(src, src + n, dst);
          }
        }
    }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return ag::make_result<T>(std::move(out), std::move(inputs),
                            [=](Node<T>& node) {
    const auto& kern = simd::kernels<T>();
    const Tensor<T>& xv = node.inputs[0]->value;
    const Tensor<T>& wv = node.inputs[1]->value;
    const T* gy = node.grad.ptr();
    const bool need_x = wants(node, 0), need_w = wants(node, 1), need_b = wants(node, 2);
    const std::size_t cols = static_cast<std::size_t>(kk) * chunk * n;
    std::vector<T> gyc(direct ? 0 : static_cast<std::size_t>(co) * chunk * n);
    std::vector<T> colbuf(need_w && !direct ? cols : 0);
    std::vector<T> dcol(need_x && !direct ? cols : 0);
    T* gw = need_w ? grad_of(node, 1).ptr() : nullptr;
    T* gx = need_x ? grad_of(node, 0).ptr() : nullptr;
    T* gb = need_b ? grad_of(node, 2).ptr() : nullptr;
    if (direct) {
      for (int i = 0; i < b; ++i) {
        const T* gyb = gy + i * out_stride;
        if (need_b)
          for (int c = 0; c < co; ++c) gb[c] += kern.sum(gyb + static_cast<std::size_t>(c) * n, n);
        direct_conv_backward(xv.ptr() + i * in_stride, wv.ptr(), gyb, ci, h, wd, co, k, pad,
                             need_x ? gx + i * in_stride : nullptr, gw);
      }
      return;
    }
    for (int i0 = 0; i0 < b; i0 += chunk) {
      const int cb = std::min(chunk, b - i0);
      const std::size_t ld = static_cast<std::size_t>(cb) * n;
      const int ldi = static_cast<int>(ld);
      for (int j = 0; j < cb; ++j) {
        const T* gyb = gy + (i0 + j) * out_stride;
        for (int c = 0; c < co; ++c) {
          const T* src = gyb + static_cast<std::size_t>(c) * n;
          std::copy(src, src + n, gyc.data() + c * ld + j * n);
          if (need_b) gb[c] += kern.sum(src, n);
        }
      }
      if (need_w) {
        for (int j = 0; j < cb; ++j)
          im2col(xv.ptr() + (i0 + j) * in_stride, ci, h, wd, k, stride, pad, ho, wo, colbuf.data() + j * n, ld);
        kern.gemm(false, true, co, kk, ldi, gyc.data(), ldi, colbuf.data(), ldi, gw, kk, true);
      }
      if (need_x) {
        kern.gemm(true, false, kk, ldi, co, wv.ptr(), kk, gyc.data(), ldi, dcol.data(), ldi, false);
        for (int j = 0; j < cb; ++j)
          col2im_add(dcol.data() + j * n, ci, h, wd, k, stride, pad, ho, wo, gx + (i0 + j) * in_stride, ld);
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const int b = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  require<T>(w.dim(1) == in, "linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.defined()) require<T>(bias.size() == static_cast<std::size_t>(out_dim), "linear: bias size");
  const auto& kern = simd::kernels<T>();
  Tensor<T> out({b, out_dim});
  kern.gemm(false, true, b, out_dim, in, x.value().ptr(), in, w.value().ptr(), in, out.ptr(), out_dim, false);
  if (bias.defined())
    for (int i = 0; i < b; ++i)
      kern.axpy(T(1), bias.value().ptr(), out.ptr() + static_cast<std::size_t>(i) * out_dim, out_dim);
  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return ag::make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& node) {
    const auto& kern = simd::kernels<T>();
    const T* gy = node.grad.ptr();
    if (wants(node, 0))
      kern.gemm(false, false, b, in, out_dim, gy, out_dim, node.inputs[1]->value.ptr(), in,
                grad_of(node, 0).ptr(), in, true);
    if (wants(node, 1))
      kern.gemm(true, false, out_dim, in, b, gy, out_dim, node.inputs[0]->value.ptr(), in,
                grad_of(node, 1).ptr(), in, true);
    if (wants(node, 2)) {
      T* gb = grad_of(node, 2).ptr();
      for (int i = 0; i < b; ++i) kern.axpy(T(1), gy + static_cast<std::size_t>(i) * out_dim, gb, out_dim);
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out = a.value();
  simd::kernels<T>().axpy(T(1), b.value().ptr(), out.ptr(), out.size());
  return ag::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& kern = simd::kernels<T>();
    for (std::size_t i = 0; i < 2; ++i)
      if (wants(n, i)) kern.axpy(T(1), n.grad.ptr(), grad_of(n, i).ptr(), n.grad.size());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out = a.value();
  simd::kernels<T>().axpy(T(-1), b.value().ptr(), out.ptr(), out.size());
  return ag::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& kern = simd::kernels<T>();
    if (wants(n, 0)) kern.axpy(T(1), n.grad.ptr(), grad_of(n, 0).ptr(), n.grad.size());
    if (wants(n, 1)) kern.axpy(T(-1), n.grad.ptr(), grad_of(n, 1).ptr(), n.grad.size());
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return ag::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (wants(n, 0)) {
      auto& g = grad_of(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (wants(n, 1)) {
      auto& g = grad_of(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  simd::kernels<T>().scale_shift(a.value().ptr(), s, T(0), out.ptr(), out.size());
  return ag::make_result<T>(std::move(out), {a}, [s](Node<T>& n) {
    simd::kernels<T>().axpy(s, n.grad.ptr(), grad_of(n, 0).ptr(), n.grad.size());
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  simd::kernels<T>().scale_shift(a.value().ptr(), T(1), s, out.ptr(), out.size());
  return ag::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    simd::kernels<T>().axpy(T(1), n.grad.ptr(), grad_of(n, 0).ptr(), n.grad.size());
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  record_signs(a.value());
  return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  record_signs(a.value());
  return unary<T>(a, [slope](T x) { return x > T(0) ? x : slope * x; },
                  [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
  require_rank(x, 4, "instance_norm");
  const int b = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  require<T>(hw >= 1, "instance_norm: empty spatial extent");
  const auto& kern = simd::kernels<T>();
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(b) * c);
  for (std::size_t s = 0; s < inv_std.size(); ++s) {
    const T* src = x.value().ptr() + s * hw;
    const T mean = kern.sum(src, hw) / static_cast<T>(hw);
    const T var = kern.sq_dev_sum(src, hw, mean) / static_cast<T>(hw);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[s] = inv;
    kern.scale_shift(src, inv, -mean * inv, out.ptr() + s * hw, hw);
  }
  return ag::make_result<T>(std::move(out), {x}, [inv_std = std::move(inv_std), hw](Node<T>& n) {
    const auto& kern = simd::kernels<T>();
    auto& g = grad_of(n, 0);
    const T inv_n = T(1) / static_cast<T>(hw);
    for (std::size_t s = 0; s < inv_std.size(); ++s) {
      const T* gy = n.grad.ptr() + s * hw;
      const T* y = n.value.ptr() + s * hw;
      T* gx = g.ptr() + s * hw;
      const T mean_g = kern.sum(gy, hw) * inv_n;
      const T mean_gy = kern.dot(gy, y, hw) * inv_n;
      const T inv = inv_std[s];
      for (std::size_t j = 0; j < hw; ++j) gx[j] += inv * (gy[j] - mean_g - y[j] * mean_gy);
    }
  });
}

template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  require_rank(x, 4, "channel_affine");
  const int b = x.dim(0), c = x.dim(1);
  const Shape pc{b, c};
  require<T>(gamma.shape() == pc && beta.shape() == pc,
             "channel_affine: gamma/beta must be " + shape_str(pc) + ", got " + shape_str(gamma.shape()) +
                 " and " + shape_str(beta.shape()));
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const auto& kern = simd::kernels<T>();
  Tensor<T> out(x.shape());
  for (std::size_t s = 0; s < static_cast<std::size_t>(b) * c; ++s)
    kern.scale_shift(x.value().ptr() + s * hw, gamma.value()[s], beta.value()[s], out.ptr() + s * hw, hw);
  return ag::make_result<T>(std::move(out), {x, gamma, beta}, [hw](Node<T>& n) {
    const auto& kern = simd::kernels<T>();
    const auto& xv = n.inputs[0]->value;
    const auto& gv = n.inputs[1]->value;
    const std::size_t planes = gv.size();
    for (std::size_t s = 0; s < planes; ++s) {
      const T* gy = n.grad.ptr() + s * hw;
      if (wants(n, 0)) kern.axpy(gv[s], gy, grad_of(n, 0).ptr() + s * hw, hw);
      if (wants(n, 1)) grad_of(n, 1)[s] += kern.dot(gy, xv.ptr() + s * hw, hw);
      if (wants(n, 2)) grad_of(n, 2)[s] += kern.sum(gy, hw);
    }
  });
}

template <typename T>
Var<T> adain(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  return channel_affine(instance_norm(x, eps), gamma, beta);
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank(x, 4, "avg_pool2");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require<T>(h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0, "avg_pool2: odd spatial size " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out({b, c, ho, wo});
  const T* src = x.value().ptr();
  T* dst = out.ptr();
  for (int p = 0; p < b * c; ++p) {
    const T* s = src + static_cast<std::size_t>(p) * h * w;
    T* d = dst + static_cast<std::size_t>(p) * ho * wo;
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        d[y * wo + xx] = T(0.25) * (s[(2 * y) * w + 2 * xx] + s[(2 * y) * w + 2 * xx + 1] +
                                   s[(2 * y + 1) * w + 2 * xx] + s[(2 * y + 1) * w + 2 * xx + 1]);
  }
  return ag::make_result<T>(std::move(out), {x}, [=](Node<T>& n) {
    T* g = grad_of(n, 0).ptr();
    const T* gy = n.grad.ptr();
    for (int p = 0; p < b * c; ++p) {
      T* s = g + static_cast<std::size_t>(p) * h * w;
      const T* d = gy + static_cast<std::size_t>(p) * ho * wo;
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          const T v = T(0.25) * d[y * wo + xx];
          s[(2 * y) * w + 2 * xx] += v;
          s[(2 * y) * w + 2 * xx + 1] += v;
          s[(2 * y + 1) * w + 2 * xx] += v;
          s[(2 * y + 1) * w + 2 * xx + 1] += v;
        }
    }
  });
}

template <typename T>
Var<T> upsample2(const Var<T>& x) {
  require_rank(x, 4, "upsample2");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  Tensor<T> out({b, c, ho, wo});
  for (int p = 0; p < b * c; ++p) {
    const T* s = x.value().ptr() + static_cast<std::size_t>(p) * h * w;
    T* d = out.ptr() + static_cast<std::size_t>(p) * ho * wo;
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) d[y * wo + xx] = s[(y / 2) * w + xx / 2];
  }
  return ag::make_result<T>(std::move(out), {x}, [=](Node<T>& n) {
    T* g = grad_of(n, 0).ptr();
    for (int p = 0; p < b * c; ++p) {
      T* s = g + static_cast<std::size_t>(p) * h * w;
      const T* d = n.grad.ptr() + static_cast<std::size_t>(p) * ho * wo;
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) s[(y / 2) * w + xx / 2] += d[y * wo + xx];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const int b = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const auto& kern = simd::kernels<T>();
  Tensor<T> out({b, c});
  for (std::size_t s = 0; s < out.size(); ++s)
    out[s] = kern.sum(x.value().ptr() + s * hw, hw) / static_cast<T>(hw);
  return ag::make_result<T>(std::move(out), {x}, [hw](Node<T>& n) {
    T* g = grad_of(n, 0).ptr();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t s = 0; s < n.grad.size(); ++s) {
      const T v = n.grad[s] * inv;
      T* d = g + s * hw;
      for (std::size_t j = 0; j < hw; ++j) d[j] += v;
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require<T>(a.dim(0) == b.dim(0), "concat_cols: batch mismatch");
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out({rows, ca + cb});
  for (int r = 0; r < rows; ++r) {
    std::copy_n(a.value().ptr() + static_cast<std::size_t>(r) * ca, ca, out.ptr() + static_cast<std::size_t>(r) * (ca + cb));
    std::copy_n(b.value().ptr() + static_cast<std::size_t>(r) * cb, cb, out.ptr() + static_cast<std::size_t>(r) * (ca + cb) + ca);
  }
  return ag::make_result<T>(std::move(out), {a, b}, [=](Node<T>& n) {
    for (int r = 0; r < rows; ++r) {
      const T* g = n.grad.ptr() + static_cast<std::size_t>(r) * (ca + cb);
      if (wants(n, 0)) simd::kernels<T>().axpy(T(1), g, grad_of(n, 0).ptr() + static_cast<std::size_t>(r) * ca, ca);
      if (wants(n, 1)) simd::kernels<T>().axpy(T(1), g + ca, grad_of(n, 1).ptr() + static_cast<std::size_t>(r) * cb, cb);
    }
  });
}

template <typename T>
Var<T> broadcast_rows(const Var<T>& v, int batch) {
  const int d = static_cast<int>(v.size());
  require<T>(v.value().rank() == 1 || (v.value().rank() == 2 && v.dim(0) == 1),
             "broadcast_rows: expected (D) or (1,D), got " + shape_str(v.shape()));
  require<T>(batch >= 1, "broadcast_rows: batch must be positive");
  Tensor<T> out({batch, d});
  for (int r = 0; r < batch; ++r) std::copy_n(v.value().ptr(), d, out.ptr() + static_cast<std::size_t>(r) * d);
  return ag::make_result<T>(std::move(out), {v}, [=](Node<T>& n) {
    T* g = grad_of(n, 0).ptr();
    for (int r = 0; r < batch; ++r) simd::kernels<T>().axpy(T(1), n.grad.ptr() + static_cast<std::size_t>(r) * d, g, d);
  });
}

template <typename T>
Var<T> columns(const Var<T>& x, int start, int len) {
  require_rank(x, 2, "columns");
  const int rows = x.dim(0), cols = x.dim(1);
  require<T>(start >= 0 && len >= 0 && start + len <= cols, "columns: range out of bounds");
  Tensor<T> out({rows, len});
  for (int r = 0; r < rows; ++r)
    std::copy_n(x.value().ptr() + static_cast<std::size_t>(r) * cols + start, len, out.ptr() + static_cast<std::size_t>(r) * len);
  return ag::make_result<T>(std::move(out), {x}, [=](Node<T>& n) {
    T* g = grad_of(n, 0).ptr();
    for (int r = 0; r < rows; ++r)
      simd::kernels<T>().axpy(T(1), n.grad.ptr() + static_cast<std::size_t>(r) * len, g + static_cast<std::size_t>(r) * cols + start, len);
  });
}

template <typename T>
Var<T> group_mean(const Var<T>& x, int k) {
  require<T>(k >= 1, "group_mean: k must be >= 1");
  require<T>(x.value().rank() >= 1 && x.dim(0) % k == 0, "group_mean: leading dim not divisible by k");
  const int groups = x.dim(0) / k;
  const std::size_t stride = x.size() / static_cast<std::size_t>(x.dim(0));
  Shape s = x.shape();
  s[0] = groups;
  Tensor<T> out(s);
  std::vector<T> vals(static_cast<std::size_t>(k));
  for (int g = 0; g < groups; ++g)
    for (std::size_t j = 0; j < stride; ++j) {
      for (int i = 0; i < k; ++i) vals[i] = x.value()[(static_cast<std::size_t>(g) * k + i) * stride + j];
      std::sort(vals.begin(), vals.end());
      // offsets from the smallest value: k identical inputs give that value exactly
      T acc = 0;
      for (T v : vals) acc += v - vals[0];
      out[static_cast<std::size_t>(g) * stride + j] = vals[0] + acc / static_cast<T>(k);
    }
  return ag::make_result<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& gx = grad_of(n, 0);
    const T inv = T(1) / static_cast<T>(k);
    for (int g = 0; g < groups; ++g)
      for (int i = 0; i < k; ++i)
        for (std::size_t j = 0; j < stride; ++j)
          gx[(static_cast<std::size_t>(g) * k + i) * stride + j] += n.grad[static_cast<std::size_t>(g) * stride + j] * inv;
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  require<T>(x.size() > 0, "mean_all of empty tensor");
  Tensor<T> out({1});
  out[0] = simd::kernels<T>().sum(x.value().ptr(), x.size()) / static_cast<T>(x.size());
  return ag::make_result<T>(std::move(out), {x}, [](Node<T>& n) {
    auto& g = grad_of(n, 0);
    const T v = n.grad[0] / static_cast<T>(g.size());
    for (auto& e : g.vec()) e += v;
  });
}

template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "l1_mean");
  require<T>(a.size() > 0, "l1_mean of empty tensors");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  if (BranchRecorder* r = g_branch_recorder)
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T d = a.value()[i] - b.value()[i];
      r->record(d > T(0) ? 1 : (d < T(0) ? -1 : 0));
    }
  Tensor<T> out({1});
  out[0] = acc / static_cast<T>(a.size());
  return ag::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    const T v = n.grad[0] / static_cast<T>(av.size());
    for (std::size_t side = 0; side < 2; ++side) {
      if (!wants(n, side)) continue;
      auto& g = grad_of(n, side);
      const T sgn_side = side == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = av[i] - bv[i];
        const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        g[i] += sgn_side * s * v;
      }
    }
  });
}

template <typename T>
Var<T> hinge_d(const Var<T>& real_logits, const Var<T>& fake_logits) {
  require_same(real_logits, fake_logits, "hinge_d");
  require_finite(real_logits.value(), "hinge_d");
  require_finite(fake_logits.value(), "hinge_d");
  const std::size_t n = real_logits.size();
  require<T>(n > 0, "hinge_d of empty logits");
  record_signs(real_logits.value(), T(-1));
  record_signs(fake_logits.value(), T(1));
  T real_sum = 0, fake_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    real_sum += std::max(T(0), T(1) - real_logits.value()[i]);
    fake_sum += std::max(T(0), T(1) + fake_logits.value()[i]);
  }
  Tensor<T> out({1});
  out[0] = real_sum / static_cast<T>(n) + fake_sum / static_cast<T>(n);
  return ag::make_result<T>(std::move(out), {real_logits, fake_logits}, [n](Node<T>& node) {
    const T v = node.grad[0] / static_cast<T>(n);
    if (wants(node, 0)) {
      auto& g = grad_of(node, 0);
      const auto& r = node.inputs[0]->value;
      for (std::size_t i = 0; i < n; ++i)
        if (T(1) - r[i] > T(0)) g[i] -= v;
    }
    if (wants(node, 1)) {
      auto& g = grad_of(node, 1);
      const auto& f = node.inputs[1]->value;
      for (std::size_t i = 0; i < n; ++i)
        if (T(1) + f[i] > T(0)) g[i] += v;
    }
  });
}

template <typename T>
Var<T> hinge_g(const Var<T>& fake_logits) {
  require_finite(fake_logits.value(), "hinge_g");
  require<T>(fake_logits.size() > 0, "hinge_g of empty logits");
  return scale(mean_all(fake_logits), T(-1));
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const int rank = logits.value().rank();
  require<T>(rank == 2 || rank == 4, "cross_entropy: logits must be (B,L) or (B,L,H,W)");
  const int b = logits.dim(0), l = logits.dim(1);
  const int hw = rank == 4 ? logits.dim(2) * logits.dim(3) : 1;
  const std::size_t count = static_cast<std::size_t>(b) * hw;
  require<T>(labels.size() == count, "cross_entropy: label count mismatch");
  Tensor<T> prob(logits.shape());
  T loss = 0;
  for (int i = 0; i < b; ++i)
    for (int p = 0; p < hw; ++p) {
      const int lab = labels[static_cast<std::size_t>(i) * hw + p];
      if (lab < 0 || lab >= l) throw std::out_of_range("cross_entropy: label out of range");
      auto at = [&](int c) { return (static_cast<std::size_t>(i) * l + c) * hw + p; };
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < l; ++c) mx = std::max(mx, logits.value()[at(c)]);
      T z = 0;
      for (int c = 0; c < l; ++c) z += std::exp(logits.value()[at(c)] - mx);
      for (int c = 0; c < l; ++c) prob[at(c)] = std::exp(logits.value()[at(c)] - mx) / z;
      loss += -(logits.value()[at(lab)] - mx - std::log(z));
    }
  Tensor<T> out({1});
  out[0] = loss / static_cast<T>(count);
  std::vector<int> labs(labels.begin(), labels.end());
  return ag::make_result<T>(std::move(out), {logits}, [prob = std::move(prob), labs = std::move(labs), b, l, hw, count](Node<T>& n) {
    auto& g = grad_of(n, 0);
    const T v = n.grad[0] / static_cast<T>(count);
    for (int i = 0; i < b; ++i)
      for (int p = 0; p < hw; ++p) {
        const int lab = labs[static_cast<std::size_t>(i) * hw + p];
        for (int c = 0; c < l; ++c) {
          const std::size_t idx = (static_cast<std::size_t>(i) * l + c) * hw + p;
          g[idx] += v * (prob[idx] - (c == lab ? T(1) : T(0)));
        }
      }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> spectral_normalized(const Var<T>& w, const Tensor<T>& u, const Tensor<T>& v) {
  const int rows = w.dim(0);
  const int cols = static_cast<int>(w.size() / static_cast<std::size_t>(rows));
  require<T>(u.size() == static_cast<std::size_t>(rows) && v.size() == static_cast<std::size_t>(cols),
             "spectral_normalized: power-iteration vectors do not match weight " + shape_str(w.shape()));
  const auto& kern = simd::kernels<T>();
  std::vector<T> wv(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) wv[r] = kern.dot(w.value().ptr() + static_cast<std::size_t>(r) * cols, v.ptr(), cols);
  const T sigma = std::max(kern.dot(u.ptr(), wv.data(), rows), T(1e-12));
  Tensor<T> out(w.shape());
  kern.scale_shift(w.value().ptr(), T(1) / sigma, T(0), out.ptr(), out.size());
  return ag::make_result<T>(std::move(out), {w}, [u, v, sigma, rows, cols](Node<T>& n) {
    const auto& kern = simd::kernels<T>();
    auto& g = grad_of(n, 0);
    const T inner = kern.dot(n.grad.ptr(), n.value.ptr(), n.grad.size());
    for (int r = 0; r < rows; ++r) {
      T* gr = g.ptr() + static_cast<std::size_t>(r) * cols;
      const T* gyr = n.grad.ptr() + static_cast<std::size_t>(r) * cols;
      kern.axpy(T(1) / sigma, gyr, gr, cols);
      kern.axpy(-inner * u[r] / sigma, v.ptr(), gr, cols);
    }
  });
}

template <typename T>
T power_iteration(const Tensor<T>& w, Tensor<T>& u, Tensor<T>& v) {
  const int rows = w.dim(0);
  const int cols = static_cast<int>(w.size() / static_cast<std::size_t>(rows));
  if (u.size() != static_cast<std::size_t>(rows) || v.size() != static_cast<std::size_t>(cols))
    throw ShapeError("power_iteration: vector sizes do not match weight " + shape_str(w.shape()));
  const auto& kern = simd::kernels<T>();
  // v <- normalize(W^T u)
  std::fill(v.vec().begin(), v.vec().end(), T(0));
  for (int r = 0; r < rows; ++r) kern.axpy(u[r], w.ptr() + static_cast<std::size_t>(r) * cols, v.ptr(), cols);
  T nv = std::sqrt(kern.dot(v.ptr(), v.ptr(), cols));
  nv = std::max(nv, T(1e-12));
  for (auto& e : v.vec()) e /= nv;
  // u <- normalize(W v)
  for (int r = 0; r < rows; ++r) u[r] = kern.dot(w.ptr() + static_cast<std::size_t>(r) * cols, v.ptr(), cols);
  T nu = std::sqrt(kern.dot(u.ptr(), u.ptr(), rows));
  nu = std::max(nu, T(1e-12));
  for (auto& e : u.vec()) e /= nu;
  T sigma = 0;
  for (int r = 0; r < rows; ++r) sigma += u[r] * kern.dot(w.ptr() + static_cast<std::size_t>(r) * cols, v.ptr(), cols);
  return sigma;
}

template <typename T>
Var<T> class_projection(const Var<T>& h, const Var<T>& emb, std::span<const int> class_ids) {
  require_rank(h, 4, "class_projection");
  const int b = h.dim(0), c = h.dim(1);
  const std::size_t hw = static_cast<std::size_t>(h.dim(2)) * h.dim(3);
  const int classes = emb.dim(0);
  require<T>(emb.size() == static_cast<std::size_t>(classes) * c, "class_projection: embedding width mismatch");
  require<T>(class_ids.size() == static_cast<std::size_t>(b), "class_projection: one class id per batch item");
  for (int id : class_ids)
    if (id < 0 || id >= classes)
      throw std::out_of_range("class id " + std::to_string(id) + " outside [0, " + std::to_string(classes) + ")");
  const auto& kern = simd::kernels<T>();
  Tensor<T> out({b, 1, h.dim(2), h.dim(3)});
  for (int i = 0; i < b; ++i) {
    const T* e = emb.value().ptr() + static_cast<std::size_t>(class_ids[i]) * c;
    T* o = out.ptr() + static_cast<std::size_t>(i) * hw;
    for (int ch = 0; ch < c; ++ch)
      kern.axpy(e[ch], h.value().ptr() + (static_cast<std::size_t>(i) * c + ch) * hw, o, hw);
  }
  std::vector<int> ids(class_ids.begin(), class_ids.end());
  return ag::make_result<T>(std::move(out), {h, emb}, [ids = std::move(ids), b, c, hw](Node<T>& n) {
    const auto& kern = simd::kernels<T>();
    const auto& hv = n.inputs[0]->value;
    const auto& ev = n.inputs[1]->value;
    for (int i = 0; i < b; ++i) {
      const T* go = n.grad.ptr() + static_cast<std::size_t>(i) * hw;
      const std::size_t erow = static_cast<std::size_t>(ids[i]) * c;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
        if (wants(n, 0)) kern.axpy(ev[erow + ch], go, grad_of(n, 0).ptr() + off, hw);
        if (wants(n, 1)) grad_of(n, 1)[erow + ch] += kern.dot(go, hv.ptr() + off, hw);
      }
    }
  });
}

template <typename T>
std::vector<int> argmax_channels(const Tensor<T>& logits) {
  const int b = logits.dim(0), l = logits.dim(1);
  const int hw = logits.rank() == 4 ? logits.dim(2) * logits.dim(3) : 1;
  std::vector<int> out(static_cast<std::size_t>(b) * hw);
  for (int i = 0; i < b; ++i)
    for (int p = 0; p < hw; ++p) {
      int best = 0;
      T bv = logits[(static_cast<std::size_t>(i) * l) * hw + p];
      for (int c = 1; c < l; ++c) {
        const T v = logits[(static_cast<std::size_t>(i) * l + c) * hw + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[static_cast<std::size_t>(i) * hw + p] = best;
    }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({b, c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int p = 0; p < b * c; ++p) {
    const T* s = x.ptr() + static_cast<std::size_t>(p) * h * w;
    T* d = out.ptr() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double ty = fy - y0;
      for (int xx = 0; xx < out_w; ++xx) {
        const double fx = std::clamp((xx + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double tx = fx - x0;
        const double top = (1 - tx) * s[y0 * w + x0] + tx * s[y0 * w + x1];
        const double bot = (1 - tx) * s[y1 * w + x0] + tx * s[y1 * w + x1];
        d[y * out_w + xx] = static_cast<T>((1 - ty) * top + ty * bot);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

#define FSIT_INSTANTIATE_OPS(T)                                                                       \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                   \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> scale<T>(const Var<T>&, T);                                                         \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                                    \
  template Var<T> relu<T>(const Var<T>&);                                                             \
  template Var<T> leaky_relu<T>(const Var<T>&, T);                                                    \
  template Var<T> tanh<T>(const Var<T>&);                                                             \
  template Var<T> instance_norm<T>(const Var<T>&, T);                                                 \
  template Var<T> channel_affine<T>(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> adain<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                           \
  template Var<T> avg_pool2<T>(const Var<T>&);                                                        \
  template Var<T> upsample2<T>(const Var<T>&);                                                        \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                                  \
  template Var<T> concat_cols<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> broadcast_rows<T>(const Var<T>&, int);                                              \
  template Var<T> columns<T>(const Var<T>&, int, int);                                                \
  template Var<T> group_mean<T>(const Var<T>&, int);                                                  \
  template Var<T> mean_all<T>(const Var<T>&);                                                         \
  template Var<T> l1_mean<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> hinge_d<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> hinge_g<T>(const Var<T>&);                                                          \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);                              \
  template Var<T> spectral_normalized<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Var<T> class_projection<T>(const Var<T>&, const Var<T>&, std::span<const int>);            \
  template T power_iteration<T>(const Tensor<T>&, Tensor<T>&, Tensor<T>&);                            \
  template std::vector<int> argmax_channels<T>(const Tensor<T>&);                                     \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int, int);

FSIT_INSTANTIATE_OPS(float)
FSIT_INSTANTIATE_OPS(double)

#undef FSIT_INSTANTIATE_OPS

}  // namespace fsit::ops
