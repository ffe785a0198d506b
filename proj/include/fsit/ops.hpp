#pragma once

#include <cstdint>

// Differentiable tensor operations. Images are NCHW, vectors are (batch, dim).
// Implementations are explicitly instantiated for float and double.

#include <span>
#include <vector>

#include "fsit/autograd.hpp"

namespace fsit::ops {

using ag::Var;

inline constexpr double kNormEps = 1e-5;

/// Fingerprint of the branch taken by every piecewise-linear op (relu, leaky
/// relu, the |.| of l1_mean, hinge margins) while a BranchScope is active.
/// Finite-difference checks use it to reject stencils that cross a kink.
struct BranchRecorder {
  std::uint64_t hash = 14695981039346656037ull;
  std::size_t count = 0;
  void record(int branch) {
    hash = (hash ^ static_cast<std::uint64_t>(branch + 2)) * 1099511628211ull;
    ++count;
  }
};

BranchRecorder* branch_recorder();

class BranchScope {
 public:
  explicit BranchScope(BranchRecorder& r);
  ~BranchScope();
  BranchScope(const BranchScope&) = delete;
  BranchScope& operator=(const BranchScope&) = delete;

 private:
  BranchRecorder* prev_;
};

// -- convolution / dense ----------------------------------------------------

/// 2-D cross-correlation with square kernel and zero padding.
/// x (B,Ci,H,W), w (Co,Ci,K,K), bias (Co) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad);

/// x (B,I), w (O,I), bias (O) or undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

// -- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
template <typename T>
Var<T> add_scalar(const Var<T>& a, T s);
template <typename T>
Var<T> relu(const Var<T>& a);
template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope);
template <typename T>
Var<T> tanh(const Var<T>& a);

// -- normalization ----------------------------------------------------------

/// Per-sample, per-channel spatial standardization (population variance).
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(kNormEps));

/// y[b,c] = gamma[b,c] * x[b,c] + beta[b,c]; gamma/beta are (B,C).
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

/// Adaptive instance normalization with explicit per-sample (gamma, beta).
template <typename T>
Var<T> adain(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(kNormEps));

// -- spatial ----------------------------------------------------------------

template <typename T>
Var<T> avg_pool2(const Var<T>& x);
template <typename T>
Var<T> upsample2(const Var<T>& x);
/// (B,C,H,W) -> (B,C)
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

// -- vector plumbing --------------------------------------------------------

/// (B,I) ++ (B,J) -> (B,I+J)
template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b);
/// (D) or (1,D) tiled to (B,D)
template <typename T>
Var<T> broadcast_rows(const Var<T>& v, int batch);
/// Columns [start, start+len) of (B,N).
template <typename T>
Var<T> columns(const Var<T>& x, int start, int len);
/// (B*k, ...) -> (B, ...): mean of each run of k consecutive rows. The sum is
/// taken over sorted values so the result does not depend on row order.
template <typename T>
Var<T> group_mean(const Var<T>& x, int k);

// -- reductions and losses ----------------------------------------------------

/// Mean of all elements, shape (1).
template <typename T>
Var<T> mean_all(const Var<T>& x);
/// mean |a - b|
template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b);
/// mean(max(0, 1 - real)) + mean(max(0, 1 + fake)); both means over patches and batch.
template <typename T>
Var<T> hinge_d(const Var<T>& real_logits, const Var<T>& fake_logits);
/// mean(-fake)
template <typename T>
Var<T> hinge_g(const Var<T>& fake_logits);
/// Softmax cross-entropy averaged over batch and spatial positions.
/// logits (B,L) or (B,L,H,W); labels has B (or B*H*W) entries in [0, L).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);

// -- discriminator-specific ---------------------------------------------------

/// W / sigma with sigma = u^T W v, treating (u, v) as constants.
/// w is viewed as (rows = dim0, cols = rest).
template <typename T>
Var<T> spectral_normalized(const Var<T>& w, const Tensor<T>& u, const Tensor<T>& v);

/// out[b,0,p] = <emb[class_ids[b]], h[b,:,p]>; h (B,C,H,W), emb (S,C,...) .
template <typename T>
Var<T> class_projection(const Var<T>& h, const Var<T>& emb, std::span<const int> class_ids);

// -- non-differentiable helpers ---------------------------------------------

/// One power-iteration step on the (rows x cols) view of w; updates u and v
/// in place and returns sigma = u^T W v.
template <typename T>
T power_iteration(const Tensor<T>& w, Tensor<T>& u, Tensor<T>& v);

/// Argmax over dim 1 of (B,L) or (B,L,H,W) logits.
template <typename T>
std::vector<int> argmax_channels(const Tensor<T>& logits);

/// Bilinear resize of (B,C,H,W) to (B,C,out_h,out_w) with half-pixel centers.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);

}  // namespace fsit::ops
