#pragma once

// Central finite-difference oracle for double-precision graphs. Independent
// of the reverse-mode path: it only ever calls the forward function.
// Entries whose +-step stencil changes the branch of any piecewise-linear op
// are not differentiable over the stencil; they are skipped and replaced by
// another entry of the same tensor.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fsit/autograd.hpp"
#include "fsit/ops.hpp"
#include "fsit/rng.hpp"

namespace fsit::testing {

struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // stencils crossing a kink
};

/// Relative error |a - n| / max(|a| + |n|, floor); the floor keeps
/// near-zero gradients from dominating.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

/// Checks d loss / d p for every entry of each tensor in `params` (or a
/// deterministic random subset of `max_per_param` entries).
inline GradCheckResult grad_check(const std::function<ag::Var<double>()>& loss_fn,
                                  std::vector<std::pair<std::string, ag::Var<double>>> params,
                                  double step = 1e-4, std::size_t max_per_param = 0,
                                  std::uint64_t seed = 1) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    auto loss = loss_fn();
    ag::backward(loss);
  }
  GradCheckResult result;
  auto eval = [&](std::uint64_t& branches) {
    ops::BranchRecorder rec;
    ops::BranchScope scope(rec);
    const double v = loss_fn().value()[0];
    branches = rec.hash;
    return v;
  };
  std::uint64_t base_branches = 0;
  eval(base_branches);
  Rng rng(seed);
  for (auto& [name, p] : params) {
    const Tensor<double> analytic = p.grad().empty() ? Tensor<double>(p.shape()) : p.grad();
    std::vector<std::size_t> idx(p.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < idx.size(); ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    const std::size_t want = max_per_param ? std::min(max_per_param, idx.size()) : idx.size();
    std::size_t done = 0;
    for (std::size_t j = 0; j < idx.size() && done < want; ++j) {
      const std::size_t i = idx[j];
      double& x = p.mutable_value()[i];
      const double saved = x;
      std::uint64_t bp = 0, bm = 0;
      x = saved + step;
      const double fp = eval(bp);
      x = saved - step;
      const double fm = eval(bm);
      x = saved;
      if (bp != base_branches || bm != base_branches) {
        ++result.skipped;
        continue;
      }
      ++done;
      const double numeric = (fp - fm) / (2 * step);
      const double rel = rel_error(analytic[i], numeric);
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[i]) +
                       " numeric=" + std::to_string(numeric);
      }
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

}  // namespace fsit::testing
