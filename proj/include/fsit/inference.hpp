#pragma once

// Frozen-generator utilities: k-shot translation, style-code extraction,
// style interpolation and CSB amplification sweeps. None of them record a
// graph or touch the parameter store.

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "fsit/image_io.hpp"
#include "fsit/nets.hpp"

namespace fsit {

/// Style code (B, D_z) of the k style batches conditioned on `content`.
/// Throws std::invalid_argument for an empty list.
Tensor<float> extract_style_code(const Generator<float>& gen, std::span<const Tensor<float>> styles,
                                 const Tensor<float>& content, float lambda = 1.0f);

/// (1 - alpha) z1 + alpha z2; the endpoints return z1 / z2 exactly.
/// Throws std::invalid_argument for alpha outside [0, 1] or a shape mismatch.
Tensor<float> interpolate_styles(const Tensor<float>& z1, const Tensor<float>& z2, double alpha);

Tensor<float> translate_images(const Generator<float>& gen, const Tensor<float>& content,
                               std::span<const Tensor<float>> styles, float lambda = 1.0f);
/// Decodes `content` with a precomputed style code.
Tensor<float> decode_with_code(const Generator<float>& gen, const Tensor<float>& content, const Tensor<float>& code);

/// One translation per lambda with everything else fixed. Throws
/// std::invalid_argument for an empty or non-finite list.
std::vector<Tensor<float>> csb_sweep(const Generator<float>& gen, const Tensor<float>& content,
                                     const Tensor<float>& style, std::span<const double> lambdas);

struct BlendRequest {
  Tensor<float> content;
  Tensor<float> style_a;
  Tensor<float> style_b;
  std::vector<double> alphas;  // sorted, within [0, 1]
  double lambda = 1.0;

  /// Throws std::invalid_argument.
  void validate() const;
};

/// One output per alpha, decoded from interpolated codes that share the content.
std::vector<Tensor<float>> blend(const Generator<float>& gen, const BlendRequest& request);

/// Writes `grid` as PNG and `record` as pretty JSON next to it (<png>.json).
void write_grid(const std::filesystem::path& png, const Image8& grid, const nlohmann::json& record);

}  // namespace fsit
