#include "fsit/inference.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "fsit/errors.hpp"

namespace fsit {

Tensor<float> extract_style_code(const Generator<float>& gen, std::span<const Tensor<float>> styles,
                                 const Tensor<float>& content, float lambda) {
  if (styles.empty()) throw std::invalid_argument("extract_style_code: empty style list");
  ag::NoGradGuard guard;
  const Var<float> zc = gen.content_encode(Var<float>(content));
  return gen.style_code(zc, styles, lambda).value();
}

Tensor<float> interpolate_styles(const Tensor<float>& z1, const Tensor<float>& z2, double alpha) {
  if (z1.shape() != z2.shape())
    throw std::invalid_argument("interpolate_styles: " + shape_str(z1.shape()) + " vs " + shape_str(z2.shape()));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("interpolate_styles: alpha must lie in [0, 1]");
  if (alpha == 0.0) return z1;
  if (alpha == 1.0) return z2;
  Tensor<float> out(z1.shape());
  const float a = static_cast<float>(alpha), b = static_cast<float>(1.0 - alpha);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = b * z1[i] + a * z2[i];
  return out;
}

Tensor<float> translate_images(const Generator<float>& gen, const Tensor<float>& content,
                               std::span<const Tensor<float>> styles, float lambda) {
  ag::NoGradGuard guard;
  return gen.translate(content, styles, lambda).value();
}

Tensor<float> decode_with_code(const Generator<float>& gen, const Tensor<float>& content, const Tensor<float>& code) {
  ag::NoGradGuard guard;
  const Var<float> zc = gen.content_encode(Var<float>(content));
  return gen.decode(zc, gen.adain_params(Var<float>(code))).value();
}

std::vector<Tensor<float>> csb_sweep(const Generator<float>& gen, const Tensor<float>& content,
                                     const Tensor<float>& style, std::span<const double> lambdas) {
  if (lambdas.empty()) throw std::invalid_argument("csb_sweep: empty lambda list");
  for (double l : lambdas)
    if (!std::isfinite(l)) throw std::invalid_argument("csb_sweep: lambda values must be finite");
  std::vector<Tensor<float>> out;
  const std::span<const Tensor<float>> styles(&style, 1);
  for (double l : lambdas) out.push_back(translate_images(gen, content, styles, static_cast<float>(l)));
  return out;
}

void BlendRequest::validate() const {
  if (alphas.empty()) throw std::invalid_argument("blend: empty alpha list");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] >= 0.0 && alphas[i] <= 1.0)) throw std::invalid_argument("blend: alpha outside [0, 1]");
    if (i > 0 && alphas[i] < alphas[i - 1]) throw std::invalid_argument("blend: alphas must be sorted");
  }
  if (!std::isfinite(lambda)) throw std::invalid_argument("blend: lambda must be finite");
  if (style_a.shape() != content.shape() || style_b.shape() != content.shape())
    throw std::invalid_argument("blend: style images must match the content shape");
}

std::vector<Tensor<float>> blend(const Generator<float>& gen, const BlendRequest& request) {
  request.validate();
  ag::NoGradGuard guard;
  const float lambda = static_cast<float>(request.lambda);
  const Var<float> zc = gen.content_encode(Var<float>(request.content));
  const Tensor<float> za = gen.style_code(zc, std::span<const Tensor<float>>(&request.style_a, 1), lambda).value();
  const Tensor<float> zb = gen.style_code(zc, std::span<const Tensor<float>>(&request.style_b, 1), lambda).value();
  std::vector<Tensor<float>> out;
  for (double a : request.alphas)
    out.push_back(gen.decode(zc, gen.adain_params(Var<float>(interpolate_styles(za, zb, a)))).value());
  return out;
}

void write_grid(const std::filesystem::path& png, const Image8& grid, const nlohmann::json& record) {
  if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
  write_png(png, grid);
  std::filesystem::path side = png;
  side += ".json";
  std::ofstream out(side);
  out << record.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + side.string());
}

}  // namespace fsit
