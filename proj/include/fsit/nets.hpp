#pragma once

// Translator G = (content encoder, style sub-encoder, COCO combiner,
// AdaIN parameter map, decoder) and the patch projection discriminator D.
// Parameters live in a ParameterStore keyed by name ("gen.*", "dis.*");
// networks bind to a store by name, so the same architecture can run on
// live or averaged weights.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fsit/autograd.hpp"
#include "fsit/errors.hpp"
#include "fsit/rng.hpp"
#include "fsit/tensor.hpp"

namespace fsit {

using ag::Var;

enum class Variant { Full, NoCC, NoCSB, NoCoco };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct ModelConfig {
  Variant variant = Variant::Full;
  int resolution = 64;
  int num_classes = 20;
  std::uint64_t seed = 0;

  int content_stem = 32;
  std::vector<int> content_widths{64, 128, 128};
  int style_stem = 32;
  std::vector<int> style_widths{64, 128, 128, 128};
  int style_dim = 128;  // D_z
  int csb_dim = 64;     // D_b
  int decoder_res_blocks = 2;
  std::vector<int> decoder_widths{64, 32, 16};
  int dis_stem = 32;
  std::vector<int> dis_widths{64, 128, 128};

  /// 8x8 instance with widths <= 8, used for finite-difference checks.
  static ModelConfig miniature(Variant variant = Variant::Full);

  /// Throws ConfigError.
  void validate() const;

  int content_channels() const { return content_widths.back(); }
  int style_vector_dim() const { return style_widths.back(); }
  int content_downsamples() const { return static_cast<int>(content_widths.size()); }
  bool has_content_conditioning() const { return variant == Variant::Full || variant == Variant::NoCSB; }
  bool has_csb() const { return variant == Variant::Full || variant == Variant::NoCC; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Named tensors for every learnable parameter and persistent buffer.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    Var<T> var;
    bool trainable = true;
  };

  ParameterStore() = default;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  /// Returns the named entry, creating it with `init` (given a zero tensor of
  /// `shape`) when absent. An existing entry must match `shape`.
  Var<T> parameter(const std::string& name, const Shape& shape, const std::function<void(Tensor<T>&)>& init);
  Var<T> buffer(const std::string& name, const Shape& shape, const std::function<void(Tensor<T>&)>& init);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  Var<T> get(const std::string& name) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::vector<std::string> names(std::string_view prefix = "", bool trainable_only = false) const;
  std::size_t parameter_count(std::string_view prefix = "") const;

  /// Deep copy of the matching entries; copies never require gradients.
  ParameterStore clone(std::string_view prefix = "") const;
  /// Copies values for every matching name; names and shapes must agree.
  void assign_from(const ParameterStore& other, std::string_view prefix = "");

  void set_trainable(std::string_view prefix, bool on);
  void zero_grad(std::string_view prefix = "");
  bool all_finite() const;

 private:
  Var<T> add(const std::string& name, const Shape& shape, const std::function<void(Tensor<T>&)>& init, bool trainable);
  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Conv {
  Var<T> weight, bias;
  int stride = 1, pad = 0;
  Var<T> operator()(const Var<T>& x) const;
};

template <typename T>
struct Dense {
  Var<T> weight, bias;
  Var<T> operator()(const Var<T>& x) const;
};

/// Fan-in scaled Gaussian weights and zero biases registered under
/// `name`.w / `name`.b. A null rng requires the entries to exist already.
template <typename T>
Conv<T> make_conv(ParameterStore<T>& store, Rng* rng, const std::string& name, int in, int out, int k, int stride,
                  int pad, bool bias = true);
template <typename T>
Dense<T> make_dense(ParameterStore<T>& store, Rng* rng, const std::string& name, int in, int out);

/// Convolution whose weight is divided by its spectral-norm estimate.
template <typename T>
struct SnConv {
  Var<T> weight, bias, u, v;
  int stride = 1, pad = 0;
  Tensor<T> normalized_weight() const;
  Var<T> operator()(const Var<T>& x) const;
  void power_iterate();
};

template <typename T>
struct AdainLayerParams {
  Var<T> gamma;  // (B, C), already offset by +1
  Var<T> beta;   // (B, C)
};

template <typename T>
using AdainParamSet = std::vector<AdainLayerParams<T>>;

/// Optional instrumentation applied to the style feature map before pooling.
template <typename T>
using FeatureHook = std::function<Var<T>(const Var<T>&)>;

// ---------------------------------------------------------------------------

template <typename T>
class Generator {
 public:
  Generator() = default;
  /// Binds to `store`, creating missing parameters from `init_rng`. With a
  /// null `init_rng` every parameter must already exist.
  Generator(const ModelConfig& config, ParameterStore<T>& store, Rng* init_rng);

  const ModelConfig& config() const { return config_; }

  Var<T> content_encode(const Var<T>& x) const;
  Var<T> style_feature_map(const Var<T>& x) const;
  Var<T> style_feature(const Var<T>& x, const FeatureHook<T>& hook = {}) const;
  /// Style code from a StyleVector and a ContentCode; `lambda` scales the CSB.
  /// Variants without content conditioning ignore `content_code`.
  Var<T> coco_combine(const Var<T>& style_vector, const Var<T>& content_code, T lambda) const;
  AdainParamSet<T> adain_params(const Var<T>& style_code) const;
  Var<T> decode(const Var<T>& content_code, const AdainParamSet<T>& params) const;

  /// Average StyleVector over k style batches (each shaped like `content`).
  Var<T> average_style_vector(std::span<const Tensor<T>> styles) const;
  Var<T> style_code(const Var<T>& content_code, std::span<const Tensor<T>> styles, T lambda) const;
  Var<T> translate(const Tensor<T>& content, std::span<const Tensor<T>> styles, T lambda) const;
  /// One-shot G(x_c, x_s) reusing an already computed content code.
  Var<T> translate_with_code(const Var<T>& content_code, const Var<T>& style, T lambda) const;

  const Var<T>& csb() const { return csb_; }
  int adain_channel_total() const;

  /// Direct access for instrumented tests.
  Dense<T>& zeta_s_map() { return zeta_s_; }
  Dense<T>& zeta_c_map() { return zeta_c_; }

 private:
  struct ResDown {
    Conv<T> conv1, conv2, skip;
  };
  struct AdainRes {
    Conv<T> conv1, conv2;
  };
  struct AdainUp {
    Conv<T> conv1, conv2, skip;
  };

  ModelConfig config_;
  Conv<T> content_stem_;
  std::vector<ResDown> content_blocks_;
  Conv<T> style_stem_;
  std::vector<Conv<T>> style_downs_;
  Var<T> csb_;
  Dense<T> zeta_c_;
  Dense<T> zeta_s_;
  Dense<T> adain_map_;
  std::vector<AdainRes> res_blocks_;
  std::vector<AdainUp> up_blocks_;
  Conv<T> out_conv_;
  std::vector<int> adain_channels_;
};

template <typename T>
struct DiscOutput {
  Var<T> logits;    // (B,1,h,w) per-patch
  Var<T> features;  // (B,C) spatially pooled hidden
  Var<T> hidden;    // (B,C,h,w)
};

template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const ModelConfig& config, ParameterStore<T>& store, Rng* init_rng);

  Var<T> hidden(const Var<T>& x) const;
  DiscOutput<T> forward(const Var<T>& x, std::span<const int> class_ids) const;
  Var<T> discriminate(const Var<T>& x, std::span<const int> class_ids) const;
  Var<T> disc_features(const Var<T>& x) const;

  /// One power-iteration step on every spectrally normalized layer.
  void power_iterate();
  /// Spectrally normalized class embedding, (S, C).
  Tensor<T> effective_class_embedding() const;
  int hidden_width() const { return hidden_width_; }

 private:
  struct ResBlk {
    SnConv<T> conv1, conv2, skip;
    bool learned_skip = false;
  };
  std::vector<SnConv<T>*> layers();

  ModelConfig config_;
  SnConv<T> stem_;
  std::vector<ResBlk> blocks_;
  SnConv<T> head_;
  SnConv<T> class_embed_;
  int hidden_width_ = 0;
};

template <typename T>
struct Model {
  ModelConfig config;
  ParameterStore<T> params;
  Generator<T> gen;
  Discriminator<T> dis;
};

/// Validates `config` and initializes every parameter from config.seed.
template <typename T>
Model<T> build_model(const ModelConfig& config);

inline constexpr const char* kGenPrefix = "gen.";
inline constexpr const char* kDisPrefix = "dis.";
inline constexpr double kLeakySlope = 0.2;

}  // namespace fsit
