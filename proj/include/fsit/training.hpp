#pragma once

// Losses, Adam, the EMA generator and the episodic training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsit/archive.hpp"
#include "fsit/nets.hpp"
#include "fsit/synthdata.hpp"

namespace fsit {

struct TrainConfig {
  double lambda_r = 0.1;
  double lambda_f = 1.0;
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_weight = 0.001;
  int batch = 16;
  int iterations = 20000;
  int k_shot = 1;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  /// Held-out reconstruction is measured at these multiples (0 = start and end only).
  int heldout_every = 0;
  int heldout_per_class = 8;
  double divergence_threshold = 1e4;

  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossBreakdown {
  double gan_d = 0, gan_g = 0, recon = 0, fm = 0, total_g = 0;
  bool all_finite() const;
  bool operator==(const LossBreakdown&) const = default;
};

// Loss terms. All reduce by mean and return shape {1}.
template <typename T>
Var<T> hinge_d_loss(const Var<T>& real_logits, const Var<T>& fake_logits);
template <typename T>
Var<T> hinge_g_loss(const Var<T>& fake_logits);
template <typename T>
Var<T> recon_loss(const Var<T>& x, const Var<T>& x_rec);
/// Mean absolute difference of pooled discriminator features.
template <typename T>
Var<T> fm_loss(const Var<T>& real_features, const Var<T>& fake_features);

/// avg <- (1 - w) avg + w live for every `prefix` parameter of `live`.
/// Throws std::invalid_argument on name or shape mismatch.
template <typename T>
void ema_update(ParameterStore<T>& avg, const ParameterStore<T>& live, double w, std::string_view prefix = kGenPrefix);

/// Inputs of one step in the model's precision.
template <typename T>
struct StepInputs {
  Tensor<T> content;
  std::vector<Tensor<T>> styles;  // k shots, each shaped like content
  std::vector<int> style_class;
};

StepInputs<float> step_inputs(const Episode& ep);

template <typename T>
struct Translation {
  Var<T> content_code;
  Var<T> fake;  // G(x_c, {x_s}) with graph
};

template <typename T>
struct GeneratorTerms {
  Var<T> gan_g, recon, fm, total;
};

template <typename T>
Translation<T> translate_inputs(const Generator<T>& gen, const StepInputs<T>& in);
/// Hinge loss on the first style shot (real) versus the translation (fake).
template <typename T>
Var<T> discriminator_loss(const Discriminator<T>& dis, const StepInputs<T>& in, const Var<T>& fake);
/// gan_g + lambda_r recon + lambda_f fm; recon uses G(x_c, x_c).
template <typename T>
GeneratorTerms<T> generator_losses(const Model<T>& model, const StepInputs<T>& in, const Translation<T>& tr,
                                   const TrainConfig& cfg);

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates every trainable `prefix` parameter that received a gradient.
  void step(ParameterStore<float>& params, std::string_view prefix);
  long steps() const { return steps_; }

  void save(TensorArchive& ar, const std::string& tag) const;
  void load(const TensorArchive& ar, const std::string& tag);

 private:
  double lr_ = 1e-4, beta1_ = 0.0, beta2_ = 0.999, eps_ = 1e-8;
  long steps_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

class Trainer {
 public:
  Trainer(const ModelConfig& model_config, const TrainConfig& train_config);

  /// One D step, one G step, one EMA update. Throws DivergenceError (after
  /// the parameters were updated) when a loss is non-finite or exceeds the threshold.
  LossBreakdown train_step(const Episode& episode);

  int iteration() const { return iteration_; }
  Rng& episode_rng() { return rng_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  const ParameterStore<float>& ema() const { return ema_; }
  ParameterStore<float>& ema() { return ema_; }
  const TrainConfig& train_config() const { return train_config_; }

  void save(const std::filesystem::path& path) const;
  /// Restores parameters, EMA, optimizer state, iteration and the episode
  /// stream. Throws ConfigError when the checkpoint's model config differs.
  void load(const std::filesystem::path& path);
  /// Builds a trainer from the configs stored in a checkpoint.
  static Trainer from_checkpoint(const std::filesystem::path& path);

 private:
  ModelConfig model_config_;
  TrainConfig train_config_;
  Model<float> model_;
  ParameterStore<float> ema_;
  Adam adam_g_, adam_d_;
  Rng rng_;
  int iteration_ = 0;
};

nlohmann::json checkpoint_metadata(const std::filesystem::path& path);

/// Generator parameters of a checkpoint (EMA copy by default) bound to a fresh generator.
struct FrozenGenerator {
  ModelConfig config;
  ParameterStore<float> params;
  Generator<float> gen;
};
FrozenGenerator load_generator(const std::filesystem::path& checkpoint, bool use_ema = true);

/// Mean L1 of G(x, x) against x over the trailing held-out samples of each seen class.
double heldout_recon_l1(const Generator<float>& gen, const ImageBank& bank, int per_class, int batch = 16);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  /// Called after every logged step.
  std::function<void(int, const LossBreakdown&)> on_step;
};

struct RunSummary {
  int iterations = 0;
  LossBreakdown last;
  std::filesystem::path final_checkpoint;
  double heldout_start = 0, heldout_end = 0;  // EMA generator
};

inline constexpr const char* kLossLogName = "loss_log.csv";
inline constexpr const char* kHeldoutLogName = "heldout_recon.csv";

/// Trains up to cfg.iterations, appending to <out>/loss_log.csv and writing
/// <out>/checkpoints/iter_<n>.fsit every checkpoint_every iterations and
/// <out>/final.fsit at the end.
RunSummary run_training(const ImageBank& bank, Trainer& trainer, const RunOptions& opts);

}  // namespace fsit
