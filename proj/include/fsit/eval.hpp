#pragma once

// Automatic metrics: mFID over probe-classifier features, part-mask PAcc and
// mIoU from a probe segmenter, and crop-induced style-code variance.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fsit/errors.hpp"
#include "fsit/nets.hpp"
#include "fsit/synthdata.hpp"

namespace fsit {

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int count = 0;
};

/// Mean and unbiased covariance of the rows of `features`. Rows are put in a
/// canonical order first, so the result is independent of sample order.
/// Throws std::invalid_argument for fewer than 2 rows.
GaussianStats fit_gaussian(const Eigen::MatrixXd& features);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), negative
/// eigenvalues clipped at 0. Throws std::invalid_argument on a dimension
/// mismatch or non-finite statistics.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

struct MfidResult {
  std::map<int, double> per_class;
  double mfid = 0;
};

double mean_fid(const std::map<int, double>& per_class);
/// Per-class Frechet distances between real and fake features and their mean.
/// Both maps must hold the same classes with >= 2 rows each.
MfidResult mfid(const std::map<int, Eigen::MatrixXd>& real, const std::map<int, Eigen::MatrixXd>& fake);

struct SegScore {
  double pacc = 0;
  double miou = 0;
};

/// Accumulates a confusion matrix over any number of mask pairs.
class SegmentationCounter {
 public:
  explicit SegmentationCounter(int n_labels = kNumLabels);
  /// Throws std::invalid_argument on a size mismatch or a label >= n_labels.
  void add(std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred);
  /// PAcc over all pixels; mIoU averaged over labels present in gt or pred.
  SegScore score() const;
  std::uint64_t pixels() const { return total_; }

 private:
  int n_labels_;
  std::vector<std::uint64_t> confusion_;  // [gt * n + pred]
  std::uint64_t total_ = 0;
};

SegScore pacc_miou(std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred, int n_labels = kNumLabels);

// -- probes -------------------------------------------------------------------

inline constexpr int kProbeFeatureDim = 64;
inline constexpr double kSegmenterGate = 0.90;
inline constexpr double kClassifierGate = 0.95;

struct ProbeConfig {
  int segmenter_iters = 300;
  int classifier_iters = 300;
  int batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct ProbeQuality {
  double segmenter_pixel_acc = 0;
  double classifier_top1 = 0;
  int heldout_samples = 0;

  bool passes() const { return segmenter_pixel_acc >= kSegmenterGate && classifier_top1 >= kClassifierGate; }
};

/// Thrown when probes miss their quality gates; metrics are not reported.
class ProbeGateError : public DataError {
 public:
  using DataError::DataError;
};

/// Small segmenter and classifier trained on the seen training split.
class ProbeModels {
 public:
  ProbeModels(int resolution, int num_classes, std::uint64_t seed);
  ProbeModels(ProbeModels&&) noexcept = default;

  /// Trains both probes on the training samples of every seen class and
  /// measures them on the held-out samples.
  static ProbeModels train(const ImageBank& bank, const ProbeConfig& config, std::ostream* log = nullptr);
  static ProbeModels load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Per-pixel labels, (B*H*W) row-major.
  std::vector<std::uint8_t> segment(const Tensor<float>& images) const;
  /// (B, 64) penultimate classifier activations.
  Eigen::MatrixXd features(const Tensor<float>& images) const;
  std::vector<int> classify(const Tensor<float>& images) const;

  const ProbeQuality& quality() const { return quality_; }
  /// Hash of every probe parameter.
  std::string identifier() const;
  int resolution() const { return resolution_; }
  int num_classes() const { return num_classes_; }

 private:
  void bind(Rng* rng);
  Var<float> segmenter_logits(const Var<float>& x) const;
  Var<float> classifier_features(const Var<float>& x) const;

  int resolution_ = 0;
  int num_classes_ = 0;
  ParameterStore<float> params_;
  Conv<float> s1_, s2_, s3_, s4_, s5_, s6_, s_out_;
  Conv<float> k1_, k2_, k3_, k4_;
  Dense<float> k_head_;
  ProbeQuality quality_;
  ProbeConfig config_;
};

/// Segmenter pixel accuracy and classifier top-1 on the held-out seen samples.
ProbeQuality measure_probes(const ProbeModels& probes, const ImageBank& bank);

/// Loads probes from `path` when it exists, otherwise trains and saves them.
ProbeModels obtain_probes(const std::filesystem::path& path, const ImageBank& bank, const ProbeConfig& config,
                          std::ostream* log = nullptr);

// -- translation metrics ------------------------------------------------------

/// Maps a content batch and a one-shot style batch to translations.
using Translator = std::function<Tensor<float>(const Tensor<float>& content, const Tensor<float>& style)>;

Translator generator_translator(const Generator<float>& gen);

struct EvalConfig {
  /// Translations per unseen class; contents are drawn from the held-out seen
  /// samples and the unseen samples, styles from that unseen class.
  int per_class = 100;
  int batch = 16;
  int variance_pairs = 4;
  int variance_crops = 16;
  int variance_population = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

struct TranslationMetrics {
  MfidResult fid;
  SegScore content;
  int translations = 0;
};

/// mFID over unseen classes and content preservation of the same translations.
TranslationMetrics translation_metrics(const Translator& translate, const ImageBank& bank, const ProbeModels& probes,
                                       const EvalConfig& config);
/// Content preservation only (gt = content masks, pred = segmented translations).
SegScore content_preservation(const Translator& translate, const ImageBank& bank, const ProbeModels& probes,
                              const EvalConfig& config);

// -- style variance -----------------------------------------------------------

struct CropConfig {
  double min_area = 0.6;
  double max_area = 0.9;
  double aspect_jitter = 0.1;

  /// Throws ConfigError when crops could fall below 60% of the image.
  void validate() const;
};

/// Random crop of every item of `image` resized back to its resolution.
Tensor<float> random_crop(const Tensor<float>& image, const CropConfig& crop, Rng& rng);

/// Per-dimension mean |code| over style codes of `population` images, all
/// conditioned on `content` (1,3,H,W).
Tensor<float> style_code_scale(const Generator<float>& gen, const Tensor<float>& population,
                               const Tensor<float>& content, int batch = 16);

/// L2 deviation of each normalized crop code from the crop-set mean.
/// `style` and `content` are (1,3,H,W); `scale` comes from style_code_scale.
/// Throws std::invalid_argument for n_crops < 2.
std::vector<double> style_variance_analysis(const Generator<float>& gen, const Tensor<float>& style,
                                            const Tensor<float>& content, int n_crops, const Tensor<float>& scale,
                                            Rng& rng, const CropConfig& crop = {});

struct StyleVarianceStudy {
  std::vector<std::vector<double>> deviations;  // [pair][crop]
  std::vector<std::pair<int, int>> styles, contents;  // (class, index)
  double median = 0;  // over all deviations
};

/// Pairs an unseen-class style image with a held-out content image, using a
/// population of >= 100 images from the unseen and held-out seen samples.
StyleVarianceStudy style_variance_study(const Generator<float>& gen, const ImageBank& bank, int pairs, int n_crops,
                                        int population, std::uint64_t seed, const CropConfig& crop = {});

double median(std::vector<double> v);

/// pair,crop,deviation rows.
std::string deviation_table(const StyleVarianceStudy& study);

// -- report -------------------------------------------------------------------

struct MetricsReport {
  MfidResult fid;
  SegScore content;
  StyleVarianceStudy variance;
  int translations = 0;
  ProbeQuality probe_quality;
  std::string probe_id;
  nlohmann::json run;  // checkpoint, variant, configs

  nlohmann::json to_json() const;
  /// pair,crop,deviation
  std::string deviation_csv() const;
};

/// Refuses (ProbeGateError) when the probes miss their gates.
MetricsReport evaluate(const Generator<float>& gen, const ImageBank& bank, const ProbeModels& probes,
                       const EvalConfig& config);

}  // namespace fsit
