#include "fsit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fsit/archive.hpp"
#include "fsit/inference.hpp"
#include "fsit/json_util.hpp"
#include "fsit/ops.hpp"
#include "fsit/training.hpp"

namespace fsit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Frechet distance

GaussianStats fit_gaussian(const Eigen::MatrixXd& features) {
  const Eigen::Index n = features.rows(), d = features.cols();
  if (n < 2) throw std::invalid_argument("fit_gaussian: at least 2 samples are required");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < d; ++j)
      if (features(a, j) != features(b, j)) return features(a, j) < features(b, j);
    return false;
  });
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = features.row(order[static_cast<std::size_t>(i)]);
  GaussianStats s;
  s.count = static_cast<int>(n);
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  return s;
}

namespace {

// Symmetric PSD square root with negative eigenvalues clipped at 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size() ||
      a.cov.cols() != a.cov.rows() || b.cov.cols() != b.cov.rows())
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite())
    throw std::invalid_argument("frechet_distance: non-finite statistics");
  const Eigen::MatrixXd sa = psd_sqrt(a.cov);
  const Eigen::MatrixXd m = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

double mean_fid(const std::map<int, double>& per_class) {
  if (per_class.empty()) throw std::invalid_argument("mean_fid: no classes");
  double s = 0;
  for (const auto& [id, v] : per_class) s += v;
  return s / static_cast<double>(per_class.size());
}

MfidResult mfid(const std::map<int, Eigen::MatrixXd>& real, const std::map<int, Eigen::MatrixXd>& fake) {
  if (real.empty()) throw std::invalid_argument("mfid: empty class set");
  if (real.size() != fake.size()) throw std::invalid_argument("mfid: real and fake class sets differ");
  MfidResult r;
  for (const auto& [id, rf] : real) {
    auto it = fake.find(id);
    if (it == fake.end()) throw std::invalid_argument("mfid: class " + std::to_string(id) + " has no fake samples");
    if (rf.rows() < 2 || it->second.rows() < 2)
      throw std::invalid_argument("mfid: class " + std::to_string(id) + " needs at least 2 samples per side");
    r.per_class[id] = frechet_distance(fit_gaussian(rf), fit_gaussian(it->second));
  }
  r.mfid = mean_fid(r.per_class);
  return r;
}

// ---------------------------------------------------------------------------
// PAcc / mIoU

SegmentationCounter::SegmentationCounter(int n_labels)
    : n_labels_(n_labels), confusion_(static_cast<std::size_t>(n_labels) * n_labels, 0) {
  if (n_labels < 1) throw std::invalid_argument("SegmentationCounter: n_labels must be positive");
}

void SegmentationCounter::add(std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred) {
  if (gt.size() != pred.size()) throw std::invalid_argument("pacc_miou: mask sizes differ");
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] >= n_labels_ || pred[i] >= n_labels_)
      throw std::invalid_argument("pacc_miou: label " + std::to_string(std::max(gt[i], pred[i])) + " out of range");
  for (std::size_t i = 0; i < gt.size(); ++i) ++confusion_[static_cast<std::size_t>(gt[i]) * n_labels_ + pred[i]];
  total_ += gt.size();
}

SegScore SegmentationCounter::score() const {
  if (total_ == 0) throw std::invalid_argument("pacc_miou: no pixels");
  const auto n = static_cast<std::size_t>(n_labels_);
  std::uint64_t correct = 0;
  double iou_sum = 0;
  int present = 0;
  for (std::size_t l = 0; l < n; ++l) {
    std::uint64_t gt_l = 0, pred_l = 0;
    for (std::size_t j = 0; j < n; ++j) {
      gt_l += confusion_[l * n + j];
      pred_l += confusion_[j * n + l];
    }
    const std::uint64_t inter = confusion_[l * n + l];
    correct += inter;
    const std::uint64_t uni = gt_l + pred_l - inter;
    if (uni == 0) continue;
    iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return {static_cast<double>(correct) / static_cast<double>(total_), present ? iou_sum / present : 0.0};
}

SegScore pacc_miou(std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred, int n_labels) {
  SegmentationCounter c(n_labels);
  c.add(gt, pred);
  return c.score();
}

// ---------------------------------------------------------------------------
// Probes

void ProbeConfig::validate() const {
  if (segmenter_iters < 0 || classifier_iters < 0) throw ConfigError("probe iterations must be non-negative");
  if (batch < 1) throw ConfigError("probe batch must be positive");
  if (!(lr > 0)) throw ConfigError("probe learning rate must be positive");
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"segmenter_iters", c.segmenter_iters}, {"classifier_iters", c.classifier_iters},
       {"batch", c.batch}, {"lr", c.lr}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  jsonutil::require_known(j, "probes", {"segmenter_iters", "classifier_iters", "batch", "lr", "seed"});
  jsonutil::read(j, "segmenter_iters", c.segmenter_iters);
  jsonutil::read(j, "classifier_iters", c.classifier_iters);
  jsonutil::read(j, "batch", c.batch);
  jsonutil::read(j, "lr", c.lr);
  jsonutil::read(j, "seed", c.seed);
}

ProbeModels::ProbeModels(int resolution, int num_classes, std::uint64_t seed)
    : resolution_(resolution), num_classes_(num_classes) {
  if (resolution < 8 || resolution % 8 != 0) throw ConfigError("probe resolution must be a multiple of 8");
  if (num_classes < 2) throw ConfigError("probe classifier needs at least 2 classes");
  Rng rng(derive_seed(seed, 0x9B0));
  bind(&rng);
}

void ProbeModels::bind(Rng* rng) {
  auto& s = params_;
  s1_ = make_conv<float>(s, rng, "seg.c1", 3, 16, 3, 1, 1);
  s2_ = make_conv<float>(s, rng, "seg.c2", 16, 32, 3, 2, 1);
  s3_ = make_conv<float>(s, rng, "seg.c3", 32, 32, 3, 1, 1);
  s4_ = make_conv<float>(s, rng, "seg.c4", 32, 32, 3, 2, 1);
  s5_ = make_conv<float>(s, rng, "seg.c5", 32, 16, 3, 1, 1);
  s6_ = make_conv<float>(s, rng, "seg.c6", 16, 16, 3, 1, 1);
  s_out_ = make_conv<float>(s, rng, "seg.out", 16, kNumLabels, 3, 1, 1);
  k1_ = make_conv<float>(s, rng, "cls.c1", 3, 16, 3, 1, 1);
  k2_ = make_conv<float>(s, rng, "cls.c2", 16, 32, 3, 1, 1);
  k3_ = make_conv<float>(s, rng, "cls.c3", 32, kProbeFeatureDim, 3, 1, 1);
  k4_ = make_conv<float>(s, rng, "cls.c4", kProbeFeatureDim, kProbeFeatureDim, 3, 1, 1);
  k_head_ = make_dense<float>(s, rng, "cls.head", kProbeFeatureDim, num_classes_);
}

// Encoder-decoder with additive skips at 1/2 and full resolution.
Var<float> ProbeModels::segmenter_logits(const Var<float>& x) const {
  const Var<float> h1 = ops::relu(s1_(x));
  const Var<float> h2 = ops::relu(s2_(h1));
  const Var<float> h3 = ops::relu(s3_(h2));
  const Var<float> h4 = ops::relu(s4_(h3));
  const Var<float> u1 = ops::relu(s5_(ops::add(ops::upsample2(h4), h3)));
  const Var<float> u2 = ops::relu(s6_(ops::add(ops::upsample2(u1), h1)));
  return s_out_(u2);
}

Var<float> ProbeModels::classifier_features(const Var<float>& x) const {
  Var<float> h = ops::avg_pool2(ops::relu(k1_(x)));
  h = ops::avg_pool2(ops::relu(k2_(h)));
  h = ops::avg_pool2(ops::relu(k3_(h)));
  return ops::global_avg_pool(ops::relu(k4_(h)));
}

namespace {

int class_position(const DatasetManifest& m, int class_id) {
  auto it = std::find(m.seen_ids.begin(), m.seen_ids.end(), class_id);
  if (it == m.seen_ids.end()) throw std::invalid_argument("class " + std::to_string(class_id) + " is not seen");
  return static_cast<int>(it - m.seen_ids.begin());
}

std::vector<int> mask_labels(const ImageBank& bank, std::span<const std::pair<int, int>> items) {
  const std::size_t px = static_cast<std::size_t>(bank.resolution()) * bank.resolution();
  std::vector<int> labels(items.size() * px);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::uint8_t* m = bank.mask(items[i].first, items[i].second);
    std::copy(m, m + px, labels.begin() + static_cast<std::ptrdiff_t>(i * px));
  }
  return labels;
}

std::vector<std::pair<int, int>> heldout_seen(const ImageBank& bank) {
  const auto& m = bank.manifest();
  std::vector<std::pair<int, int>> items;
  for (int id : m.seen_ids)
    for (int i = m.training_count(id); i < bank.count(id); ++i) items.emplace_back(id, i);
  return items;
}

template <typename F>
void for_batches(std::size_t n, int batch, F&& f) {
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch)) f(b, std::min(n, b + static_cast<std::size_t>(batch)));
}

}  // namespace

ProbeModels ProbeModels::train(const ImageBank& bank, const ProbeConfig& config, std::ostream* log) {
  config.validate();
  const auto& m = bank.manifest();
  ProbeModels p(bank.resolution(), static_cast<int>(m.seen_ids.size()), config.seed);
  p.config_ = config;
  Rng rng(derive_seed(config.seed, 0x5E6));
  auto draw = [&] {
    std::vector<std::pair<int, int>> items;
    for (int i = 0; i < config.batch; ++i) {
      const int id = m.seen_ids[rng.below(m.seen_ids.size())];
      items.emplace_back(id, static_cast<int>(rng.below(static_cast<std::uint64_t>(m.training_count(id)))));
    }
    return items;
  };
  auto run = [&](const char* what, const std::string& prefix, int iters, auto&& loss_fn) {
    Adam adam(config.lr, 0.9, 0.999, 1e-8);
    double running = 0;
    for (int it = 1; it <= iters; ++it) {
      const auto items = draw();
      const Var<float> loss = loss_fn(items);
      const double v = loss.value()[0];
      if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " probe diverged at iteration " + std::to_string(it));
      ag::backward(loss);
      adam.step(p.params_, prefix);
      p.params_.zero_grad(prefix);
      running = it == 1 ? v : 0.95 * running + 0.05 * v;
      if (log && (it % 100 == 0 || it == iters)) *log << what << " probe " << it << "/" << iters << " loss " << running << "\n";
    }
  };
  run("segmenter", "seg.", config.segmenter_iters, [&](const std::vector<std::pair<int, int>>& items) {
    const std::vector<int> labels = mask_labels(bank, items);
    return ops::cross_entropy(p.segmenter_logits(Var<float>(bank.batch(items))), std::span<const int>(labels));
  });
  run("classifier", "cls.", config.classifier_iters, [&](const std::vector<std::pair<int, int>>& items) {
    std::vector<int> labels;
    for (const auto& [id, i] : items) labels.push_back(class_position(m, id));
    return ops::cross_entropy(p.k_head_(p.classifier_features(Var<float>(bank.batch(items)))),
                              std::span<const int>(labels));
  });
  p.quality_ = measure_probes(p, bank);
  if (log)
    *log << "probe quality: segmenter pixel acc " << p.quality_.segmenter_pixel_acc << ", classifier top-1 "
         << p.quality_.classifier_top1 << " on " << p.quality_.heldout_samples << " held-out samples\n";
  return p;
}

std::vector<std::uint8_t> ProbeModels::segment(const Tensor<float>& images) const {
  ag::NoGradGuard guard;
  const std::vector<int> lab = ops::argmax_channels(segmenter_logits(Var<float>(images)).value());
  return std::vector<std::uint8_t>(lab.begin(), lab.end());
}

Eigen::MatrixXd ProbeModels::features(const Tensor<float>& images) const {
  ag::NoGradGuard guard;
  const Tensor<float> f = classifier_features(Var<float>(images)).value();
  Eigen::MatrixXd out(f.dim(0), f.dim(1));
  for (int i = 0; i < f.dim(0); ++i)
    for (int j = 0; j < f.dim(1); ++j) out(i, j) = f[static_cast<std::size_t>(i) * f.dim(1) + j];
  return out;
}

std::vector<int> ProbeModels::classify(const Tensor<float>& images) const {
  ag::NoGradGuard guard;
  return ops::argmax_channels(k_head_(classifier_features(Var<float>(images))).value());
}

std::string ProbeModels::identifier() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  for (const auto& [name, e] : params_.entries()) {
    mix(name.data(), name.size());
    mix(e.var.value().ptr(), e.var.value().size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ProbeModels::save(const fs::path& path) const {
  TensorArchive ar;
  ar.metadata = {{"format", "fsit-probes"},
                 {"version", 1},
                 {"resolution", resolution_},
                 {"num_classes", num_classes_},
                 {"config", config_},
                 {"quality",
                  {{"segmenter_pixel_acc", quality_.segmenter_pixel_acc},
                   {"classifier_top1", quality_.classifier_top1},
                   {"heldout_samples", quality_.heldout_samples}}},
                 {"id", identifier()}};
  for (const auto& [name, e] : params_.entries()) ar.tensors[name] = e.var.value();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_archive(path, ar);
}

ProbeModels ProbeModels::load(const fs::path& path) {
  const TensorArchive ar = read_archive(path);
  const auto& md = ar.metadata;
  if (md.value("format", "") != "fsit-probes") throw DataError(path.string() + " is not a probe archive");
  ProbeModels p(md.at("resolution").get<int>(), md.at("num_classes").get<int>(), 0);
  for (const auto& [name, e] : p.params_.entries()) {
    const Tensor<float>& t = ar.at(name);
    if (t.shape() != e.var.shape()) throw DataError(path.string() + ": shape mismatch for " + name);
    Var<float> v = e.var;
    v.mutable_value() = t;
  }
  p.config_ = md.at("config").get<ProbeConfig>();
  const auto& q = md.at("quality");
  p.quality_ = {q.at("segmenter_pixel_acc").get<double>(), q.at("classifier_top1").get<double>(),
                q.at("heldout_samples").get<int>()};
  if (md.at("id").get<std::string>() != p.identifier()) throw DataError(path.string() + ": probe identifier mismatch");
  return p;
}

ProbeQuality measure_probes(const ProbeModels& probes, const ImageBank& bank) {
  const auto items = heldout_seen(bank);
  if (items.empty()) throw DataError("dataset has no held-out seen samples to measure probes on");
  std::uint64_t px_ok = 0, px_total = 0;
  int top1 = 0;
  for_batches(items.size(), 32, [&](std::size_t b, std::size_t e) {
    const auto part = std::span(items).subspan(b, e - b);
    const Tensor<float> x = bank.batch(part);
    const std::vector<std::uint8_t> pred = probes.segment(x);
    const std::vector<int> gt = mask_labels(bank, part);
    for (std::size_t i = 0; i < gt.size(); ++i) px_ok += pred[i] == gt[i];
    px_total += gt.size();
    const std::vector<int> cls = probes.classify(x);
    for (std::size_t i = 0; i < part.size(); ++i) top1 += cls[i] == class_position(bank.manifest(), part[i].first);
  });
  return {static_cast<double>(px_ok) / static_cast<double>(px_total),
          static_cast<double>(top1) / static_cast<double>(items.size()), static_cast<int>(items.size())};
}

ProbeModels obtain_probes(const fs::path& path, const ImageBank& bank, const ProbeConfig& config, std::ostream* log) {
  if (fs::exists(path)) {
    ProbeModels p = ProbeModels::load(path);
    if (p.resolution() != bank.resolution() || p.num_classes() != static_cast<int>(bank.manifest().seen_ids.size()))
      throw ConfigError(path.string() + " was trained for a different dataset layout");
    if (log) *log << "reusing probes " << p.identifier() << " from " << path.string() << "\n";
    return p;
  }
  ProbeModels p = ProbeModels::train(bank, config, log);
  p.save(path);
  return p;
}

// ---------------------------------------------------------------------------
// Translation metrics

Translator generator_translator(const Generator<float>& gen) {
  return [&gen](const Tensor<float>& content, const Tensor<float>& style) {
    return translate_images(gen, content, std::span<const Tensor<float>>(&style, 1), 1.0f);
  };
}

void EvalConfig::validate() const {
  if (per_class < 2) throw ConfigError("eval per_class must be at least 2");
  if (batch < 1) throw ConfigError("eval batch must be positive");
  if (variance_pairs < 0) throw ConfigError("variance_pairs must be non-negative");
  if (variance_crops < 2) throw ConfigError("variance_crops must be at least 2");
  if (variance_population < 100) throw ConfigError("variance_population must be at least 100");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"per_class", c.per_class},
       {"batch", c.batch},
       {"variance_pairs", c.variance_pairs},
       {"variance_crops", c.variance_crops},
       {"variance_population", c.variance_population},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  jsonutil::require_known(j, "eval",
                          {"per_class", "batch", "variance_pairs", "variance_crops", "variance_population", "seed"});
  jsonutil::read(j, "per_class", c.per_class);
  jsonutil::read(j, "batch", c.batch);
  jsonutil::read(j, "variance_pairs", c.variance_pairs);
  jsonutil::read(j, "variance_crops", c.variance_crops);
  jsonutil::read(j, "variance_population", c.variance_population);
  jsonutil::read(j, "seed", c.seed);
}

namespace {

// Held-out seen samples followed by every unseen sample.
std::vector<std::pair<int, int>> content_pool(const ImageBank& bank) {
  auto pool = heldout_seen(bank);
  for (int id : bank.manifest().unseen_ids)
    for (int i = 0; i < bank.count(id); ++i) pool.emplace_back(id, i);
  return pool;
}

TranslationMetrics run_translations(const Translator& translate, const ImageBank& bank, const ProbeModels& probes,
                                    const EvalConfig& config, bool with_fid) {
  config.validate();
  if (probes.resolution() != bank.resolution()) throw ConfigError("probe resolution differs from the dataset");
  const auto& m = bank.manifest();
  if (m.unseen_ids.empty()) throw DataError("dataset has no unseen classes");
  const auto pool = content_pool(bank);
  Rng rng(derive_seed(config.seed, 0xE7A1));
  TranslationMetrics out;
  SegmentationCounter counter;
  std::map<int, Eigen::MatrixXd> real, fake;
  for (int u : m.unseen_ids) {
    std::vector<std::pair<int, int>> contents, styles;
    for (int i = 0; i < config.per_class; ++i) {
      contents.push_back(pool[rng.below(pool.size())]);
      styles.emplace_back(u, static_cast<int>(rng.below(static_cast<std::uint64_t>(bank.count(u)))));
    }
    Eigen::MatrixXd f(config.per_class, kProbeFeatureDim);
    for_batches(contents.size(), config.batch, [&](std::size_t b, std::size_t e) {
      const auto cs = std::span(contents).subspan(b, e - b);
      const Tensor<float> y = translate(bank.batch(cs), bank.batch(std::span(styles).subspan(b, e - b)));
      if (y.shape() != Shape{static_cast<int>(e - b), 3, bank.resolution(), bank.resolution()})
        throw ShapeError("translator returned " + shape_str(y.shape()));
      const std::vector<std::uint8_t> pred = probes.segment(y);
      const std::size_t px = static_cast<std::size_t>(bank.resolution()) * bank.resolution();
      for (std::size_t i = 0; i < cs.size(); ++i)
        counter.add(std::span(bank.mask(cs[i].first, cs[i].second), px), std::span(pred).subspan(i * px, px));
      if (with_fid) f.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) = probes.features(y);
    });
    out.translations += config.per_class;
    if (!with_fid) continue;
    fake[u] = f;
    std::vector<std::pair<int, int>> all;
    for (int i = 0; i < bank.count(u); ++i) all.emplace_back(u, i);
    Eigen::MatrixXd r(static_cast<Eigen::Index>(all.size()), kProbeFeatureDim);
    for_batches(all.size(), config.batch, [&](std::size_t b, std::size_t e) {
      r.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) =
          probes.features(bank.batch(std::span(all).subspan(b, e - b)));
    });
    real[u] = r;
  }
  out.content = counter.score();
  if (with_fid) out.fid = mfid(real, fake);
  return out;
}

}  // namespace

TranslationMetrics translation_metrics(const Translator& translate, const ImageBank& bank, const ProbeModels& probes,
                                       const EvalConfig& config) {
  return run_translations(translate, bank, probes, config, true);
}

SegScore content_preservation(const Translator& translate, const ImageBank& bank, const ProbeModels& probes,
                              const EvalConfig& config) {
  return run_translations(translate, bank, probes, config, false).content;
}

// ---------------------------------------------------------------------------
// Style variance

void CropConfig::validate() const {
  if (!(min_area >= 0.6) || !(max_area <= 1.0) || !(min_area <= max_area))
    throw ConfigError("crop area fraction must satisfy 0.6 <= min <= max <= 1");
  if (!(aspect_jitter >= 0.0 && aspect_jitter < 0.5)) throw ConfigError("aspect jitter must lie in [0, 0.5)");
}

Tensor<float> random_crop(const Tensor<float>& image, const CropConfig& crop, Rng& rng) {
  crop.validate();
  const int b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  std::vector<Tensor<float>> out;
  for (int i = 0; i < b; ++i) {
    const double area = rng.uniform(crop.min_area, crop.max_area);
    const double aspect = rng.uniform(1.0 - crop.aspect_jitter, 1.0 + crop.aspect_jitter);
    const int cw = std::clamp(static_cast<int>(std::lround(w * std::sqrt(area * aspect))), 1, w);
    const int ch = std::clamp(static_cast<int>(std::lround(h * std::sqrt(area / aspect))), 1, h);
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - cw + 1)));
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - ch + 1)));
    Tensor<float> part({1, c, ch, cw});
    for (int k = 0; k < c; ++k)
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) part.at4(0, k, y, x) = image.at4(i, k, y0 + y, x0 + x);
    out.push_back(ch == h && cw == w ? part : ops::resize_bilinear(part, h, w));
  }
  return stack_batch<float>(out);
}

namespace {

Tensor<float> repeat_batch(const Tensor<float>& one, int n) {
  if (one.dim(0) != 1) throw ShapeError("expected a single image, got " + shape_str(one.shape()));
  const std::vector<Tensor<float>> copies(static_cast<std::size_t>(n), one);
  return stack_batch<float>(copies);
}

}  // namespace

Tensor<float> style_code_scale(const Generator<float>& gen, const Tensor<float>& population,
                               const Tensor<float>& content, int batch) {
  const int n = population.dim(0);
  if (n < 1) throw std::invalid_argument("style_code_scale: empty population");
  std::vector<double> acc;
  for (int b = 0; b < n; b += batch) {
    const int e = std::min(n, b + batch);
    const Tensor<float> codes = extract_style_code(gen, std::vector<Tensor<float>>{population.slice_batch(b, e)},
                                                   repeat_batch(content, e - b));
    const int d = codes.dim(1);
    acc.resize(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < e - b; ++i)
      for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] += std::abs(codes[static_cast<std::size_t>(i) * d + j]);
  }
  Tensor<float> scale({static_cast<int>(acc.size())});
  for (std::size_t j = 0; j < acc.size(); ++j) scale[j] = static_cast<float>(std::max(acc[j] / n, 1e-8));
  return scale;
}

std::vector<double> style_variance_analysis(const Generator<float>& gen, const Tensor<float>& style,
                                            const Tensor<float>& content, int n_crops, const Tensor<float>& scale,
                                            Rng& rng, const CropConfig& crop) {
  if (n_crops < 2) throw std::invalid_argument("style_variance_analysis: at least 2 crops are required");
  const Tensor<float> crops = random_crop(repeat_batch(style, n_crops), crop, rng);
  const Tensor<float> codes =
      extract_style_code(gen, std::vector<Tensor<float>>{crops}, repeat_batch(content, n_crops));
  const int d = codes.dim(1);
  if (static_cast<int>(scale.size()) != d) throw std::invalid_argument("style_variance_analysis: scale size mismatch");
  std::vector<double> norm(static_cast<std::size_t>(n_crops) * d), offset(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n_crops; ++i)
    for (int j = 0; j < d; ++j)
      norm[static_cast<std::size_t>(i) * d + j] =
          static_cast<double>(codes[static_cast<std::size_t>(i) * d + j]) / scale[static_cast<std::size_t>(j)];
  // Mean taken relative to the first crop, so identical crops give exactly 0.
  for (int i = 1; i < n_crops; ++i)
    for (int j = 0; j < d; ++j) offset[static_cast<std::size_t>(j)] += norm[static_cast<std::size_t>(i) * d + j] - norm[static_cast<std::size_t>(j)];
  std::vector<double> mean(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] = norm[static_cast<std::size_t>(j)] + offset[static_cast<std::size_t>(j)] / n_crops;
  std::vector<double> dev;
  for (int i = 0; i < n_crops; ++i) {
    double s = 0;
    for (int j = 0; j < d; ++j) {
      const double diff = norm[static_cast<std::size_t>(i) * d + j] - mean[static_cast<std::size_t>(j)];
      s += diff * diff;
    }
    dev.push_back(std::sqrt(s));
  }
  return dev;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty series");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

StyleVarianceStudy style_variance_study(const Generator<float>& gen, const ImageBank& bank, int pairs, int n_crops,
                                        int population, std::uint64_t seed, const CropConfig& crop) {
  if (pairs < 1) throw std::invalid_argument("style_variance_study: at least one pair is required");
  if (population < 100) throw std::invalid_argument("style_variance_study: population must be at least 100");
  const auto& m = bank.manifest();
  if (m.unseen_ids.empty()) throw DataError("dataset has no unseen classes");
  auto pool = content_pool(bank);
  if (static_cast<int>(pool.size()) < population)
    throw DataError("only " + std::to_string(pool.size()) + " images available for a population of " +
                    std::to_string(population));
  Rng rng(derive_seed(seed, 0x57A7));
  std::vector<std::pair<int, int>> shuffled = pool;
  for (std::size_t i = 0; i < shuffled.size(); ++i)
    std::swap(shuffled[i], shuffled[i + rng.below(shuffled.size() - i)]);
  shuffled.resize(static_cast<std::size_t>(population));
  const Tensor<float> pop = bank.batch(shuffled);

  StyleVarianceStudy study;
  std::vector<double> all;
  for (int p = 0; p < pairs; ++p) {
    const int u = m.unseen_ids[rng.below(m.unseen_ids.size())];
    const std::pair<int, int> s{u, static_cast<int>(rng.below(static_cast<std::uint64_t>(bank.count(u))))};
    const std::pair<int, int> c = pool[rng.below(pool.size())];
    const Tensor<float> style = bank.batch(std::span(&s, 1)), content = bank.batch(std::span(&c, 1));
    const Tensor<float> scale = style_code_scale(gen, pop, content);
    auto dev = style_variance_analysis(gen, style, content, n_crops, scale, rng, crop);
    all.insert(all.end(), dev.begin(), dev.end());
    study.deviations.push_back(std::move(dev));
    study.styles.push_back(s);
    study.contents.push_back(c);
  }
  study.median = median(all);
  return study;
}

// ---------------------------------------------------------------------------
// Report

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [id, v] : fid.per_class) per_class[std::to_string(id)] = v;
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t i = 0; i < variance.deviations.size(); ++i)
    pairs.push_back({{"style", {variance.styles[i].first, variance.styles[i].second}},
                     {"content", {variance.contents[i].first, variance.contents[i].second}},
                     {"deviations", variance.deviations[i]}});
  return {{"note",
           "FID features are 64-d activations of a probe classifier trained on the synthetic seen classes; "
           "values are comparable only between reports that share a probe id."},
          {"run", run},
          {"probes",
           {{"id", probe_id},
            {"segmenter_pixel_acc", probe_quality.segmenter_pixel_acc},
            {"classifier_top1", probe_quality.classifier_top1},
            {"heldout_samples", probe_quality.heldout_samples}}},
          {"per_class_fid", per_class},
          {"mfid", fid.mfid},
          {"pacc", content.pacc},
          {"miou", content.miou},
          {"translations", translations},
          {"style_deviation", {{"median", variance.median}, {"pairs", pairs}}}};
}

std::string deviation_table(const StyleVarianceStudy& study) {
  std::ostringstream out;
  out << "pair,crop,deviation\n";
  char buf[64];
  for (std::size_t p = 0; p < study.deviations.size(); ++p)
    for (std::size_t c = 0; c < study.deviations[p].size(); ++c) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g\n", p, c, study.deviations[p][c]);
      out << buf;
    }
  return out.str();
}

std::string MetricsReport::deviation_csv() const { return deviation_table(variance); }

MetricsReport evaluate(const Generator<float>& gen, const ImageBank& bank, const ProbeModels& probes,
                       const EvalConfig& config) {
  config.validate();
  const ProbeQuality& q = probes.quality();
  if (!q.passes()) {
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "probes miss their quality gates (segmenter %.4f < %.2f or classifier %.4f < %.2f); refusing to "
                  "report metrics",
                  q.segmenter_pixel_acc, kSegmenterGate, q.classifier_top1, kClassifierGate);
    throw ProbeGateError(buf);
  }
  if (gen.config().resolution != bank.resolution()) throw ConfigError("model resolution differs from the dataset");
  MetricsReport r;
  const TranslationMetrics tm = translation_metrics(generator_translator(gen), bank, probes, config);
  r.fid = tm.fid;
  r.content = tm.content;
  r.translations = tm.translations;
  if (config.variance_pairs > 0)
    r.variance = style_variance_study(gen, bank, config.variance_pairs, config.variance_crops,
                                      config.variance_population, config.seed);
  r.probe_quality = q;
  r.probe_id = probes.identifier();
  return r;
}

}  // namespace fsit
