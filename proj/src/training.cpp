#include "fsit/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fsit/json_util.hpp"
#include "fsit/ops.hpp"
#include "fsit/simd/kernels.hpp"

namespace fsit {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (lambda_r < 0 || lambda_f < 0) throw ConfigError("loss weights must be non-negative");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("Adam epsilon must be positive");
  if (ema_weight < 0 || ema_weight >= 1) throw ConfigError("EMA weight must lie in [0, 1)");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (k_shot < 1) throw ConfigError("k_shot must be positive");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  if (heldout_every < 0 || heldout_per_class < 0) throw ConfigError("held-out settings must be non-negative");
  if (!(divergence_threshold > 0)) throw ConfigError("divergence threshold must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"lambda_r", c.lambda_r},
       {"lambda_f", c.lambda_f},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"ema_weight", c.ema_weight},
       {"batch", c.batch},
       {"iterations", c.iterations},
       {"k_shot", c.k_shot},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"heldout_every", c.heldout_every},
       {"heldout_per_class", c.heldout_per_class},
       {"divergence_threshold", c.divergence_threshold}};
}

void from_json(const json& j, TrainConfig& c) {
  jsonutil::require_known(j, "train",
                          {"lambda_r", "lambda_f", "lr", "beta1", "beta2", "adam_eps", "ema_weight", "batch",
                           "iterations", "k_shot", "seed", "checkpoint_every", "heldout_every", "heldout_per_class",
                           "divergence_threshold"});
  jsonutil::read(j, "lambda_r", c.lambda_r);
  jsonutil::read(j, "lambda_f", c.lambda_f);
  jsonutil::read(j, "lr", c.lr);
  jsonutil::read(j, "beta1", c.beta1);
  jsonutil::read(j, "beta2", c.beta2);
  jsonutil::read(j, "adam_eps", c.adam_eps);
  jsonutil::read(j, "ema_weight", c.ema_weight);
  jsonutil::read(j, "batch", c.batch);
  jsonutil::read(j, "iterations", c.iterations);
  jsonutil::read(j, "k_shot", c.k_shot);
  jsonutil::read(j, "seed", c.seed);
  jsonutil::read(j, "checkpoint_every", c.checkpoint_every);
  jsonutil::read(j, "heldout_every", c.heldout_every);
  jsonutil::read(j, "heldout_per_class", c.heldout_per_class);
  jsonutil::read(j, "divergence_threshold", c.divergence_threshold);
}

bool LossBreakdown::all_finite() const {
  return std::isfinite(gan_d) && std::isfinite(gan_g) && std::isfinite(recon) && std::isfinite(fm) &&
         std::isfinite(total_g);
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Var<T> hinge_d_loss(const Var<T>& real_logits, const Var<T>& fake_logits) {
  return ops::hinge_d(real_logits, fake_logits);
}

template <typename T>
Var<T> hinge_g_loss(const Var<T>& fake_logits) {
  return ops::hinge_g(fake_logits);
}

template <typename T>
Var<T> recon_loss(const Var<T>& x, const Var<T>& x_rec) {
  return ops::l1_mean(x, x_rec);
}

template <typename T>
Var<T> fm_loss(const Var<T>& real_features, const Var<T>& fake_features) {
  return ops::l1_mean(real_features, fake_features);
}

template <typename T>
void ema_update(ParameterStore<T>& avg, const ParameterStore<T>& live, double w, std::string_view prefix) {
  if (w < 0 || w > 1) throw std::invalid_argument("EMA weight outside [0, 1]");
  const auto names = live.names(prefix);
  if (names != avg.names(prefix)) throw std::invalid_argument("EMA store does not mirror the live parameters");
  for (const auto& name : names) {
    Var<T> a = avg.get(name);
    const Tensor<T>& l = live.get(name).value();
    if (a.shape() != l.shape()) throw std::invalid_argument("EMA shape mismatch for '" + name + "'");
    simd::kernels<T>().ema(a.mutable_value().ptr(), l.ptr(), l.size(), static_cast<T>(w));
  }
}

StepInputs<float> step_inputs(const Episode& ep) {
  return {ep.content, ep.styles, ep.style_class};
}

template <typename T>
Translation<T> translate_inputs(const Generator<T>& gen, const StepInputs<T>& in) {
  Translation<T> tr;
  tr.content_code = gen.content_encode(Var<T>(in.content));
  tr.fake = gen.decode(tr.content_code, gen.adain_params(gen.style_code(tr.content_code, in.styles, T(1))));
  return tr;
}

template <typename T>
Var<T> discriminator_loss(const Discriminator<T>& dis, const StepInputs<T>& in, const Var<T>& fake) {
  const Var<T> real_logits = dis.discriminate(Var<T>(in.styles.at(0)), in.style_class);
  const Var<T> fake_logits = dis.discriminate(fake, in.style_class);
  return hinge_d_loss(real_logits, fake_logits);
}

template <typename T>
GeneratorTerms<T> generator_losses(const Model<T>& model, const StepInputs<T>& in, const Translation<T>& tr,
                                   const TrainConfig& cfg) {
  GeneratorTerms<T> t;
  const DiscOutput<T> out = model.dis.forward(tr.fake, in.style_class);
  t.gan_g = hinge_g_loss(out.logits);

  Var<T> real_features;
  {
    ag::NoGradGuard guard;
    Tensor<T> acc;
    for (const auto& s : in.styles) {
      const Tensor<T> f = model.dis.disc_features(Var<T>(s)).value();
      if (acc.empty()) {
        acc = f;
      } else {
        for (std::size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
      }
    }
    const T inv = T(1) / static_cast<T>(in.styles.size());
    for (auto& v : acc.vec()) v *= inv;
    real_features = Var<T>(std::move(acc));
  }
  t.fm = fm_loss(real_features, out.features);

  const Var<T> x(in.content);
  t.recon = recon_loss(x, model.gen.translate_with_code(tr.content_code, x, T(1)));
  t.total = ops::add(t.gan_g, ops::add(ops::scale(t.recon, static_cast<T>(cfg.lambda_r)),
                                       ops::scale(t.fm, static_cast<T>(cfg.lambda_f))));
  return t;
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(ParameterStore<float>& params, std::string_view prefix) {
  ++steps_;
  const auto bc1 = static_cast<float>(1.0 - std::pow(beta1_, static_cast<double>(steps_)));
  const auto bc2 = static_cast<float>(1.0 - std::pow(beta2_, static_cast<double>(steps_)));
  for (const auto& name : params.names(prefix, true)) {
    Var<float> p = params.get(name);
    if (!p.requires_grad() || p.grad().empty()) continue;
    auto [mit, fresh] = m_.try_emplace(name, Tensor<float>(p.shape()));
    auto vit = v_.try_emplace(name, Tensor<float>(p.shape())).first;
    (void)fresh;
    simd::kernels<float>().adam(p.mutable_value().ptr(), p.grad().ptr(), mit->second.ptr(), vit->second.ptr(),
                                p.size(), static_cast<float>(lr_), static_cast<float>(beta1_),
                                static_cast<float>(beta2_), static_cast<float>(eps_), bc1, bc2);
  }
}

void Adam::save(TensorArchive& ar, const std::string& tag) const {
  for (const auto& [name, t] : m_) ar.tensors[tag + ".m/" + name] = t;
  for (const auto& [name, t] : v_) ar.tensors[tag + ".v/" + name] = t;
  ar.metadata[tag + "_steps"] = steps_;
}

void Adam::load(const TensorArchive& ar, const std::string& tag) {
  m_.clear();
  v_.clear();
  const std::string pm = tag + ".m/", pv = tag + ".v/";
  for (const auto& [name, t] : ar.tensors) {
    if (name.starts_with(pm)) m_[name.substr(pm.size())] = t;
    if (name.starts_with(pv)) v_[name.substr(pv.size())] = t;
  }
  steps_ = ar.metadata.at(tag + "_steps").get<long>();
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

constexpr std::uint64_t kEpisodeStream = 0xE915;

// Restores D trainability even when a G-step throws.
struct FreezeGuard {
  ParameterStore<float>& store;
  std::string prefix;
  FreezeGuard(ParameterStore<float>& s, std::string p) : store(s), prefix(std::move(p)) { store.set_trainable(prefix, false); }
  ~FreezeGuard() { store.set_trainable(prefix, true); }
};

std::string describe(const LossBreakdown& l) {
  std::ostringstream os;
  os << "gan_d=" << l.gan_d << " gan_g=" << l.gan_g << " recon=" << l.recon << " fm=" << l.fm
     << " total_g=" << l.total_g;
  return os.str();
}

void copy_into(ParameterStore<float>& store, const TensorArchive& ar, const std::string& tag, std::string_view prefix) {
  for (const auto& name : store.names(prefix)) {
    const Tensor<float>& t = ar.at(tag + "/" + name);
    Var<float> v = store.get(name);
    if (t.shape() != v.shape()) throw DataError("checkpoint shape mismatch for '" + name + "'");
    v.mutable_value() = t;
  }
}

}  // namespace

Trainer::Trainer(const ModelConfig& model_config, const TrainConfig& train_config)
    : model_config_(model_config),
      train_config_(train_config),
      model_(build_model<float>(model_config)),
      ema_(model_.params.clone(kGenPrefix)),
      adam_g_(train_config.lr, train_config.beta1, train_config.beta2, train_config.adam_eps),
      adam_d_(train_config.lr, train_config.beta1, train_config.beta2, train_config.adam_eps),
      rng_(derive_seed(train_config.seed, kEpisodeStream)) {
  train_config_.validate();
}

LossBreakdown Trainer::train_step(const Episode& episode) {
  const StepInputs<float> in = step_inputs(episode);
  const auto& cfg = train_config_;
  LossBreakdown l;
  auto check = [&](const char* stage) {
    const double vals[] = {l.gan_d, l.gan_g, l.recon, l.fm, l.total_g};
    for (double v : vals)
      if (!std::isfinite(v) || std::abs(v) > cfg.divergence_threshold)
        throw DivergenceError("training diverged at iteration " + std::to_string(iteration_ + 1) + " (" + stage +
                              "): " + describe(l));
  };
  try {
    const Translation<float> tr = translate_inputs(model_.gen, in);

    model_.dis.power_iterate();
    model_.params.zero_grad(kDisPrefix);
    const Var<float> ld = discriminator_loss(model_.dis, in, tr.fake.detach());
    l.gan_d = ld.value()[0];
    check("discriminator");
    ag::backward(ld);
    adam_d_.step(model_.params, kDisPrefix);

    {
      FreezeGuard freeze(model_.params, kDisPrefix);
      model_.params.zero_grad(kGenPrefix);
      const GeneratorTerms<float> g = generator_losses(model_, in, tr, cfg);
      l.gan_g = g.gan_g.value()[0];
      l.recon = g.recon.value()[0];
      l.fm = g.fm.value()[0];
      l.total_g = l.gan_g + cfg.lambda_r * l.recon + cfg.lambda_f * l.fm;
      check("generator");
      ag::backward(g.total);
    }
    adam_g_.step(model_.params, kGenPrefix);
  } catch (const std::domain_error& e) {
    throw DivergenceError("training diverged at iteration " + std::to_string(iteration_ + 1) + ": " + e.what());
  }
  model_.params.zero_grad();
  ema_update(ema_, model_.params, cfg.ema_weight);
  ++iteration_;
  return l;
}

void Trainer::save(const fs::path& path) const {
  TensorArchive ar;
  for (const auto& [name, e] : model_.params.entries()) ar.tensors["param/" + name] = e.var.value();
  for (const auto& [name, e] : ema_.entries()) ar.tensors["ema/" + name] = e.var.value();
  adam_g_.save(ar, "adam_g");
  adam_d_.save(ar, "adam_d");
  ar.metadata["format"] = "fsit-checkpoint";
  ar.metadata["version"] = FSIT_VERSION;
  ar.metadata["model"] = model_config_;
  ar.metadata["train"] = train_config_;
  ar.metadata["variant"] = std::string(variant_name(model_config_.variant));
  ar.metadata["iteration"] = iteration_;
  ar.metadata["seed"] = train_config_.seed;
  ar.metadata["rng_state"] = rng_.state();
  write_archive(path, ar);
}

void Trainer::load(const fs::path& path) {
  const TensorArchive ar = read_archive(path);
  if (ar.metadata.value("format", "") != "fsit-checkpoint") throw DataError("not a checkpoint: " + path.string());
  if (ar.metadata.at("model") != json(model_config_))
    throw ConfigError("checkpoint " + path.string() + " was written for a different model configuration");
  copy_into(model_.params, ar, "param", "");
  copy_into(ema_, ar, "ema", "");
  adam_g_.load(ar, "adam_g");
  adam_d_.load(ar, "adam_d");
  iteration_ = ar.metadata.at("iteration").get<int>();
  rng_.set_state(ar.metadata.at("rng_state").get<std::string>());
}

json checkpoint_metadata(const fs::path& path) {
  return read_archive(path).metadata;
}

Trainer Trainer::from_checkpoint(const fs::path& path) {
  const json meta = checkpoint_metadata(path);
  Trainer t(meta.at("model").get<ModelConfig>(), meta.at("train").get<TrainConfig>());
  t.load(path);
  return t;
}

FrozenGenerator load_generator(const fs::path& checkpoint, bool use_ema) {
  const TensorArchive ar = read_archive(checkpoint);
  if (ar.metadata.value("format", "") != "fsit-checkpoint") throw DataError("not a checkpoint: " + checkpoint.string());
  FrozenGenerator fg;
  fg.config = ar.metadata.at("model").get<ModelConfig>();
  const std::string tag = std::string(use_ema ? "ema/" : "param/") + kGenPrefix;
  for (const auto& [name, t] : ar.tensors) {
    if (!name.starts_with(tag)) continue;
    const Tensor<float>& src = t;
    fg.params.parameter(name.substr(name.find('/') + 1), t.shape(), [&src](Tensor<float>& dst) { dst = src; });
  }
  fg.params.set_trainable("", false);
  fg.gen = Generator<float>(fg.config, fg.params, nullptr);
  return fg;
}

double heldout_recon_l1(const Generator<float>& gen, const ImageBank& bank, int per_class, int batch) {
  ag::NoGradGuard guard;
  const auto& m = bank.manifest();
  std::vector<std::pair<int, int>> items;
  for (int id : m.seen_ids) {
    const int first = m.training_count(id);
    const int n = std::min(per_class, static_cast<int>(m.entry(id).samples.size()) - first);
    for (int i = 0; i < n; ++i) items.emplace_back(id, first + i);
  }
  if (items.empty()) throw DataError("dataset has no held-out seen samples");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < items.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(items.size(), b + static_cast<std::size_t>(batch));
    const Tensor<float> x = bank.batch(std::span(items).subspan(b, e - b));
    const Tensor<float> y = gen.translate(x, std::vector<Tensor<float>>{x}, 1.0f).value();
    for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(static_cast<double>(x[i]) - y[i]);
    count += x.size();
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Loop

namespace {

// Keeps the header and rows whose iteration is <= `last`.
void truncate_log(const fs::path& path, int last) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header || (!line.empty() && std::stoi(line) <= last)) kept += line + "\n";
    header = false;
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

RunSummary run_training(const ImageBank& bank, Trainer& trainer, const RunOptions& opts) {
  const TrainConfig& cfg = trainer.train_config();
  if (bank.manifest().seen_ids.size() < 2) throw DataError("training needs at least 2 seen classes");
  fs::create_directories(opts.out_dir / "checkpoints");
  const fs::path log_path = opts.out_dir / kLossLogName;
  const fs::path heldout_path = opts.out_dir / kHeldoutLogName;

  const char* log_header = "iteration,gan_d,gan_g,recon,fm,total_g\n";
  const char* heldout_header = "iteration,recon_live,recon_ema\n";
  if (opts.resume) trainer.load(*opts.resume);
  if (opts.resume && fs::exists(log_path)) {
    truncate_log(log_path, trainer.iteration());
    truncate_log(heldout_path, trainer.iteration());
  } else {
    // a resume into a fresh directory starts new logs at the checkpoint
    std::ofstream(log_path, std::ios::trunc) << log_header;
    std::ofstream(heldout_path, std::ios::trunc) << heldout_header;
  }

  RunSummary summary;
  auto heldout = [&](bool record) {
    if (cfg.heldout_per_class <= 0) return 0.0;
    Generator<float> ema_gen(trainer.model().config, trainer.ema(), nullptr);
    const double live = heldout_recon_l1(trainer.model().gen, bank, cfg.heldout_per_class);
    const double ema = heldout_recon_l1(ema_gen, bank, cfg.heldout_per_class);
    if (record) std::ofstream(heldout_path, std::ios::app) << trainer.iteration() << "," << fmt(live) << "," << fmt(ema) << "\n";
    return ema;
  };
  if (trainer.iteration() == 0) summary.heldout_start = heldout(true);

  std::ofstream log(log_path, std::ios::app);
  while (trainer.iteration() < cfg.iterations) {
    const Episode ep = sample_episode(bank, cfg.batch, cfg.k_shot, trainer.episode_rng());
    const LossBreakdown l = trainer.train_step(ep);
    const int it = trainer.iteration();
    log << it << "," << fmt(l.gan_d) << "," << fmt(l.gan_g) << "," << fmt(l.recon) << "," << fmt(l.fm) << ","
        << fmt(l.total_g) << "\n";
    log.flush();
    summary.last = l;
    if (opts.on_step) opts.on_step(it, l);
    if (it % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06d.fsit", it);
      trainer.save(opts.out_dir / "checkpoints" / name);
    }
    if (cfg.heldout_every > 0 && it % cfg.heldout_every == 0 && it < cfg.iterations) heldout(true);
  }
  summary.iterations = trainer.iteration();
  summary.final_checkpoint = opts.out_dir / "final.fsit";
  trainer.save(summary.final_checkpoint);
  summary.heldout_end = heldout(true);
  return summary;
}

// ---------------------------------------------------------------------------

#define FSIT_INSTANTIATE(T)                                                                                        \
  template Var<T> hinge_d_loss<T>(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> hinge_g_loss<T>(const Var<T>&);                                                                 \
  template Var<T> recon_loss<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> fm_loss<T>(const Var<T>&, const Var<T>&);                                                       \
  template void ema_update<T>(ParameterStore<T>&, const ParameterStore<T>&, double, std::string_view);            \
  template Translation<T> translate_inputs<T>(const Generator<T>&, const StepInputs<T>&);                         \
  template Var<T> discriminator_loss<T>(const Discriminator<T>&, const StepInputs<T>&, const Var<T>&);            \
  template GeneratorTerms<T> generator_losses<T>(const Model<T>&, const StepInputs<T>&, const Translation<T>&,    \
                                                 const TrainConfig&);

FSIT_INSTANTIATE(float)
FSIT_INSTANTIATE(double)

}  // namespace fsit
