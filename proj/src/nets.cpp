#include "fsit/nets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fsit/json_util.hpp"
#include "fsit/ops.hpp"

namespace fsit {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoCC: return "no_cc";
    case Variant::NoCSB: return "no_csb";
    case Variant::NoCoco: return "no_coco";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::Full;
  if (name == "no_cc") return Variant::NoCC;
  if (name == "no_csb") return Variant::NoCSB;
  if (name == "no_coco") return Variant::NoCoco;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected full, no_cc, no_csb or no_coco)");
}

ModelConfig ModelConfig::miniature(Variant variant) {
  ModelConfig c;
  c.variant = variant;
  c.resolution = 8;
  c.num_classes = 3;
  c.seed = 5;
  c.content_stem = 4;
  c.content_widths = {8, 8};
  c.style_stem = 4;
  c.style_widths = {8, 8};
  c.style_dim = 8;
  c.csb_dim = 4;
  c.decoder_res_blocks = 1;
  c.decoder_widths = {8, 4};
  c.dis_stem = 4;
  c.dis_widths = {8, 8};
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(resolution, "resolution");
  positive(content_stem, "content_stem");
  positive(style_stem, "style_stem");
  positive(style_dim, "style_dim");
  positive(csb_dim, "csb_dim");
  positive(dis_stem, "dis_stem");
  if (decoder_res_blocks < 0) throw ConfigError("decoder_res_blocks must be non-negative");
  if (num_classes < 2) throw ConfigError("at least 2 source classes are required");
  if (content_widths.empty() || style_widths.empty() || dis_widths.empty())
    throw ConfigError("encoder/discriminator width lists must be non-empty");
  for (const auto* list : {&content_widths, &style_widths, &decoder_widths, &dis_widths})
    for (int w : *list) positive(w, "channel width");
  if (decoder_widths.size() != content_widths.size())
    throw ConfigError("decoder needs one upsampling block per content downsampling");
  const std::size_t deepest = std::max({content_widths.size(), style_widths.size(), dis_widths.size()});
  if (resolution % (1 << deepest) != 0)
    throw ConfigError("resolution " + std::to_string(resolution) + " is not divisible by 2^" + std::to_string(deepest));
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"variant", std::string(variant_name(c.variant))},
       {"resolution", c.resolution},
       {"num_classes", c.num_classes},
       {"seed", c.seed},
       {"content_stem", c.content_stem},
       {"content_widths", c.content_widths},
       {"style_stem", c.style_stem},
       {"style_widths", c.style_widths},
       {"style_dim", c.style_dim},
       {"csb_dim", c.csb_dim},
       {"decoder_res_blocks", c.decoder_res_blocks},
       {"decoder_widths", c.decoder_widths},
       {"dis_stem", c.dis_stem},
       {"dis_widths", c.dis_widths}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  jsonutil::require_known(j, "model",
                          {"variant", "resolution", "num_classes", "seed", "content_stem", "content_widths",
                           "style_stem", "style_widths", "style_dim", "csb_dim", "decoder_res_blocks",
                           "decoder_widths", "dis_stem", "dis_widths"});
  std::string variant(variant_name(c.variant));
  jsonutil::read(j, "variant", variant);
  c.variant = parse_variant(variant);
  jsonutil::read(j, "resolution", c.resolution);
  jsonutil::read(j, "num_classes", c.num_classes);
  jsonutil::read(j, "seed", c.seed);
  jsonutil::read(j, "content_stem", c.content_stem);
  jsonutil::read(j, "content_widths", c.content_widths);
  jsonutil::read(j, "style_stem", c.style_stem);
  jsonutil::read(j, "style_widths", c.style_widths);
  jsonutil::read(j, "style_dim", c.style_dim);
  jsonutil::read(j, "csb_dim", c.csb_dim);
  jsonutil::read(j, "decoder_res_blocks", c.decoder_res_blocks);
  jsonutil::read(j, "decoder_widths", c.decoder_widths);
  jsonutil::read(j, "dis_stem", c.dis_stem);
  jsonutil::read(j, "dis_widths", c.dis_widths);
}

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
Var<T> ParameterStore<T>::add(const std::string& name, const Shape& shape,
                              const std::function<void(Tensor<T>&)>& init, bool trainable) {
  if (auto it = entries_.find(name); it != entries_.end()) {
    if (it->second.var.shape() != shape)
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.var.shape()) +
                       ", expected " + shape_str(shape));
    return it->second.var;
  }
  if (!init) throw std::out_of_range("parameter '" + name + "' missing from store");
  Tensor<T> t(shape);
  init(t);
  Entry e{Var<T>(std::move(t), trainable), trainable};
  entries_.emplace(name, e);
  return e.var;
}

template <typename T>
Var<T> ParameterStore<T>::parameter(const std::string& name, const Shape& shape,
                                    const std::function<void(Tensor<T>&)>& init) {
  return add(name, shape, init, true);
}

template <typename T>
Var<T> ParameterStore<T>::buffer(const std::string& name, const Shape& shape,
                                 const std::function<void(Tensor<T>&)>& init) {
  return add(name, shape, init, false);
}

template <typename T>
Var<T> ParameterStore<T>::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second.var;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::names(std::string_view prefix, bool trainable_only) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_)
    if (name.starts_with(prefix) && (!trainable_only || e.trainable)) out.push_back(name);
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (e.trainable && name.starts_with(prefix)) n += e.var.size();
  return n;
}

template <typename T>
ParameterStore<T> ParameterStore<T>::clone(std::string_view prefix) const {
  ParameterStore out;
  for (const auto& [name, e] : entries_)
    if (name.starts_with(prefix)) out.entries_.emplace(name, Entry{Var<T>(e.var.value(), false), e.trainable});
  return out;
}

template <typename T>
void ParameterStore<T>::assign_from(const ParameterStore& other, std::string_view prefix) {
  for (const auto& [name, e] : other.entries_) {
    if (!name.starts_with(prefix)) continue;
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("assign_from: unknown parameter '" + name + "'");
    if (it->second.var.shape() != e.var.shape()) throw ShapeError("assign_from: shape mismatch for '" + name + "'");
    it->second.var.mutable_value() = e.var.value();
  }
}

template <typename T>
void ParameterStore<T>::set_trainable(std::string_view prefix, bool on) {
  for (auto& [name, e] : entries_)
    if (e.trainable && name.starts_with(prefix)) e.var.set_requires_grad(on);
}

template <typename T>
void ParameterStore<T>::zero_grad(std::string_view prefix) {
  for (auto& [name, e] : entries_)
    if (name.starts_with(prefix)) e.var.zero_grad();
}

template <typename T>
bool ParameterStore<T>::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(), [](const auto& kv) { return kv.second.var.value().all_finite(); });
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Var<T> Conv<T>::operator()(const Var<T>& x) const {
  return ops::conv2d(x, weight, bias, stride, pad);
}

template <typename T>
Var<T> Dense<T>::operator()(const Var<T>& x) const {
  return ops::linear(x, weight, bias);
}

template <typename T>
Tensor<T> SnConv<T>::normalized_weight() const {
  ag::NoGradGuard guard;
  return ops::spectral_normalized(weight, u.value(), v.value()).value();
}

template <typename T>
Var<T> SnConv<T>::operator()(const Var<T>& x) const {
  return ops::conv2d(x, ops::spectral_normalized(weight, u.value(), v.value()), bias, stride, pad);
}

template <typename T>
void SnConv<T>::power_iterate() {
  Var<T> uu = u, vv = v;
  ops::power_iteration(weight.value(), uu.mutable_value(), vv.mutable_value());
}

namespace {

template <typename T>
std::function<void(Tensor<T>&)> gaussian_init(Rng* rng, double stddev) {
  if (!rng) return {};
  return [rng, stddev](Tensor<T>& t) {
    for (auto& v : t.vec()) v = static_cast<T>(stddev * rng->normal());
  };
}

template <typename T>
std::function<void(Tensor<T>&)> zero_init(Rng* rng) {
  if (!rng) return {};
  return [](Tensor<T>& t) { t.fill(T(0)); };
}

template <typename T>
std::function<void(Tensor<T>&)> unit_vector_init(Rng* rng) {
  if (!rng) return {};
  return [rng](Tensor<T>& t) {
    double norm = 0;
    for (auto& v : t.vec()) {
      v = static_cast<T>(rng->normal());
      norm += static_cast<double>(v) * v;
    }
    norm = std::sqrt(std::max(norm, 1e-24));
    for (auto& v : t.vec()) v = static_cast<T>(v / norm);
  };
}

template <typename T>
SnConv<T> make_sn_conv(ParameterStore<T>& s, Rng* rng, const std::string& name, int in, int out, int k, int stride,
                       int pad, bool bias = true) {
  SnConv<T> c;
  c.weight = s.parameter(name + ".w", {out, in, k, k}, gaussian_init<T>(rng, std::sqrt(2.0 / (in * k * k))));
  if (bias) c.bias = s.parameter(name + ".b", {out}, zero_init<T>(rng));
  c.u = s.buffer(name + ".sn_u", {out}, unit_vector_init<T>(rng));
  c.v = s.buffer(name + ".sn_v", {in * k * k}, unit_vector_init<T>(rng));
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <typename T>
Tensor<T> stack_item_major(std::span<const Tensor<T>> styles) {
  const int k = static_cast<int>(styles.size());
  const Shape& s0 = styles[0].shape();
  for (const auto& s : styles)
    if (s.shape() != s0) throw ShapeError("style batches must share one shape");
  const int b = s0[0];
  const std::size_t item = styles[0].size() / static_cast<std::size_t>(b);
  Shape out_shape = s0;
  out_shape[0] = b * k;
  Tensor<T> out(out_shape);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < k; ++j)
      std::copy_n(styles[j].ptr() + i * item, item, out.ptr() + (static_cast<std::size_t>(i) * k + j) * item);
  return out;
}

}  // namespace

template <typename T>
Conv<T> make_conv(ParameterStore<T>& s, Rng* rng, const std::string& name, int in, int out, int k, int stride,
                  int pad, bool bias) {
  Conv<T> c;
  c.weight = s.parameter(name + ".w", {out, in, k, k}, gaussian_init<T>(rng, std::sqrt(2.0 / (in * k * k))));
  if (bias) c.bias = s.parameter(name + ".b", {out}, zero_init<T>(rng));
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <typename T>
Dense<T> make_dense(ParameterStore<T>& s, Rng* rng, const std::string& name, int in, int out) {
  Dense<T> d;
  d.weight = s.parameter(name + ".w", {out, in}, gaussian_init<T>(rng, std::sqrt(1.0 / in)));
  d.bias = s.parameter(name + ".b", {out}, zero_init<T>(rng));
  return d;
}


// ---------------------------------------------------------------------------
// Generator

template <typename T>
Generator<T>::Generator(const ModelConfig& config, ParameterStore<T>& s, Rng* rng) : config_(config) {
  config_.validate();
  const std::string p = kGenPrefix;

  content_stem_ = make_conv<T>(s, rng, p + "content.stem", 3, config_.content_stem, 7, 1, 3);
  int ch = config_.content_stem;
  for (std::size_t i = 0; i < config_.content_widths.size(); ++i) {
    const int out = config_.content_widths[i];
    const std::string n = p + "content.down" + std::to_string(i);
    content_blocks_.push_back({make_conv<T>(s, rng, n + ".conv1", ch, out, 3, 2, 1),
                               make_conv<T>(s, rng, n + ".conv2", out, out, 3, 1, 1),
                               make_conv<T>(s, rng, n + ".skip", ch, out, 1, 1, 0)});
    ch = out;
  }

  style_stem_ = make_conv<T>(s, rng, p + "style.stem", 3, config_.style_stem, 7, 1, 3);
  ch = config_.style_stem;
  for (std::size_t i = 0; i < config_.style_widths.size(); ++i) {
    const int out = config_.style_widths[i];
    style_downs_.push_back(make_conv<T>(s, rng, p + "style.down" + std::to_string(i), ch, out, 4, 2, 1));
    ch = out;
  }

  const int ds = config_.style_vector_dim();
  const int dz = config_.style_dim;
  if (config_.has_csb()) {
    csb_ = s.parameter(p + "coco.csb", {config_.csb_dim}, gaussian_init<T>(rng, 1.0));
    zeta_s_ = make_dense<T>(s, rng, p + "coco.zeta_s", ds + config_.csb_dim, dz);
  } else {
    zeta_s_ = make_dense<T>(s, rng, p + "coco.zeta_s", ds, dz);
  }
  if (config_.has_content_conditioning())
    zeta_c_ = make_dense<T>(s, rng, p + "coco.zeta_c", config_.content_channels(), dz);

  ch = config_.content_channels();
  for (int i = 0; i < config_.decoder_res_blocks; ++i) {
    const std::string n = p + "dec.res" + std::to_string(i);
    res_blocks_.push_back({make_conv<T>(s, rng, n + ".conv1", ch, ch, 3, 1, 1),
                           make_conv<T>(s, rng, n + ".conv2", ch, ch, 3, 1, 1)});
    adain_channels_.push_back(ch);
    adain_channels_.push_back(ch);
  }
  for (std::size_t i = 0; i < config_.decoder_widths.size(); ++i) {
    const int out = config_.decoder_widths[i];
    const std::string n = p + "dec.up" + std::to_string(i);
    up_blocks_.push_back({make_conv<T>(s, rng, n + ".conv1", ch, out, 3, 1, 1),
                          make_conv<T>(s, rng, n + ".conv2", out, out, 3, 1, 1),
                          make_conv<T>(s, rng, n + ".skip", ch, out, 1, 1, 0)});
    adain_channels_.push_back(out);
    adain_channels_.push_back(out);
    ch = out;
  }
  out_conv_ = make_conv<T>(s, rng, p + "dec.out", ch, 3, 7, 1, 3);
  adain_map_ = make_dense<T>(s, rng, p + "adain_map", dz, 2 * adain_channel_total());
}

template <typename T>
int Generator<T>::adain_channel_total() const {
  int total = 0;
  for (int c : adain_channels_) total += c;
  return total;
}

template <typename T>
Var<T> Generator<T>::content_encode(const Var<T>& x) const {
  if (x.value().rank() != 4 || x.dim(1) != 3 || x.dim(2) != config_.resolution || x.dim(3) != config_.resolution)
    throw ShapeError("content_encode expects (B,3," + std::to_string(config_.resolution) + "," +
                     std::to_string(config_.resolution) + "), got " + shape_str(x.shape()));
  using namespace ops;
  Var<T> h = relu(instance_norm(content_stem_(x)));
  for (const auto& blk : content_blocks_) {
    Var<T> main = relu(instance_norm(blk.conv1(h)));
    main = instance_norm(blk.conv2(main));
    Var<T> skip = instance_norm(blk.skip(avg_pool2(h)));
    h = relu(add(main, skip));
  }
  return h;
}

template <typename T>
Var<T> Generator<T>::style_feature_map(const Var<T>& x) const {
  if (x.value().rank() != 4 || x.dim(1) != 3 || x.dim(2) != config_.resolution || x.dim(3) != config_.resolution)
    throw ShapeError("style_feature expects (B,3," + std::to_string(config_.resolution) + "," +
                     std::to_string(config_.resolution) + "), got " + shape_str(x.shape()));
  Var<T> h = ops::relu(style_stem_(x));
  for (const auto& conv : style_downs_) h = ops::relu(conv(h));
  return h;
}

template <typename T>
Var<T> Generator<T>::style_feature(const Var<T>& x, const FeatureHook<T>& hook) const {
  Var<T> map = style_feature_map(x);
  if (hook) map = hook(map);
  return ops::global_avg_pool(map);
}

template <typename T>
Var<T> Generator<T>::coco_combine(const Var<T>& sv, const Var<T>& cc, T lambda) const {
  if (sv.value().rank() != 2 || sv.dim(1) != config_.style_vector_dim())
    throw ShapeError("coco_combine: style vector must be (B," + std::to_string(config_.style_vector_dim()) +
                     "), got " + shape_str(sv.shape()));
  const int b = sv.dim(0);
  Var<T> style_in = sv;
  if (config_.has_csb())
    style_in = ops::concat_cols(sv, ops::broadcast_rows(ops::scale(csb_, lambda), b));
  Var<T> zeta_s = zeta_s_(style_in);
  if (!config_.has_content_conditioning()) return zeta_s;
  if (cc.value().rank() != 4 || cc.dim(0) != b || cc.dim(1) != config_.content_channels())
    throw ShapeError("coco_combine: content code " + shape_str(cc.shape()) + " does not match style batch of " +
                     std::to_string(b));
  Var<T> zeta_c = zeta_c_(ops::global_avg_pool(cc));
  return ops::mul(zeta_c, zeta_s);
}

template <typename T>
AdainParamSet<T> Generator<T>::adain_params(const Var<T>& style_code) const {
  Var<T> raw = adain_map_(style_code);
  AdainParamSet<T> out;
  int off = 0;
  for (int c : adain_channels_) {
    Var<T> gamma = ops::add_scalar(ops::columns(raw, off, c), T(1));
    Var<T> beta = ops::columns(raw, off + c, c);
    out.push_back({gamma, beta});
    off += 2 * c;
  }
  return out;
}

template <typename T>
Var<T> Generator<T>::decode(const Var<T>& zc, const AdainParamSet<T>& params) const {
  using namespace ops;
  if (params.size() != adain_channels_.size())
    throw ShapeError("decode: expected " + std::to_string(adain_channels_.size()) + " AdaIN layers, got " +
                     std::to_string(params.size()));
  const int down = 1 << config_.content_downsamples();
  if (zc.value().rank() != 4 || zc.dim(1) != config_.content_channels() || zc.dim(2) * down != config_.resolution ||
      zc.dim(3) * down != config_.resolution)
    throw ShapeError("decode: content code " + shape_str(zc.shape()) + " does not match the decoder");
  std::size_t li = 0;
  auto ada = [&](const Var<T>& h) {
    const auto& p = params[li++];
    return adain(h, p.gamma, p.beta);
  };
  Var<T> h = zc;
  for (const auto& blk : res_blocks_) {
    Var<T> r = relu(ada(blk.conv1(h)));
    r = ada(blk.conv2(r));
    h = add(h, r);
  }
  for (const auto& blk : up_blocks_) {
    Var<T> u = upsample2(h);
    Var<T> main = relu(ada(blk.conv1(u)));
    main = ada(blk.conv2(main));
    Var<T> skip = instance_norm(blk.skip(u));
    h = relu(add(main, skip));
  }
  return ops::tanh(out_conv_(h));
}

template <typename T>
Var<T> Generator<T>::average_style_vector(std::span<const Tensor<T>> styles) const {
  if (styles.empty()) throw std::invalid_argument("at least one style image is required");
  if (styles.size() == 1) return style_feature(Var<T>(styles[0]));
  return ops::group_mean(style_feature(Var<T>(stack_item_major(styles))), static_cast<int>(styles.size()));
}

template <typename T>
Var<T> Generator<T>::style_code(const Var<T>& content_code, std::span<const Tensor<T>> styles, T lambda) const {
  return coco_combine(average_style_vector(styles), content_code, lambda);
}

template <typename T>
Var<T> Generator<T>::translate(const Tensor<T>& content, std::span<const Tensor<T>> styles, T lambda) const {
  if (styles.empty()) throw std::invalid_argument("translate: empty style list");
  for (const auto& s : styles)
    if (s.shape() != content.shape())
      throw ShapeError("translate: style batch " + shape_str(s.shape()) + " vs content " + shape_str(content.shape()));
  Var<T> zc = content_encode(Var<T>(content));
  return decode(zc, adain_params(style_code(zc, styles, lambda)));
}

template <typename T>
Var<T> Generator<T>::translate_with_code(const Var<T>& content_code, const Var<T>& style, T lambda) const {
  Var<T> z = coco_combine(style_feature(style), content_code, lambda);
  return decode(content_code, adain_params(z));
}

// ---------------------------------------------------------------------------
// Discriminator

template <typename T>
Discriminator<T>::Discriminator(const ModelConfig& config, ParameterStore<T>& s, Rng* rng) : config_(config) {
  config_.validate();
  const std::string p = kDisPrefix;
  stem_ = make_sn_conv<T>(s, rng, p + "stem", 3, config_.dis_stem, 3, 1, 1);
  int ch = config_.dis_stem;
  for (std::size_t i = 0; i < config_.dis_widths.size(); ++i) {
    const int out = config_.dis_widths[i];
    const std::string n = p + "blk" + std::to_string(i);
    ResBlk blk;
    blk.conv1 = make_sn_conv<T>(s, rng, n + ".conv1", ch, out, 3, 1, 1);
    blk.conv2 = make_sn_conv<T>(s, rng, n + ".conv2", out, out, 3, 1, 1);
    blk.learned_skip = ch != out;
    if (blk.learned_skip) blk.skip = make_sn_conv<T>(s, rng, n + ".skip", ch, out, 1, 1, 0, false);
    blocks_.push_back(std::move(blk));
    ch = out;
  }
  hidden_width_ = ch;
  head_ = make_sn_conv<T>(s, rng, p + "head", ch, 1, 1, 1, 0);
  class_embed_ = make_sn_conv<T>(s, rng, p + "class_embed", ch, config_.num_classes, 1, 1, 0, false);
}

template <typename T>
std::vector<SnConv<T>*> Discriminator<T>::layers() {
  std::vector<SnConv<T>*> out{&stem_};
  for (auto& b : blocks_) {
    out.push_back(&b.conv1);
    out.push_back(&b.conv2);
    if (b.learned_skip) out.push_back(&b.skip);
  }
  out.push_back(&head_);
  out.push_back(&class_embed_);
  return out;
}

template <typename T>
Var<T> Discriminator<T>::hidden(const Var<T>& x) const {
  using namespace ops;
  if (x.value().rank() != 4 || x.dim(1) != 3 || x.dim(2) != config_.resolution || x.dim(3) != config_.resolution)
    throw ShapeError("discriminator expects (B,3," + std::to_string(config_.resolution) + "," +
                     std::to_string(config_.resolution) + "), got " + shape_str(x.shape()));
  const T slope = T(kLeakySlope);
  Var<T> h = stem_(x);
  for (const auto& blk : blocks_) {
    h = avg_pool2(h);
    Var<T> r = blk.conv1(leaky_relu(h, slope));
    r = blk.conv2(leaky_relu(r, slope));
    h = add(blk.learned_skip ? blk.skip(h) : h, r);
  }
  return leaky_relu(h, slope);
}

template <typename T>
DiscOutput<T> Discriminator<T>::forward(const Var<T>& x, std::span<const int> class_ids) const {
  if (class_ids.size() != static_cast<std::size_t>(x.dim(0)))
    throw std::invalid_argument("discriminate: one class id per image required");
  for (int id : class_ids)
    if (id < 0 || id >= config_.num_classes)
      throw std::out_of_range("class id " + std::to_string(id) + " outside [0, " + std::to_string(config_.num_classes) + ")");
  DiscOutput<T> out;
  out.hidden = hidden(x);
  Var<T> emb = ops::spectral_normalized(class_embed_.weight, class_embed_.u.value(), class_embed_.v.value());
  out.logits = ops::add(head_(out.hidden), ops::class_projection(out.hidden, emb, class_ids));
  out.features = ops::global_avg_pool(out.hidden);
  return out;
}

template <typename T>
Var<T> Discriminator<T>::discriminate(const Var<T>& x, std::span<const int> class_ids) const {
  return forward(x, class_ids).logits;
}

template <typename T>
Var<T> Discriminator<T>::disc_features(const Var<T>& x) const {
  return ops::global_avg_pool(hidden(x));
}

template <typename T>
void Discriminator<T>::power_iterate() {
  for (SnConv<T>* l : layers()) l->power_iterate();
}

template <typename T>
Tensor<T> Discriminator<T>::effective_class_embedding() const {
  return class_embed_.normalized_weight().reshaped({config_.num_classes, hidden_width_});
}

// ---------------------------------------------------------------------------

template <typename T>
Model<T> build_model(const ModelConfig& config) {
  config.validate();
  Model<T> m;
  m.config = config;
  Rng rng(config.seed);
  m.gen = Generator<T>(config, m.params, &rng);
  m.dis = Discriminator<T>(config, m.params, &rng);
  return m;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template struct Conv<float>;
template struct Conv<double>;
template struct Dense<float>;
template struct Dense<double>;
template struct SnConv<float>;
template struct SnConv<double>;
template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template Model<float> build_model<float>(const ModelConfig&);
template Conv<float> make_conv<float>(ParameterStore<float>&, Rng*, const std::string&, int, int, int, int, int, bool);
template Conv<double> make_conv<double>(ParameterStore<double>&, Rng*, const std::string&, int, int, int, int, int,
                                        bool);
template Dense<float> make_dense<float>(ParameterStore<float>&, Rng*, const std::string&, int, int);
template Dense<double> make_dense<double>(ParameterStore<double>&, Rng*, const std::string&, int, int);
template Model<double> build_model<double>(const ModelConfig&);

}  // namespace fsit
