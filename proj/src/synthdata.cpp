#include "fsit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "fsit/errors.hpp"
#include "fsit/json_util.hpp"

namespace fsit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string texture_name(Texture t) {
  switch (t) {
    case Texture::Stripes: return "stripes";
    case Texture::Dots: return "dots";
    case Texture::Checker: return "checker";
  }
  return "unknown";
}

Texture parse_texture(const std::string& name) {
  if (name == "stripes") return Texture::Stripes;
  if (name == "dots") return Texture::Dots;
  if (name == "checker") return Texture::Checker;
  throw DataError("unknown texture '" + name + "'");
}

namespace {

constexpr float kBodyAxis = 0.22f;   // major semi-axis at scale 1
constexpr float kLimbLength = 0.2f;  // at scale 1
constexpr float kAnchorInset = 0.85f;
constexpr float kPixelNoise = 0.03f;

float color_distance(const Rgb& a, const Rgb& b) {
  const float d0 = a[0] - b[0], d1 = a[1] - b[1], d2 = a[2] - b[2];
  return std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
}

float segment_distance(float px, float py, float ax, float ay, float bx, float by) {
  const float dx = bx - ax, dy = by - ay;
  const float t = std::clamp(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0f, 1.0f);
  const float ex = px - (ax + t * dx), ey = py - (ay + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

float frac(float x) { return x - std::floor(x); }

}  // namespace

Sample render_sample(const DomainSpec& spec, const Pose& pose, std::uint64_t seed, int resolution) {
  if (!(pose.scale > 0)) throw std::invalid_argument("render_sample: scale must be positive");
  if (resolution <= 0) throw std::invalid_argument("render_sample: resolution must be positive");
  const float a = kBodyAxis * pose.scale, b = a * spec.eccentricity;
  const float cos_r = std::cos(pose.rotation), sin_r = std::sin(pose.rotation);
  const float thick = spec.limb_thickness * pose.scale;
  const float len = kLimbLength * pose.scale;

  // Limb segments in the body frame.
  std::array<std::array<float, 4>, 4> limbs{};
  for (int i = 0; i < 4; ++i) {
    const float phi = std::numbers::pi_v<float> * (0.25f + 0.5f * static_cast<float>(i));
    const float ax = kAnchorInset * a * std::cos(phi), ay = kAnchorInset * b * std::sin(phi);
    const float dir = std::atan2(std::sin(phi) / b, std::cos(phi) / a) + pose.limb_angles[static_cast<std::size_t>(i)];
    limbs[static_cast<std::size_t>(i)] = {ax, ay, ax + len * std::cos(dir), ay + len * std::sin(dir)};
  }

  Sample s;
  s.pose = pose;
  s.class_id = spec.class_id;
  s.image = Image8{resolution, resolution, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(resolution) * resolution * 3)};
  s.mask = Image8{resolution, resolution, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(resolution) * resolution)};
  Rng rng(seed);
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      const float dx = (static_cast<float>(x) + 0.5f) / resolution - pose.cx;
      const float dy = (static_cast<float>(y) + 0.5f) / resolution - pose.cy;
      const float u = dx * cos_r + dy * sin_r, v = -dx * sin_r + dy * cos_r;
      const float un = u / a, vn = v / b;
      std::uint8_t label = kLabelBackground;
      Rgb color = kBackground;
      if (un * un + vn * vn <= 1.0f) {
        label = kLabelBody;
        const float gu = spec.frequency * (un + 1.0f) * 0.5f, gv = spec.frequency * (v / a + 1.0f) * 0.5f;
        bool alt = false;
        switch (spec.texture) {
          case Texture::Stripes: alt = frac(gu) >= 0.5f; break;
          case Texture::Dots: {
            const float cu = frac(gu) - 0.5f, cv = frac(gv) - 0.5f;
            alt = cu * cu + cv * cv < 0.09f;
            break;
          }
          case Texture::Checker: alt = (static_cast<long>(std::floor(gu)) + static_cast<long>(std::floor(gv))) % 2 != 0; break;
        }
        color = spec.palette[alt ? 1 : 0];
      } else {
        for (const auto& l : limbs)
          if (segment_distance(u, v, l[0], l[1], l[2], l[3]) <= thick) {
            label = kLabelLimb;
            color = spec.palette[2];
            break;
          }
      }
      const std::size_t p = static_cast<std::size_t>(y) * resolution + x;
      s.mask.data[p] = label;
      for (int c = 0; c < 3; ++c) {
        const float noisy = color[static_cast<std::size_t>(c)] + kPixelNoise * static_cast<float>(rng.uniform(-1, 1));
        s.image.data[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(noisy, 0.0f, 1.0f) * 255.0f));
      }
    }
  return s;
}

Pose random_pose(Rng& rng) {
  Pose p;
  p.cx = static_cast<float>(0.5 + rng.uniform(-0.06, 0.06));
  p.cy = static_cast<float>(0.5 + rng.uniform(-0.06, 0.06));
  p.rotation = static_cast<float>(rng.uniform(0, 2 * std::numbers::pi));
  p.scale = static_cast<float>(rng.uniform(0.6, 1.4));
  for (auto& l : p.limb_angles) l = static_cast<float>(rng.uniform(-0.5, 0.5));
  return p;
}

void DataConfig::validate() const {
  if (seen_classes < 2) throw ConfigError("at least 2 seen classes are required");
  if (unseen_classes < 1) throw ConfigError("at least 1 unseen class is required");
  if (per_seen < 2 || per_unseen < 2) throw ConfigError("every class needs at least 2 samples");
  if (holdout_per_class < 0 || holdout_per_class >= per_seen)
    throw ConfigError("holdout_per_class must lie in [0, per_seen)");
  if (resolution < 8) throw ConfigError("resolution must be at least 8");
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"seen_classes", c.seen_classes}, {"unseen_classes", c.unseen_classes},
       {"per_seen", c.per_seen},         {"per_unseen", c.per_unseen},
       {"resolution", c.resolution},     {"holdout_per_class", c.holdout_per_class},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  jsonutil::require_known(j, "data",
                          {"seen_classes", "unseen_classes", "per_seen", "per_unseen", "resolution",
                           "holdout_per_class", "seed"});
  jsonutil::read(j, "seen_classes", c.seen_classes);
  jsonutil::read(j, "unseen_classes", c.unseen_classes);
  jsonutil::read(j, "per_seen", c.per_seen);
  jsonutil::read(j, "per_unseen", c.per_unseen);
  jsonutil::read(j, "resolution", c.resolution);
  jsonutil::read(j, "holdout_per_class", c.holdout_per_class);
  jsonutil::read(j, "seed", c.seed);
}

double palette_distance(const DomainSpec& a, const DomainSpec& b) {
  double d = 0;
  for (std::size_t i = 0; i < 3; ++i) d += color_distance(a.palette[i], b.palette[i]);
  return d / 3.0;
}

std::vector<DomainSpec> make_domain_specs(int seen, int unseen, std::uint64_t seed) {
  constexpr float kMinWithin = 0.25f, kMinBackground = 0.35f, kMinBetween = 0.25f;
  Rng rng(derive_seed(seed, 0xD0A1));
  std::vector<DomainSpec> specs;
  for (int id = 0; id < seen + unseen; ++id) {
    const bool is_seen = id < seen;
    DomainSpec s;
    s.class_id = id;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("cannot place distinct palettes");
      for (auto& c : s.palette)
        for (auto& ch : c) ch = static_cast<float>(rng.uniform(0.05, 0.95));
      bool ok = true;
      for (std::size_t i = 0; i < 3 && ok; ++i) {
        ok = color_distance(s.palette[i], kBackground) >= kMinBackground;
        for (std::size_t j = i + 1; j < 3 && ok; ++j) ok = color_distance(s.palette[i], s.palette[j]) >= kMinWithin;
      }
      for (const auto& o : specs)
        if (ok) ok = palette_distance(s, o) >= kMinBetween;
      if (ok) break;
    }
    s.texture = static_cast<Texture>(rng.below(3));
    s.frequency = static_cast<float>(is_seen ? rng.uniform(2.0, 4.0) : rng.uniform(4.5, 6.0));
    s.eccentricity = static_cast<float>(is_seen ? rng.uniform(0.45, 0.7) : rng.uniform(0.72, 0.85));
    s.limb_thickness = static_cast<float>(is_seen ? rng.uniform(0.03, 0.05) : rng.uniform(0.052, 0.065));
    specs.push_back(s);
  }
  return specs;
}

// ---------------------------------------------------------------------------
// Manifest

const ClassEntry& DatasetManifest::entry(int class_id) const {
  auto it = classes.find(class_id);
  if (it == classes.end()) throw DataError("class " + std::to_string(class_id) + " not in manifest");
  return it->second;
}

int DatasetManifest::training_count(int class_id) const {
  const auto& e = entry(class_id);
  const int n = static_cast<int>(e.samples.size());
  return e.seen ? n - config.holdout_per_class : n;
}

int DatasetManifest::total_samples() const {
  int n = 0;
  for (const auto& [id, e] : classes) n += static_cast<int>(e.samples.size());
  return n;
}

bool DatasetManifest::operator==(const DatasetManifest& o) const {
  return config.seen_classes == o.config.seen_classes && config.unseen_classes == o.config.unseen_classes &&
         config.per_seen == o.config.per_seen && config.per_unseen == o.config.per_unseen &&
         config.resolution == o.config.resolution && config.holdout_per_class == o.config.holdout_per_class &&
         config.seed == o.config.seed && seen_ids == o.seen_ids && unseen_ids == o.unseen_ids && classes == o.classes;
}

namespace {

json spec_to_json(const DomainSpec& s) {
  json pal = json::array();
  for (const auto& c : s.palette) pal.push_back({c[0], c[1], c[2]});
  return {{"class_id", s.class_id},         {"palette", pal},
          {"texture", texture_name(s.texture)}, {"frequency", s.frequency},
          {"eccentricity", s.eccentricity}, {"limb_thickness", s.limb_thickness}};
}

DomainSpec spec_from_json(const json& j) {
  DomainSpec s;
  s.class_id = j.at("class_id").get<int>();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c) s.palette[i][c] = j.at("palette").at(i).at(c).get<float>();
  s.texture = parse_texture(j.at("texture").get<std::string>());
  s.frequency = j.at("frequency").get<float>();
  s.eccentricity = j.at("eccentricity").get<float>();
  s.limb_thickness = j.at("limb_thickness").get<float>();
  return s;
}

json manifest_to_json(const DatasetManifest& m) {
  json classes = json::array();
  for (const auto& [id, e] : m.classes) {
    json samples = json::array();
    for (const auto& f : e.samples) samples.push_back({{"image", f.image}, {"mask", f.mask}});
    classes.push_back({{"split", e.seen ? "seen" : "unseen"}, {"spec", spec_to_json(e.spec)}, {"samples", samples}});
  }
  const auto& c = m.config;
  return {{"format", "fsit-dataset"},
          {"version", 1},
          {"seed", c.seed},
          {"resolution", c.resolution},
          {"seen_classes", c.seen_classes},
          {"unseen_classes", c.unseen_classes},
          {"per_seen", c.per_seen},
          {"per_unseen", c.per_unseen},
          {"holdout_per_class", c.holdout_per_class},
          {"seen_ids", m.seen_ids},
          {"unseen_ids", m.unseen_ids},
          {"classes", classes}};
}

std::string class_dir(bool seen, int id) { return std::string(seen ? "seen" : "unseen") + "/class_" + std::to_string(id); }

}  // namespace

DatasetManifest generate_dataset(const fs::path& root, const DataConfig& config) {
  config.validate();
  if (fs::exists(root / kManifestName)) throw DataError("dataset already exists at " + root.string());
  DatasetManifest m;
  m.root = root;
  m.config = config;
  const auto specs = make_domain_specs(config.seen_classes, config.unseen_classes, config.seed);
  for (const auto& spec : specs) {
    const bool seen = spec.class_id < config.seen_classes;
    (seen ? m.seen_ids : m.unseen_ids).push_back(spec.class_id);
    ClassEntry e{spec, seen, {}};
    const std::string dir = class_dir(seen, spec.class_id);
    fs::create_directories(root / dir);
    const int n = seen ? config.per_seen : config.per_unseen;
    for (int i = 0; i < n; ++i) {
      const std::uint64_t sample_seed = derive_seed(config.seed, static_cast<std::uint64_t>(spec.class_id) + 1,
                                                    static_cast<std::uint64_t>(i));
      Rng pose_rng(sample_seed);
      const Pose pose = random_pose(pose_rng);
      const Sample s = render_sample(spec, pose, derive_seed(sample_seed, 1), config.resolution);
      SampleFiles f{dir + "/img_" + std::to_string(i) + ".png", dir + "/mask_" + std::to_string(i) + ".png"};
      write_png(root / f.image, s.image);
      write_png(root / f.mask, s.mask);
      e.samples.push_back(std::move(f));
    }
    m.classes.emplace(spec.class_id, std::move(e));
  }
  std::ofstream out(root / kManifestName);
  out << manifest_to_json(m).dump(1) << '\n';
  if (!out) throw DataError("cannot write manifest under " + root.string());
  return m;
}

DatasetManifest load_dataset(const fs::path& root) {
  const fs::path mpath = root / kManifestName;
  std::ifstream in(mpath);
  if (!in) throw DataError("missing manifest: " + mpath.string());
  DatasetManifest m;
  m.root = root;
  try {
    const json j = json::parse(in);
    if (j.at("format") != "fsit-dataset") throw DataError("not a dataset manifest: " + mpath.string());
    auto& c = m.config;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.resolution = j.at("resolution").get<int>();
    c.seen_classes = j.at("seen_classes").get<int>();
    c.unseen_classes = j.at("unseen_classes").get<int>();
    c.per_seen = j.at("per_seen").get<int>();
    c.per_unseen = j.at("per_unseen").get<int>();
    c.holdout_per_class = j.at("holdout_per_class").get<int>();
    m.seen_ids = j.at("seen_ids").get<std::vector<int>>();
    m.unseen_ids = j.at("unseen_ids").get<std::vector<int>>();
    for (const auto& jc : j.at("classes")) {
      ClassEntry e;
      e.spec = spec_from_json(jc.at("spec"));
      e.seen = jc.at("split").get<std::string>() == "seen";
      for (const auto& js : jc.at("samples"))
        e.samples.push_back({js.at("image").get<std::string>(), js.at("mask").get<std::string>()});
      if (!m.classes.emplace(e.spec.class_id, std::move(e)).second) throw DataError("duplicate class id in manifest");
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
  }

  // Split hygiene and file checks.
  for (int id : m.seen_ids)
    if (std::find(m.unseen_ids.begin(), m.unseen_ids.end(), id) != m.unseen_ids.end())
      throw DataError("class " + std::to_string(id) + " listed in both splits");
  if (m.seen_ids.size() < 2) throw DataError("manifest lists fewer than 2 seen classes");
  for (const auto& [id, e] : m.classes) {
    const bool listed = std::find(m.seen_ids.begin(), m.seen_ids.end(), id) != m.seen_ids.end();
    if (listed != e.seen) throw DataError("class " + std::to_string(id) + " has inconsistent split");
    if (e.seen && static_cast<int>(e.samples.size()) <= m.config.holdout_per_class)
      throw DataError("class " + std::to_string(id) + " has no training samples");
    for (const auto& f : e.samples) {
      for (const auto* rel : {&f.image, &f.mask})
        if (!fs::exists(root / *rel)) throw DataError("missing file: " + (root / *rel).string());
      const Image8 mask = read_png(root / f.mask, 1);
      if (mask.width != m.config.resolution || mask.height != m.config.resolution)
        throw DataError("wrong mask size: " + (root / f.mask).string());
      for (std::uint8_t v : mask.data)
        if (v >= kNumLabels)
          throw DataError("invalid mask label " + std::to_string(v) + " in " + (root / f.mask).string());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory bank and episodes

ImageBank::ImageBank(const DatasetManifest& manifest, std::span<const int> class_ids)
    : manifest_(manifest), resolution_(manifest.config.resolution) {
  const std::size_t px = static_cast<std::size_t>(resolution_) * resolution_;
  for (const auto& [id, e] : manifest_.classes) {
    if (!class_ids.empty() && std::find(class_ids.begin(), class_ids.end(), id) == class_ids.end()) continue;
    auto& imgs = images_[id];
    auto& masks = masks_[id];
    imgs.reserve(e.samples.size() * px * 3);
    masks.reserve(e.samples.size() * px);
    for (const auto& f : e.samples) {
      const Image8 img = read_png(manifest_.root / f.image, 3);
      const Image8 mask = read_png(manifest_.root / f.mask, 1);
      if (img.width != resolution_ || img.height != resolution_ || mask.width != resolution_ || mask.height != resolution_)
        throw DataError("unexpected image size in " + f.image);
      imgs.insert(imgs.end(), img.data.begin(), img.data.end());
      masks.insert(masks.end(), mask.data.begin(), mask.data.end());
    }
  }
}

int ImageBank::count(int class_id) const {
  auto it = images_.find(class_id);
  if (it == images_.end()) throw DataError("class " + std::to_string(class_id) + " not loaded");
  return static_cast<int>(it->second.size() / (static_cast<std::size_t>(resolution_) * resolution_ * 3));
}

const std::uint8_t* ImageBank::rgb(int class_id, int index) const {
  if (index < 0 || index >= count(class_id)) throw std::out_of_range("image index out of range");
  return images_.at(class_id).data() + static_cast<std::size_t>(index) * resolution_ * resolution_ * 3;
}

const std::uint8_t* ImageBank::mask(int class_id, int index) const {
  if (index < 0 || index >= count(class_id)) throw std::out_of_range("mask index out of range");
  return masks_.at(class_id).data() + static_cast<std::size_t>(index) * resolution_ * resolution_;
}

Tensor<float> ImageBank::batch(std::span<const std::pair<int, int>> items) const {
  Tensor<float> t({static_cast<int>(items.size()), 3, resolution_, resolution_});
  const std::size_t stride = static_cast<std::size_t>(3) * resolution_ * resolution_;
  for (std::size_t i = 0; i < items.size(); ++i)
    image_into_tensor(rgb(items[i].first, items[i].second), resolution_, resolution_, t.ptr() + i * stride);
  return t;
}

Episode sample_episode(const ImageBank& bank, int batch, int k, Rng& rng) {
  if (batch < 1 || k < 1) throw std::invalid_argument("sample_episode: batch and k must be positive");
  const auto& m = bank.manifest();
  const auto& seen = m.seen_ids;
  for (int id : seen)
    if (k > m.training_count(id))
      throw std::invalid_argument("k=" + std::to_string(k) + " exceeds the size of class " + std::to_string(id));
  Episode ep;
  std::vector<std::pair<int, int>> content;
  std::vector<std::vector<std::pair<int, int>>> shots(static_cast<std::size_t>(k));
  for (int i = 0; i < batch; ++i) {
    const int cc = seen[rng.below(seen.size())];
    const int ci = static_cast<int>(rng.below(static_cast<std::uint64_t>(m.training_count(cc))));
    ep.content_class.push_back(cc);
    ep.content_index.push_back(ci);
    content.emplace_back(cc, ci);

    const int sc = seen[rng.below(seen.size())];
    const int pool = m.training_count(sc);
    std::vector<int> picked;
    while (static_cast<int>(picked.size()) < k) {
      const int idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(pool)));
      if (std::find(picked.begin(), picked.end(), idx) == picked.end()) picked.push_back(idx);
    }
    for (int j = 0; j < k; ++j) shots[static_cast<std::size_t>(j)].emplace_back(sc, picked[static_cast<std::size_t>(j)]);
    ep.style_class.push_back(sc);
    ep.style_index.push_back(std::move(picked));
  }
  ep.content = bank.batch(content);
  for (const auto& s : shots) ep.styles.push_back(bank.batch(s));
  return ep;
}

}  // namespace fsit
