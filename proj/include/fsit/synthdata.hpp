#pragma once

// Procedural multi-domain dataset: each class is a textured body ellipse
// with four limbs, rendered with a pixel-exact part mask
// (0 background, 1 body, 2 limbs).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsit/image_io.hpp"
#include "fsit/rng.hpp"
#include "fsit/tensor.hpp"

namespace fsit {

enum class Texture { Stripes, Dots, Checker };

std::string texture_name(Texture t);
Texture parse_texture(const std::string& name);

using Rgb = std::array<float, 3>;

inline constexpr Rgb kBackground{0.5f, 0.5f, 0.5f};
inline constexpr std::uint8_t kLabelBackground = 0, kLabelBody = 1, kLabelLimb = 2;
inline constexpr int kNumLabels = 3;

struct DomainSpec {
  int class_id = 0;
  std::array<Rgb, 3> palette{};  // body A, body B, limbs
  Texture texture = Texture::Stripes;
  float frequency = 3.0f;        // texture periods across the body
  float eccentricity = 0.6f;     // minor / major axis
  float limb_thickness = 0.045f; // fraction of image width at scale 1

  bool operator==(const DomainSpec&) const = default;
};

struct Pose {
  float cx = 0.5f, cy = 0.5f;  // body center, fraction of image size
  float rotation = 0.0f;       // radians
  float scale = 1.0f;
  std::array<float, 4> limb_angles{};  // offsets from the outward normal, radians

  bool operator==(const Pose&) const = default;
};

struct Sample {
  Image8 image;  // RGB
  Image8 mask;   // single channel, labels {0,1,2}
  Pose pose;
  int class_id = 0;
};

/// Throws std::invalid_argument for scale <= 0 or a non-positive resolution.
Sample render_sample(const DomainSpec& spec, const Pose& pose, std::uint64_t seed, int resolution = 64);
Pose random_pose(Rng& rng);

struct DataConfig {
  int seen_classes = 20;
  int unseen_classes = 5;
  int per_seen = 500;
  int per_unseen = 100;
  int resolution = 64;
  /// Trailing samples of every seen class kept out of the training sampler.
  int holdout_per_class = 50;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);

/// Seen specs use class ids [0, seen), unseen [seen, seen + unseen). Unseen
/// domains draw texture frequency and eccentricity from ranges disjoint from
/// the seen ones, and every palette differs from all others.
std::vector<DomainSpec> make_domain_specs(int seen, int unseen, std::uint64_t seed);
double palette_distance(const DomainSpec& a, const DomainSpec& b);

struct SampleFiles {
  std::string image;  // relative to the dataset root
  std::string mask;
  bool operator==(const SampleFiles&) const = default;
};

struct ClassEntry {
  DomainSpec spec;
  bool seen = true;
  std::vector<SampleFiles> samples;
  bool operator==(const ClassEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  DataConfig config;
  std::vector<int> seen_ids;
  std::vector<int> unseen_ids;
  std::map<int, ClassEntry> classes;

  const ClassEntry& entry(int class_id) const;
  /// Samples of a seen class available to the training sampler.
  int training_count(int class_id) const;
  int total_samples() const;
  bool operator==(const DatasetManifest& o) const;
};

inline constexpr const char* kManifestName = "manifest";

/// Writes images, masks and the manifest under `root`. Throws DataError if
/// `root` already holds a manifest.
DatasetManifest generate_dataset(const std::filesystem::path& root, const DataConfig& config);
/// Reads and validates the manifest and every referenced file. Throws DataError naming the offending file.
DatasetManifest load_dataset(const std::filesystem::path& root);

/// In-memory copy of the decoded images and masks of selected classes.
class ImageBank {
 public:
  ImageBank() = default;
  /// Loads every class of the manifest (or only `class_ids` when non-empty).
  explicit ImageBank(const DatasetManifest& manifest, std::span<const int> class_ids = {});

  const DatasetManifest& manifest() const { return manifest_; }
  int resolution() const { return resolution_; }
  bool has_class(int class_id) const { return images_.count(class_id) > 0; }
  int count(int class_id) const;
  const std::uint8_t* rgb(int class_id, int index) const;
  const std::uint8_t* mask(int class_id, int index) const;
  /// Stacks the given (class, index) items into a (B,3,H,W) tensor.
  Tensor<float> batch(std::span<const std::pair<int, int>> items) const;

 private:
  DatasetManifest manifest_;
  int resolution_ = 0;
  std::map<int, std::vector<std::uint8_t>> images_;
  std::map<int, std::vector<std::uint8_t>> masks_;
};

struct Episode {
  Tensor<float> content;             // (B,3,H,W)
  std::vector<int> content_class;
  std::vector<int> content_index;
  std::vector<Tensor<float>> styles; // k tensors, each (B,3,H,W)
  std::vector<int> style_class;      // one class per item
  std::vector<std::vector<int>> style_index;  // [item][shot]
  bool reconstruction = true;
};

/// Content uniform over seen classes; per item one style class uniform over
/// seen classes and k distinct images of it. Held-out samples never appear.
Episode sample_episode(const ImageBank& bank, int batch, int k, Rng& rng);

}  // namespace fsit
