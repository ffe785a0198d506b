#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "fsit/errors.hpp"
#include "fsit/synthdata.hpp"
#include "support/tempdir.hpp"

using namespace fsit;
namespace fs = std::filesystem;

namespace {

int count_label(const Sample& s, std::uint8_t label) {
  int n = 0;
  for (auto v : s.mask.data) n += v == label;
  return n;
}

DataConfig tiny_config(std::uint64_t seed = 3) {
  DataConfig c;
  c.seen_classes = 3;
  c.unseen_classes = 2;
  c.per_seen = 12;
  c.per_unseen = 4;
  c.holdout_per_class = 2;
  c.resolution = 32;
  c.seed = seed;
  return c;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

float dist(const Rgb& a, const Rgb& b) {
  float d = 0;
  for (int i = 0; i < 3; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

}  // namespace

TEST_CASE("render_sample is deterministic and scale-consistent") {
  const auto specs = make_domain_specs(4, 1, 11);
  Pose pose;
  pose.rotation = 0.7f;
  const Sample a = render_sample(specs[0], pose, 5);
  const Sample b = render_sample(specs[0], pose, 5);
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK(render_sample(specs[0], pose, 6).image != a.image);  // pixel noise follows the seed
  CHECK(render_sample(specs[0], pose, 6).mask == a.mask);

  for (float rot : {0.0f, 0.4f, 1.3f, 2.9f}) {
    Pose small;
    small.rotation = rot;
    small.scale = 0.6f;
    Pose big = small;
    big.scale = 1.2f;
    const double ratio = static_cast<double>(count_label(render_sample(specs[1], big, 1), kLabelBody)) /
                         count_label(render_sample(specs[1], small, 1), kLabelBody);
    CHECK(std::abs(ratio - 4.0) / 4.0 < 0.1);
  }

  Pose folded;
  folded.limb_angles = {std::numbers::pi_v<float>, std::numbers::pi_v<float>, std::numbers::pi_v<float>,
                        std::numbers::pi_v<float>};
  folded.scale = 0.6f;
  const Sample f = render_sample(specs[2], folded, 2);
  CHECK(count_label(f, kLabelBody) > 0);

  Pose bad;
  bad.scale = 0;
  CHECK_THROWS_AS(render_sample(specs[0], bad, 1), std::invalid_argument);
}

TEST_CASE("rendered samples satisfy mask invariants") {
  const auto specs = make_domain_specs(6, 2, 4);
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const auto& spec = specs[static_cast<std::size_t>(i) % specs.size()];
    const Sample s = render_sample(spec, random_pose(rng), static_cast<std::uint64_t>(i));
    const int n = static_cast<int>(s.mask.data.size());
    int body = 0, aligned = 0;
    for (int p = 0; p < n; ++p) {
      REQUIRE(s.mask.data[p] < kNumLabels);
      if (s.mask.data[p] != kLabelBody) continue;
      ++body;
      Rgb c{s.image.data[p * 3] / 255.0f, s.image.data[p * 3 + 1] / 255.0f, s.image.data[p * 3 + 2] / 255.0f};
      const float to_body = std::min(dist(c, spec.palette[0]), dist(c, spec.palette[1]));
      aligned += to_body < dist(c, kBackground);
    }
    CHECK(body >= n / 100);
    CHECK(aligned >= 0.95 * body);
  }
}

TEST_CASE("domain specs: palettes distinct, unseen ranges disjoint") {
  const auto specs = make_domain_specs(20, 5, 0);
  REQUIRE(specs.size() == 25);
  float seen_freq_max = 0, unseen_freq_min = 100, seen_ecc_max = 0, unseen_ecc_min = 1;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    CHECK(specs[i].class_id == static_cast<int>(i));
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b) CHECK(dist(specs[i].palette[a], specs[i].palette[b]) >= 0.2f);
    for (std::size_t j = 0; j < i; ++j) CHECK(palette_distance(specs[i], specs[j]) >= 0.2);
    if (i < 20) {
      seen_freq_max = std::max(seen_freq_max, specs[i].frequency);
      seen_ecc_max = std::max(seen_ecc_max, specs[i].eccentricity);
    } else {
      unseen_freq_min = std::min(unseen_freq_min, specs[i].frequency);
      unseen_ecc_min = std::min(unseen_ecc_min, specs[i].eccentricity);
    }
  }
  CHECK(seen_freq_max < unseen_freq_min);
  CHECK(seen_ecc_max < unseen_ecc_min);
  CHECK(make_domain_specs(20, 5, 0) == specs);
}

TEST_CASE("generate, load and validate a dataset") {
  testing::TempDir tmp;
  const auto m = generate_dataset(tmp / "a", tiny_config());
  CHECK(m.total_samples() == 3 * 12 + 2 * 4);
  CHECK(m.seen_ids == std::vector<int>{0, 1, 2});
  CHECK(m.unseen_ids == std::vector<int>{3, 4});
  CHECK(m.training_count(0) == 10);
  CHECK(m.training_count(3) == 4);
  CHECK(fs::exists(tmp / "a/seen/class_1/img_11.png"));
  CHECK(fs::exists(tmp / "a/unseen/class_4/mask_3.png"));

  std::set<std::string> seen_files, unseen_files;
  for (const auto& [id, e] : m.classes)
    for (const auto& f : e.samples) (e.seen ? seen_files : unseen_files).insert(f.image);
  for (const auto& f : unseen_files) CHECK(seen_files.count(f) == 0);

  // Same seed, second root: identical manifest and bytes.
  const auto m2 = generate_dataset(tmp / "b", tiny_config());
  CHECK(read_bytes(tmp / "a/manifest") == read_bytes(tmp / "b/manifest"));
  for (const auto& [id, e] : m.classes)
    for (const auto& f : e.samples) {
      REQUIRE(read_bytes(tmp.path() / "a" / f.image) == read_bytes(tmp.path() / "b" / f.image));
      REQUIRE(read_bytes(tmp.path() / "a" / f.mask) == read_bytes(tmp.path() / "b" / f.mask));
    }
  CHECK_THROWS_AS(generate_dataset(tmp / "a", tiny_config()), DataError);

  const auto loaded = load_dataset(tmp / "a");
  CHECK(loaded == m);

  // Missing file is named in the error.
  fs::remove(tmp / "b/seen/class_2/img_5.png");
  try {
    load_dataset(tmp / "b");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("class_2/img_5.png") != std::string::npos);
  }

  // Corrupt mask label.
  Image8 mask = read_png(tmp / "a/seen/class_0/mask_3.png", 1);
  mask.data[10] = 7;
  write_png(tmp / "a/seen/class_0/mask_3.png", mask);
  CHECK_THROWS_WITH_AS(load_dataset(tmp / "a"), doctest::Contains("label 7"), DataError);

  CHECK_THROWS_AS(load_dataset(tmp / "nowhere"), DataError);
  auto bad = tiny_config();
  bad.seen_classes = 1;
  CHECK_THROWS_AS(generate_dataset(tmp / "c", bad), ConfigError);
}

TEST_CASE("png round trip") {
  testing::TempDir tmp;
  Image8 img{5, 3, 3, {}};
  for (int i = 0; i < 45; ++i) img.data.push_back(static_cast<std::uint8_t>(i * 5));
  write_png(tmp / "x.png", img);
  CHECK(read_png(tmp / "x.png", 3) == img);
  const Tensor<float> t = image_to_tensor(img);
  CHECK(t.shape() == Shape{1, 3, 3, 5});
  CHECK(tensor_to_image(t) == img);
  CHECK_THROWS_AS(read_png(tmp / "missing.png", 3), DataError);
}

TEST_CASE("episode sampler") {
  testing::TempDir tmp;
  const auto m = generate_dataset(tmp.path(), tiny_config(9));
  const ImageBank bank(m);

  Rng rng(1);
  const Episode ep = sample_episode(bank, 16, 1, rng);
  CHECK(ep.content.shape() == Shape{16, 3, 32, 32});
  REQUIRE(ep.styles.size() == 1);
  CHECK(ep.styles[0].shape() == Shape{16, 3, 32, 32});
  for (int c : ep.style_class) CHECK(c < 3);

  Rng r1(42), r2(42);
  const Episode e1 = sample_episode(bank, 4, 3, r1), e2 = sample_episode(bank, 4, 3, r2);
  CHECK(e1.content == e2.content);
  CHECK(e1.style_index == e2.style_index);
  for (const auto& idx : e1.style_index) CHECK(std::set<int>(idx.begin(), idx.end()).size() == 3);
  // Each shot tensor holds the image it claims.
  const std::vector<std::pair<int, int>> one{{e1.style_class[2], e1.style_index[2][1]}};
  CHECK(e1.styles[1].slice_batch(2, 3) == bank.batch(one));

  CHECK_THROWS_AS(sample_episode(bank, 4, 11, rng), std::invalid_argument);

  // Class frequencies over 10 000 draws, held-out samples never drawn.
  std::vector<int> content_counts(3), style_counts(3);
  for (int it = 0; it < 100; ++it) {
    const Episode e = sample_episode(bank, 100, 1, rng);
    for (int i = 0; i < 100; ++i) {
      ++content_counts[static_cast<std::size_t>(e.content_class[i])];
      ++style_counts[static_cast<std::size_t>(e.style_class[i])];
      REQUIRE(e.content_index[i] < 10);
      REQUIRE(e.style_index[i][0] < 10);
    }
  }
  const double p = 1.0 / 3, n = 10000, sigma = std::sqrt(n * p * (1 - p));
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(content_counts[c] - n * p) < 3 * sigma);
    CHECK(std::abs(style_counts[c] - n * p) < 3 * sigma);
  }
}
