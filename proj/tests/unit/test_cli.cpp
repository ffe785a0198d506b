#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fsit/cli.hpp"
#include "fsit/image_io.hpp"
#include "fsit/training.hpp"
#include "support/tempdir.hpp"
#include "support/tree.hpp"

using namespace fsit;
using fsit::testing::TempDir;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result fsit_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fsit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class Cwd {
 public:
  explicit Cwd(const fs::path& p) : saved_(fs::current_path()) { fs::current_path(p); }
  ~Cwd() { fs::current_path(saved_); }

 private:
  fs::path saved_;
};

const char* kSmallModel = R"({"model": {"content_stem": 8, "content_widths": [8, 16], "style_stem": 8,
  "style_widths": [8, 16, 16], "style_dim": 16, "csb_dim": 8, "decoder_res_blocks": 1,
  "decoder_widths": [16, 8], "dis_stem": 8, "dis_widths": [8, 16]}})";

// dataset, config file and a 10-iteration checkpoint shared by the tests
struct Workspace {
  TempDir dir{"fsit_cli"};
  fs::path data, config, run;

  Workspace() {
    data = dir / "data";
    config = dir / "small.json";
    run = dir / "run";
    std::ofstream(config) << kSmallModel;
    REQUIRE(fsit_cli({"--out", data.string(), "--seed", "7", "gen-data", "--seen-classes", "3", "--unseen-classes",
                      "2", "--per-seen", "40", "--per-unseen", "40", "--resolution", "16", "--holdout", "10"})
                .code == 0);
    REQUIRE(fsit_cli({"--config", config.string(), "--out", run.string(), "--seed", "1", "train", "--data",
                      data.string(), "--iters", "10", "--batch", "4", "--checkpoint-every", "5"})
                .code == 0);
  }
  std::string image(const std::string& split, int cls, int idx) const {
    return (data / split / ("class_" + std::to_string(cls)) / ("img_" + std::to_string(idx) + ".png")).string();
  }
  std::string checkpoint() const { return (run / "final.fsit").string(); }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

int line_count(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

Image8 panel(const Image8& grid, int col, int row = 0, int size = 16) {
  Image8 p{size, size, 3, {}};
  const int x0 = col * (size + 2), y0 = row * (size + 2);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        p.data.push_back(grid.data[(static_cast<std::size_t>(y0 + y) * grid.width + x0 + x) * 3 + c]);
  return p;
}

}  // namespace

TEST_CASE("cli: gen-data rejects a single seen class and an existing dataset") {
  TempDir t;
  CHECK(fsit_cli({"--out", (t / "d").string(), "gen-data", "--seen-classes", "1"}).code == cli::kExitConfig);
  CHECK(!fs::exists(t / "d" / cli::kRunConfigName));
  CHECK(fsit_cli({"--out", ws().data.string(), "gen-data"}).code == cli::kExitData);
}

TEST_CASE("cli: gen-data with a seed reproduces the tree byte for byte") {
  TempDir a, b;
  const std::vector<std::string> args{"--out", "d1", "--seed", "7", "gen-data", "--seen-classes", "2",
                                      "--unseen-classes", "1", "--per-seen", "6", "--per-unseen", "3",
                                      "--resolution", "16", "--holdout", "2"};
  {
    Cwd cd(a.path());
    REQUIRE(fsit_cli(args).code == 0);
  }
  {
    Cwd cd(b.path());
    REQUIRE(fsit_cli(args).code == 0);
  }
  const auto ta = testing::tree_snapshot(a / "d1"), tb = testing::tree_snapshot(b / "d1");
  CHECK(ta.size() == 2 * 15 + 2);  // images, masks, manifest, run_config
  CHECK(testing::first_difference(ta, tb).empty());
  const json rc = json::parse(ta.at(cli::kRunConfigName));
  CHECK(rc.at("command") == "gen-data");
  CHECK(rc.at("data").at("seed") == 7);
}

TEST_CASE("cli: train writes one loss row per iteration and records the variant") {
  CHECK(line_count(ws().run / kLossLogName) == 11);
  CHECK(fs::exists(ws().run / "checkpoints/iter_000005.fsit"));
  const json rc = json::parse(testing::file_bytes(ws().run / cli::kRunConfigName));
  CHECK(rc.at("model").at("resolution") == 16);
  CHECK(rc.at("model").at("num_classes") == 3);

  TempDir t;
  REQUIRE(fsit_cli({"--config", ws().config.string(), "--out", t.path().string(), "train", "--data",
                    ws().data.string(), "--iters", "2", "--batch", "2", "--variant", "no_coco"})
              .code == 0);
  CHECK(checkpoint_metadata(t / "final.fsit").at("variant") == "no_coco");
  CHECK(fsit_cli({"--out", t.path().string(), "train", "--data", ws().data.string(), "--variant", "no_such"}).code ==
        cli::kExitConfig);
  CHECK(fsit_cli({"--out", t.path().string(), "train", "--data", (t / "missing").string()}).code == cli::kExitData);
}

TEST_CASE("cli: resume continues exactly where the uninterrupted run goes") {
  TempDir t;
  const std::string cfg = ws().config.string(), data = ws().data.string();
  auto train = [&](const fs::path& out, const std::string& iters, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"--config", cfg, "--out", out.string(), "--seed", "2", "train", "--data", data,
                               "--iters", iters, "--batch", "3", "--checkpoint-every", "3"};
    a.insert(a.end(), extra.begin(), extra.end());
    return fsit_cli(a).code;
  };
  REQUIRE(train(t / "whole", "6") == 0);
  REQUIRE(train(t / "split", "3") == 0);
  REQUIRE(fsit_cli({"--out", (t / "split").string(), "train", "--data", data, "--iters", "6", "--resume",
                    "checkpoints/iter_000003.fsit"})
              .code == 0);
  CHECK(testing::file_bytes(t / "whole/final.fsit") == testing::file_bytes(t / "split/final.fsit"));
  CHECK(testing::file_bytes(t / "whole" / kLossLogName) == testing::file_bytes(t / "split" / kLossLogName));
  // resuming into a fresh directory keeps a well-formed log
  REQUIRE(fsit_cli({"--out", (t / "fresh").string(), "train", "--data", data, "--iters", "6", "--resume",
                    (t / "split/checkpoints/iter_000003.fsit").string()})
              .code == 0);
  CHECK(line_count(t / "fresh" / kLossLogName) == 4);
  CHECK(testing::file_bytes(t / "whole/final.fsit") == testing::file_bytes(t / "fresh/final.fsit"));
  CHECK(fsit_cli({"--out", (t / "x").string(), "--seed", "9", "train", "--data", data, "--resume",
                  (t / "split/checkpoints/iter_000003.fsit").string()})
            .code == cli::kExitConfig);
}

TEST_CASE("cli: diverging training exits with code 4") {
  TempDir t;
  std::ofstream(t / "diverge.json") << R"({"train": {"divergence_threshold": 1e-6}})";
  const Result r = fsit_cli({"--config", (t / "diverge.json").string(), "--out", (t / "r").string(), "train",
                             "--data", ws().data.string(), "--iters", "2", "--batch", "2"});
  CHECK(r.code == cli::kExitDivergence);
  CHECK(r.err.find("diverged") != std::string::npos);
}

TEST_CASE("cli: config errors exit with code 2") {
  TempDir t;
  std::ofstream(t / "bad.json") << R"({"modle": {}})";
  CHECK(fsit_cli({"--config", (t / "bad.json").string(), "--out", t.path().string(), "gen-data"}).code ==
        cli::kExitConfig);
  CHECK(fsit_cli({"--config", (t / "none.json").string(), "--out", t.path().string(), "gen-data"}).code ==
        cli::kExitConfig);
  CHECK(fsit_cli({"--device", "cuda", "--out", t.path().string(), "gen-data"}).code == cli::kExitConfig);
  CHECK(fsit_cli({"--out", t.path().string(), "train"}).code == cli::kExitConfig);
  CHECK(fsit_cli({"frobnicate"}).code == cli::kExitConfig);
  CHECK(fsit_cli({"--help"}).code == cli::kExitOk);
}

TEST_CASE("cli: translate with a duplicated style file equals one shot") {
  TempDir t;
  const std::string c = ws().image("seen", 0, 0), s = ws().image("unseen", 3, 0);
  REQUIRE(fsit_cli({"--out", (t / "one").string(), "translate", "--checkpoint", ws().checkpoint(), "--content", c,
                    "--style", s})
              .code == 0);
  REQUIRE(fsit_cli({"--out", (t / "two").string(), "translate", "--checkpoint", ws().checkpoint(), "--content", c,
                    "--style", s + "," + s, "--k", "2"})
              .code == 0);
  CHECK(read_png(t / "one/translate.png", 3) == read_png(t / "two/translate.png", 3));
  const json rec = json::parse(testing::file_bytes(t / "two/translate.png.json"));
  CHECK(rec.at("k") == 2);
  CHECK(fs::exists(t / "two" / cli::kRunConfigName));
  CHECK(fsit_cli({"--out", (t / "bad").string(), "translate", "--checkpoint", ws().checkpoint(), "--content", c,
                  "--style", s, "--k", "2"})
            .code == cli::kExitConfig);
  CHECK(fsit_cli({"--out", (t / "bad").string(), "translate", "--checkpoint", ws().checkpoint(), "--content",
                  (t / "nope.png").string(), "--style", s})
            .code == cli::kExitData);
}

TEST_CASE("cli: blend endpoints match single-style translations") {
  TempDir t;
  const std::string c = ws().image("seen", 1, 2), a = ws().image("unseen", 3, 1), b = ws().image("unseen", 4, 1);
  auto translate = [&](const std::string& style, const std::string& dir) {
    REQUIRE(fsit_cli({"--out", (t / dir).string(), "translate", "--checkpoint", ws().checkpoint(), "--content", c,
                      "--style", style})
                .code == 0);
    return read_png(t / dir / "translate.png", 3);
  };
  const Image8 ya = translate(a, "a"), yb = translate(b, "b");
  REQUIRE(fsit_cli({"--out", (t / "blend").string(), "blend", "--checkpoint", ws().checkpoint(), "--content", c,
                    "--style-a", a, "--style-b", b, "--alphas", "0,1"})
              .code == 0);
  const Image8 grid = read_png(t / "blend/blend.png", 3);
  CHECK(grid.width == 2 * 16 + 2);
  CHECK(panel(grid, 0) == ya);
  CHECK(panel(grid, 1) == yb);
  CHECK(fsit_cli({"--out", (t / "bad").string(), "blend", "--checkpoint", ws().checkpoint(), "--content", c,
                  "--style-a", a, "--style-b", b, "--alphas", "0.5,1.5"})
            .code == cli::kExitConfig);
}

TEST_CASE("cli: csb-sweep writes one panel per lambda") {
  TempDir t;
  REQUIRE(fsit_cli({"--out", t.path().string(), "csb-sweep", "--checkpoint", ws().checkpoint(), "--content",
                    ws().image("seen", 2, 3), "--style", ws().image("unseen", 3, 2), "--lambda", "0,1,2"})
              .code == 0);
  const Image8 grid = read_png(t / "csb_sweep.png", 3);
  CHECK(grid.width == 3 * 16 + 2 * 2);
  CHECK(grid.height == 16);
  CHECK(!(panel(grid, 0) == panel(grid, 2)));
  const json rec = json::parse(testing::file_bytes(t / "csb_sweep.png.json"));
  CHECK(rec.at("lambda").size() == 3);
}

TEST_CASE("cli: eval is reproducible and reuses probes") {
  TempDir t;
  const std::vector<std::string> common{"eval", "--checkpoint", ws().checkpoint(), "--data", ws().data.string(),
                                        "--per-class", "8", "--pairs", "2", "--crops", "4"};
  auto eval = [&](const fs::path& out, std::vector<std::string> extra) {
    std::vector<std::string> a{"--out", out.string(), "--seed", "3"};
    a.insert(a.end(), common.begin(), common.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return fsit_cli(a);
  };
  REQUIRE(eval(t / "e1", {}).code == 0);
  REQUIRE(fs::exists(t / "e1/probes.fsit"));
  const Result second = eval(t / "e2", {"--probes", (t / "e1/probes.fsit").string()});
  REQUIRE(second.code == 0);
  CHECK(second.err.find("reusing probes") != std::string::npos);
  CHECK(testing::file_bytes(t / "e1/metrics.json") == testing::file_bytes(t / "e2/metrics.json"));
  CHECK(testing::file_bytes(t / "e1/style_deviation.csv") == testing::file_bytes(t / "e2/style_deviation.csv"));
  CHECK(line_count(t / "e1/style_deviation.csv") == 1 + 2 * 4);

  // the barely trained checkpoint still yields finite numbers
  const json m = json::parse(testing::file_bytes(t / "e1/metrics.json"));
  CHECK(std::isfinite(m.at("mfid").get<double>()));
  CHECK(std::isfinite(m.at("miou").get<double>()));
  CHECK(std::isfinite(m.at("style_deviation").at("median").get<double>()));

  CHECK(eval(t / "e3", {"--probes", (t / "missing.fsit").string()}).code == cli::kExitData);
}

TEST_CASE("cli: style-variance emits one row per crop") {
  TempDir t;
  const Result r = fsit_cli({"--out", t.path().string(), "--seed", "4", "style-variance", "--checkpoint",
                             ws().checkpoint(), "--data", ws().data.string(), "--crops", "32"});
  REQUIRE(r.code == 0);
  CHECK(line_count(t / "style_variance.csv") == 33);
  CHECK(r.out.find("median deviation") != std::string::npos);
  const json s = json::parse(testing::file_bytes(t / "style_variance.json"));
  CHECK(s.at("pairs").size() == 1);
  CHECK(fsit_cli({"--out", t.path().string(), "style-variance", "--checkpoint", ws().checkpoint(), "--data",
                  ws().data.string(), "--crops", "1"})
            .code == cli::kExitConfig);
}
