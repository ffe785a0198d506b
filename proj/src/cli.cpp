#include "fsit/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fsit/errors.hpp"
#include "fsit/eval.hpp"
#include "fsit/image_io.hpp"
#include "fsit/inference.hpp"
#include "fsit/json_util.hpp"
#include "fsit/simd/kernels.hpp"
#include "fsit/synthdata.hpp"
#include "fsit/training.hpp"

namespace fsit::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string device = "auto";
};

// Everything a command needs once flags and the config file are merged.
struct Context {
  Globals flags;
  json file = json::object();
  std::uint64_t seed = 0;
  fs::path out;
  std::ostream* out_stream = nullptr;
  std::ostream* log = nullptr;

  fs::path path(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : out / q;
  }

  template <typename C>
  C section(const char* name) const {
    C c{};
    if (auto it = file.find(name); it != file.end()) c = it->template get<C>();
    return c;
  }
};

Context resolve(const Globals& g, std::ostream& out, std::ostream& err) {
  Context ctx;
  ctx.flags = g;
  ctx.out_stream = &out;
  ctx.log = &err;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw ConfigError("cannot read config file " + g.config);
    try {
      ctx.file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + g.config + " is not valid JSON: " + e.what());
    }
    jsonutil::require_known(ctx.file, "config", {"seed", "data", "model", "train", "probes", "eval", "crop"});
  }
  ctx.seed = g.seed ? *g.seed : ctx.file.value("seed", std::uint64_t{0});
  try {
    simd::select_backend(simd::parse_backend(g.device));
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  ctx.out = fs::path(g.out);
  // created up front so paths like <out>/../data resolve
  fs::create_directories(ctx.out);
  return ctx;
}

CropConfig crop_config(const Context& ctx) {
  CropConfig c;
  if (auto it = ctx.file.find("crop"); it != ctx.file.end()) {
    jsonutil::require_known(*it, "crop", {"min_area", "max_area", "aspect_jitter"});
    jsonutil::read(*it, "min_area", c.min_area);
    jsonutil::read(*it, "max_area", c.max_area);
    jsonutil::read(*it, "aspect_jitter", c.aspect_jitter);
  }
  c.validate();
  return c;
}

/// Persists the resolved configuration before the command does any work.
void write_run_config(const Context& ctx, const std::string& command, const json& body) {
  json rc = body;
  rc["command"] = command;
  rc["version"] = FSIT_VERSION;
  if (!rc.contains("seed")) rc["seed"] = ctx.seed;
  rc["out"] = ctx.flags.out;
  rc["device"] = ctx.flags.device;
  rc["backend"] = std::string(simd::backend_name(simd::active_backend()));
  if (!ctx.flags.config.empty()) rc["config_file"] = ctx.flags.config;
  fs::create_directories(ctx.out);
  std::ofstream f(ctx.out / kRunConfigName, std::ios::trunc);
  f << rc.dump(2) << "\n";
  if (!f) throw DataError("cannot write " + (ctx.out / kRunConfigName).string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw DataError("cannot write " + path.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// -- gen-data -----------------------------------------------------------------

struct GenDataFlags {
  std::optional<int> seen, unseen, per_seen, per_unseen, resolution, holdout;
};

void cmd_gen_data(const Context& ctx, const GenDataFlags& f) {
  DataConfig c = ctx.section<DataConfig>("data");
  if (f.seen) c.seen_classes = *f.seen;
  if (f.unseen) c.unseen_classes = *f.unseen;
  if (f.per_seen) c.per_seen = *f.per_seen;
  if (f.per_unseen) c.per_unseen = *f.per_unseen;
  if (f.resolution) c.resolution = *f.resolution;
  if (f.holdout) c.holdout_per_class = *f.holdout;
  c.seed = ctx.seed;
  c.validate();
  // checked here so an existing dataset keeps its run_config
  if (fs::exists(ctx.out / kManifestName)) throw DataError(ctx.out.string() + " already holds a dataset");
  write_run_config(ctx, "gen-data", {{"data", c}});
  const DatasetManifest m = generate_dataset(ctx.out, c);
  *ctx.out_stream << "wrote " << m.total_samples() << " samples (" << m.seen_ids.size() << " seen, "
                  << m.unseen_ids.size() << " unseen classes) to " << ctx.out.string() << "\n";
}

// -- train --------------------------------------------------------------------

struct TrainFlags {
  std::string data;
  std::optional<std::string> variant, resume;
  std::optional<int> iters, batch, k, checkpoint_every, heldout_every, heldout_per_class;
  std::optional<double> lr;
};

void cmd_train(const Context& ctx, const TrainFlags& f) {
  const ImageBank bank(load_dataset(ctx.path(f.data)));
  const auto& manifest = bank.manifest();
  ModelConfig mc;
  TrainConfig tc;
  std::optional<fs::path> resume;
  if (f.resume) {
    // the checkpoint owns the model and optimizer settings
    resume = ctx.path(*f.resume);
    const json meta = checkpoint_metadata(*resume);
    mc = meta.at("model").get<ModelConfig>();
    tc = meta.at("train").get<TrainConfig>();
    if (f.variant && parse_variant(*f.variant) != mc.variant)
      throw ConfigError("--variant " + *f.variant + " differs from the checkpoint's " +
                        std::string(variant_name(mc.variant)));
    if (ctx.flags.seed && *ctx.flags.seed != tc.seed)
      throw ConfigError("--seed differs from the checkpoint's seed " + std::to_string(tc.seed));
  } else {
    mc = ctx.section<ModelConfig>("model");
    tc = ctx.section<TrainConfig>("train");
    if (ctx.file.contains("model") && ctx.file["model"].contains("resolution") && mc.resolution != bank.resolution())
      throw ConfigError("model resolution " + std::to_string(mc.resolution) + " differs from the dataset's " +
                        std::to_string(bank.resolution()));
    mc.resolution = bank.resolution();
    mc.num_classes = static_cast<int>(manifest.seen_ids.size());
    if (f.variant) mc.variant = parse_variant(*f.variant);
    mc.seed = ctx.seed;
    tc.seed = ctx.seed;
    if (f.batch) tc.batch = *f.batch;
    if (f.k) tc.k_shot = *f.k;
    if (f.lr) tc.lr = *f.lr;
    if (f.heldout_per_class) tc.heldout_per_class = *f.heldout_per_class;
  }
  if (f.iters) tc.iterations = *f.iters;
  if (f.checkpoint_every) tc.checkpoint_every = *f.checkpoint_every;
  if (f.heldout_every) tc.heldout_every = *f.heldout_every;
  mc.validate();
  tc.validate();
  if (mc.resolution != bank.resolution() || mc.num_classes != static_cast<int>(manifest.seen_ids.size()))
    throw ConfigError("checkpoint does not match the dataset layout");

  json body{{"data", f.data}, {"model", mc}, {"train", tc}, {"variant", variant_name(mc.variant)}};
  if (f.resume) body["resume"] = *f.resume, body["seed"] = tc.seed;
  write_run_config(ctx, "train", body);

  Trainer trainer(mc, tc);
  RunOptions opts;
  opts.out_dir = ctx.out;
  opts.resume = resume;
  const int every = std::max(1, tc.iterations / 20);
  auto t0 = std::chrono::steady_clock::now();
  int first = -1;
  opts.on_step = [&](int it, const LossBreakdown& l) {
    if (first < 0) first = it - 1;
    if (it % every != 0 && it != tc.iterations) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    *ctx.log << "iter " << it << "/" << tc.iterations << "  d " << fmt(l.gan_d) << "  g " << fmt(l.gan_g)
             << "  recon " << fmt(l.recon) << "  fm " << fmt(l.fm) << "  (" << fmt(s / (it - first)) << " s/it)\n";
  };
  const RunSummary sum = run_training(bank, trainer, opts);
  *ctx.out_stream << "trained " << variant_name(mc.variant) << " to iteration " << sum.iterations
                  << "; held-out recon L1 (ema) " << fmt(sum.heldout_start) << " -> " << fmt(sum.heldout_end)
                  << "; checkpoint " << sum.final_checkpoint.string() << "\n";
}

// -- translate / blend / csb-sweep ----------------------------------------------

struct ImageFlags {
  std::string checkpoint;
  std::vector<std::string> content;
  bool live = false;
  bool with_inputs = false;
  std::string name;
};

struct LoadedImage {
  Tensor<float> tensor;
  Image8 bytes;
};

LoadedImage load_image(const Context& ctx, const std::string& p, int resolution) {
  LoadedImage li;
  li.bytes = read_png(ctx.path(p), 3);
  if (li.bytes.width != resolution || li.bytes.height != resolution)
    throw DataError(p + " is " + std::to_string(li.bytes.width) + "x" + std::to_string(li.bytes.height) +
                    ", the model expects " + std::to_string(resolution) + "x" + std::to_string(resolution));
  li.tensor = image_to_tensor(li.bytes);
  return li;
}

Tensor<float> repeat(const Tensor<float>& one, std::size_t n) {
  const std::vector<Tensor<float>> parts(n, one);
  return stack_batch<float>(parts);
}

std::vector<LoadedImage> load_contents(const Context& ctx, const ImageFlags& f, int resolution) {
  std::vector<LoadedImage> v;
  for (const auto& p : f.content) v.push_back(load_image(ctx, p, resolution));
  return v;
}

Tensor<float> content_batch(const std::vector<LoadedImage>& contents) {
  std::vector<Tensor<float>> parts;
  for (const auto& c : contents) parts.push_back(c.tensor);
  return stack_batch<float>(parts);
}

json image_record(const ImageFlags& f, const FrozenGenerator& fg, const std::string& command) {
  return {{"command", command},
          {"checkpoint", f.checkpoint},
          {"variant", variant_name(fg.config.variant)},
          {"generator", f.live ? "live" : "ema"},
          {"contents", f.content}};
}

struct TranslateFlags : ImageFlags {
  std::vector<std::string> style;
  std::optional<int> k;
  double lambda = 1.0;
};

void cmd_translate(const Context& ctx, const TranslateFlags& f) {
  const int k = f.k ? *f.k : static_cast<int>(f.style.size());
  if (k < 1 || k > static_cast<int>(f.style.size()))
    throw ConfigError("--k " + std::to_string(k) + " needs between 1 and " + std::to_string(f.style.size()) +
                      " style images");
  if (!std::isfinite(f.lambda)) throw ConfigError("--lambda must be finite");
  const std::vector<std::string> used(f.style.begin(), f.style.begin() + k);
  write_run_config(ctx, "translate", {{"checkpoint", f.checkpoint}, {"content", f.content}, {"style", used},
                                      {"k", k}, {"lambda", f.lambda}, {"live", f.live}, {"name", f.name}});
  const FrozenGenerator fg = load_generator(ctx.path(f.checkpoint), !f.live);
  const int res = fg.config.resolution;
  const auto contents = load_contents(ctx, f, res);
  std::vector<LoadedImage> styles;
  std::vector<Tensor<float>> style_batches;
  for (const auto& p : used) {
    styles.push_back(load_image(ctx, p, res));
    style_batches.push_back(repeat(styles.back().tensor, contents.size()));
  }
  const Tensor<float> y = translate_images(fg.gen, content_batch(contents), style_batches, static_cast<float>(f.lambda));
  std::vector<std::vector<Image8>> rows;
  for (std::size_t i = 0; i < contents.size(); ++i) {
    std::vector<Image8> row;
    if (f.with_inputs) {
      row.push_back(contents[i].bytes);
      for (const auto& s : styles) row.push_back(s.bytes);
    }
    row.push_back(tensor_to_image(y, static_cast<int>(i)));
    rows.push_back(std::move(row));
  }
  json rec = image_record(f, fg, "translate");
  rec["styles"] = used;
  rec["k"] = k;
  rec["lambda"] = f.lambda;
  rec["layout"] = f.with_inputs ? "content, styles, output" : "output";
  const fs::path png = ctx.out / f.name;
  write_grid(png, make_grid(rows), rec);
  *ctx.out_stream << "wrote " << png.string() << " (" << contents.size() << " translations, k=" << k << ")\n";
}

struct BlendFlags : ImageFlags {
  std::string style_a, style_b;
  std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
  double lambda = 1.0;
};

void cmd_blend(const Context& ctx, const BlendFlags& f) {
  write_run_config(ctx, "blend", {{"checkpoint", f.checkpoint}, {"content", f.content}, {"style_a", f.style_a},
                                  {"style_b", f.style_b}, {"alphas", f.alphas}, {"lambda", f.lambda},
                                  {"live", f.live}, {"name", f.name}});
  const FrozenGenerator fg = load_generator(ctx.path(f.checkpoint), !f.live);
  const int res = fg.config.resolution;
  const auto contents = load_contents(ctx, f, res);
  const LoadedImage a = load_image(ctx, f.style_a, res), b = load_image(ctx, f.style_b, res);
  BlendRequest req;
  req.content = content_batch(contents);
  req.style_a = repeat(a.tensor, contents.size());
  req.style_b = repeat(b.tensor, contents.size());
  req.alphas = f.alphas;
  req.lambda = f.lambda;
  const auto outs = blend(fg.gen, req);
  std::vector<std::vector<Image8>> rows;
  for (std::size_t i = 0; i < contents.size(); ++i) {
    std::vector<Image8> row;
    if (f.with_inputs) row.push_back(contents[i].bytes), row.push_back(a.bytes);
    for (const auto& o : outs) row.push_back(tensor_to_image(o, static_cast<int>(i)));
    if (f.with_inputs) row.push_back(b.bytes);
    rows.push_back(std::move(row));
  }
  json rec = image_record(f, fg, "blend");
  rec["style_a"] = f.style_a;
  rec["style_b"] = f.style_b;
  rec["alphas"] = f.alphas;
  rec["lambda"] = f.lambda;
  rec["layout"] = f.with_inputs ? "content, style_a, outputs by alpha, style_b" : "outputs by alpha";
  const fs::path png = ctx.out / f.name;
  write_grid(png, make_grid(rows), rec);
  *ctx.out_stream << "wrote " << png.string() << " (" << outs.size() << " blends per content)\n";
}

struct SweepFlags : ImageFlags {
  std::string style;
  std::vector<double> lambdas{0.0, 0.5, 1.0, 1.5, 2.0};
};

void cmd_csb_sweep(const Context& ctx, const SweepFlags& f) {
  write_run_config(ctx, "csb-sweep", {{"checkpoint", f.checkpoint}, {"content", f.content}, {"style", f.style},
                                      {"lambda", f.lambdas}, {"live", f.live}, {"name", f.name}});
  const FrozenGenerator fg = load_generator(ctx.path(f.checkpoint), !f.live);
  const int res = fg.config.resolution;
  const auto contents = load_contents(ctx, f, res);
  const LoadedImage s = load_image(ctx, f.style, res);
  const auto outs = csb_sweep(fg.gen, content_batch(contents), repeat(s.tensor, contents.size()), f.lambdas);
  if (!fg.config.has_csb()) *ctx.log << "note: variant " << variant_name(fg.config.variant) << " has no CSB\n";
  std::vector<std::vector<Image8>> rows;
  for (std::size_t i = 0; i < contents.size(); ++i) {
    std::vector<Image8> row;
    if (f.with_inputs) row.push_back(contents[i].bytes), row.push_back(s.bytes);
    for (const auto& o : outs) row.push_back(tensor_to_image(o, static_cast<int>(i)));
    rows.push_back(std::move(row));
  }
  json rec = image_record(f, fg, "csb-sweep");
  rec["style"] = f.style;
  rec["lambda"] = f.lambdas;
  rec["layout"] = f.with_inputs ? "content, style, outputs by lambda" : "outputs by lambda";
  const fs::path png = ctx.out / f.name;
  write_grid(png, make_grid(rows), rec);
  *ctx.out_stream << "wrote " << png.string() << " (" << outs.size() << " panels per content)\n";
}

// -- eval / style-variance ----------------------------------------------------

struct EvalFlags {
  std::string checkpoint, data;
  std::optional<std::string> probes;
  std::optional<int> per_class, batch, pairs, crops, population;
  bool live = false;
};

void cmd_eval(const Context& ctx, const EvalFlags& f) {
  EvalConfig ec = ctx.section<EvalConfig>("eval");
  if (f.per_class) ec.per_class = *f.per_class;
  if (f.batch) ec.batch = *f.batch;
  if (f.pairs) ec.variance_pairs = *f.pairs;
  if (f.crops) ec.variance_crops = *f.crops;
  if (f.population) ec.variance_population = *f.population;
  ec.seed = ctx.seed;
  ec.validate();
  ProbeConfig pc = ctx.section<ProbeConfig>("probes");
  pc.seed = ctx.seed;
  pc.validate();
  const std::string probes_arg = f.probes ? *f.probes : "probes.fsit";
  write_run_config(ctx, "eval", {{"checkpoint", f.checkpoint}, {"data", f.data}, {"probes", probes_arg},
                                 {"probe_config", pc}, {"eval", ec}, {"live", f.live}});

  const fs::path probes_path = ctx.path(probes_arg);
  if (f.probes && !fs::exists(probes_path)) throw DataError("probe file " + probes_path.string() + " not found");
  const FrozenGenerator fg = load_generator(ctx.path(f.checkpoint), !f.live);
  const ImageBank bank(load_dataset(ctx.path(f.data)));
  const ProbeModels probes = obtain_probes(probes_path, bank, pc, ctx.log);
  const ProbeQuality& q = probes.quality();
  *ctx.log << "probes " << probes.identifier() << ": segmenter pixel acc " << fmt(q.segmenter_pixel_acc)
           << ", classifier top-1 " << fmt(q.classifier_top1) << "\n";

  MetricsReport report = evaluate(fg.gen, bank, probes, ec);
  report.run = {{"checkpoint", f.checkpoint},
                {"variant", variant_name(fg.config.variant)},
                {"generator", f.live ? "live" : "ema"},
                {"iteration", checkpoint_metadata(ctx.path(f.checkpoint)).value("iteration", 0)},
                {"data", f.data},
                {"eval", ec}};
  write_text(ctx.out / "metrics.json", report.to_json().dump(2) + "\n");
  write_text(ctx.out / "style_deviation.csv", report.deviation_csv());
  *ctx.out_stream << "mFID " << fmt(report.fid.mfid) << "  PAcc " << fmt(report.content.pacc) << "  mIoU "
                  << fmt(report.content.miou) << "  style deviation median " << fmt(report.variance.median) << "  ("
                  << report.translations << " translations)\n";
}

/// One bar per crop of the first pair.
void print_bars(std::ostream& os, const StyleVarianceStudy& s) {
  if (s.deviations.empty()) return;
  const auto& d = s.deviations.front();
  const double top = std::max(1e-12, *std::max_element(d.begin(), d.end()));
  os << "pair 0: style (" << s.styles[0].first << "," << s.styles[0].second << ") content (" << s.contents[0].first
     << "," << s.contents[0].second << ")\n";
  char buf[32];
  for (std::size_t c = 0; c < d.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%4zu %9.4f ", c, d[c]);
    os << buf << std::string(static_cast<std::size_t>(std::lround(40 * d[c] / top)), '#') << "\n";
  }
}

struct VarianceFlags {
  std::string checkpoint, data;
  int crops = 16, pairs = 1, population = 100;
  bool live = false;
};

void cmd_style_variance(const Context& ctx, const VarianceFlags& f) {
  const CropConfig crop = crop_config(ctx);
  if (f.crops < 2) throw ConfigError("--crops must be at least 2");
  if (f.pairs < 1) throw ConfigError("--pairs must be positive");
  if (f.population < 100) throw ConfigError("--population must be at least 100");
  write_run_config(ctx, "style-variance",
                   {{"checkpoint", f.checkpoint}, {"data", f.data}, {"crops", f.crops}, {"pairs", f.pairs},
                    {"population", f.population}, {"live", f.live},
                    {"crop", {{"min_area", crop.min_area}, {"max_area", crop.max_area},
                              {"aspect_jitter", crop.aspect_jitter}}}});
  const FrozenGenerator fg = load_generator(ctx.path(f.checkpoint), !f.live);
  const ImageBank bank(load_dataset(ctx.path(f.data)));
  if (bank.resolution() != fg.config.resolution) throw ConfigError("checkpoint and dataset resolutions differ");
  const StyleVarianceStudy s = style_variance_study(fg.gen, bank, f.pairs, f.crops, f.population, ctx.seed, crop);
  write_text(ctx.out / "style_variance.csv", deviation_table(s));
  json summary{{"checkpoint", f.checkpoint}, {"variant", variant_name(fg.config.variant)},
               {"median", s.median}, {"pairs", json::array()}};
  for (std::size_t p = 0; p < s.deviations.size(); ++p)
    summary["pairs"].push_back({{"style", {s.styles[p].first, s.styles[p].second}},
                                {"content", {s.contents[p].first, s.contents[p].second}},
                                {"median", median(s.deviations[p])}});
  write_text(ctx.out / "style_variance.json", summary.dump(2) + "\n");
  print_bars(*ctx.out_stream, s);
  *ctx.out_stream << "median deviation " << fmt(s.median) << " over " << s.deviations.size() << " pair(s) x "
                  << f.crops << " crops\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot image-to-image translation on procedural multi-domain data", "fsit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", FSIT_VERSION);
  Globals g;
  app.add_option("--config", g.config, "JSON config with data/model/train/probes/eval/crop sections");
  app.add_option("--seed", g.seed, "Seed for every random stream of the command");
  app.add_option("--out", g.out, "Output directory; relative paths of other flags resolve against it");
  app.add_option("--device", g.device, "Kernel backend: auto, scalar or avx2 (cpu, cpu-scalar, cpu-avx2)");

  GenDataFlags gd;
  auto* c_gen = app.add_subcommand("gen-data", "Render the procedural dataset into --out");
  c_gen->add_option("--seen-classes", gd.seen, "Seen domains (>= 2)");
  c_gen->add_option("--unseen-classes", gd.unseen, "Unseen domains (>= 1)");
  c_gen->add_option("--per-seen", gd.per_seen, "Images per seen domain");
  c_gen->add_option("--per-unseen", gd.per_unseen, "Images per unseen domain");
  c_gen->add_option("--resolution", gd.resolution, "Image side in pixels");
  c_gen->add_option("--holdout", gd.holdout, "Held-out images per seen domain");

  TrainFlags tr;
  auto* c_train = app.add_subcommand("train", "Train a generator/discriminator pair");
  c_train->add_option("--data", tr.data, "Dataset directory")->required();
  c_train->add_option("--variant", tr.variant, "full, no_cc, no_csb or no_coco");
  c_train->add_option("--iters", tr.iters, "Total iterations");
  c_train->add_option("--batch", tr.batch, "Episode batch size");
  c_train->add_option("--k", tr.k, "Style shots per item");
  c_train->add_option("--lr", tr.lr, "Adam learning rate");
  c_train->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint cadence");
  c_train->add_option("--heldout-every", tr.heldout_every, "Held-out reconstruction cadence (0 = ends only)");
  c_train->add_option("--heldout-per-class", tr.heldout_per_class, "Held-out images per class for the recon L1");
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");

  auto image_flags = [](CLI::App* c, ImageFlags& f, const char* name) {
    f.name = name;
    c->add_option("--checkpoint", f.checkpoint, "Trained checkpoint")->required();
    c->add_option("--content", f.content, "Content image(s); one grid row each")->required()->delimiter(',');
    c->add_flag("--live", f.live, "Use the live generator instead of the EMA copy");
    c->add_flag("--with-inputs", f.with_inputs, "Include the input images in each row");
    c->add_option("--name", f.name, "Grid file name inside --out");
  };
  TranslateFlags tf;
  auto* c_tr = app.add_subcommand("translate", "k-shot translation grid");
  image_flags(c_tr, tf, "translate.png");
  c_tr->add_option("--style", tf.style, "Style image(s) of the target domain")->required()->delimiter(',');
  c_tr->add_option("--k", tf.k, "Shots to use (the first k style images)");
  c_tr->add_option("--lambda", tf.lambda, "CSB amplification");

  BlendFlags bf;
  auto* c_blend = app.add_subcommand("blend", "Style-code interpolation strip");
  image_flags(c_blend, bf, "blend.png");
  c_blend->add_option("--style-a", bf.style_a, "Style at alpha = 0")->required();
  c_blend->add_option("--style-b", bf.style_b, "Style at alpha = 1")->required();
  c_blend->add_option("--alphas", bf.alphas, "Sorted weights in [0, 1]")->delimiter(',');
  c_blend->add_option("--lambda", bf.lambda, "CSB amplification");

  SweepFlags sf;
  auto* c_sweep = app.add_subcommand("csb-sweep", "Translations over a range of CSB amplifications");
  image_flags(c_sweep, sf, "csb_sweep.png");
  c_sweep->add_option("--style", sf.style, "Style image")->required();
  c_sweep->add_option("--lambda", sf.lambdas, "Amplification factors")->delimiter(',');

  EvalFlags ef;
  auto* c_eval = app.add_subcommand("eval", "mFID, content preservation and style variance");
  c_eval->add_option("--checkpoint", ef.checkpoint, "Trained checkpoint")->required();
  c_eval->add_option("--data", ef.data, "Dataset directory")->required();
  c_eval->add_option("--probes", ef.probes,
                     "Existing probe file to reuse; without it probes are trained into --out/probes.fsit");
  c_eval->add_option("--per-class", ef.per_class, "Translations per unseen domain");
  c_eval->add_option("--batch", ef.batch, "Translation batch size");
  c_eval->add_option("--pairs", ef.pairs, "Style/content pairs of the variance study");
  c_eval->add_option("--crops", ef.crops, "Crops per pair");
  c_eval->add_option("--population", ef.population, "Images behind the style-code scale (>= 100)");
  c_eval->add_flag("--live", ef.live, "Use the live generator instead of the EMA copy");

  VarianceFlags vf;
  auto* c_var = app.add_subcommand("style-variance", "Crop-induced style-code deviation table");
  c_var->add_option("--checkpoint", vf.checkpoint, "Trained checkpoint")->required();
  c_var->add_option("--data", vf.data, "Dataset directory")->required();
  c_var->add_option("--crops", vf.crops, "Crops per pair");
  c_var->add_option("--pairs", vf.pairs, "Style/content pairs");
  c_var->add_option("--population", vf.population, "Images behind the style-code scale (>= 100)");
  c_var->add_flag("--live", vf.live, "Use the live generator instead of the EMA copy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const Context ctx = resolve(g, out, err);
    if (c_gen->parsed()) cmd_gen_data(ctx, gd);
    else if (c_train->parsed()) cmd_train(ctx, tr);
    else if (c_tr->parsed()) cmd_translate(ctx, tf);
    else if (c_blend->parsed()) cmd_blend(ctx, bf);
    else if (c_sweep->parsed()) cmd_csb_sweep(ctx, sf);
    else if (c_eval->parsed()) cmd_eval(ctx, ef);
    else if (c_var->parsed()) cmd_style_variance(ctx, vf);
    return kExitOk;
  } catch (const DivergenceError& e) {
    err << "error: diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const DataError& e) {  // includes ProbeGateError
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace fsit::cli
