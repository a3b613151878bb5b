#pragma once

// Command-line front end. Each command declares its settings once; they are
// exposed as `--flag value` options and as `key = value` config entries.
// Resolution order: defaults, then `--config` file, then explicit flags.
// Every run writes `config.resolved` and `manifest.json` to its output
// directory; `--config <out>/config.resolved` replays the run.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskgit/bench.hpp"
#include "maskgit/checkpoint.hpp"
#include "maskgit/config.hpp"
#include "maskgit/decoder.hpp"
#include "maskgit/edit.hpp"
#include "maskgit/image.hpp"
#include "maskgit/threads.hpp"
#include "maskgit/tokenizer.hpp"
#include "maskgit/trainer.hpp"

namespace maskgit::cli {

namespace fs = std::filesystem;

struct CommandSpec {
  std::string name;
  std::string description;
  std::vector<ConfigKey> keys;
};

namespace keys {

inline std::vector<ConfigKey> join(std::initializer_list<std::vector<ConfigKey>> parts) {
  std::vector<ConfigKey> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline std::vector<ConfigKey> common(const std::string& command) {
  return {{"out", "maskgit-" + command, "output directory"}, {"seed", "0", "random seed"}};
}

inline std::vector<ConfigKey> decoding() {
  return {
      {"schedule", "cosine", "mask schedule: linear|cosine|square|cubic|exponential|sqrt|log"},
      {"steps", "8", "decoding iterations T"},
      {"temperature", "1", "token sampling temperature (0 = argmax)"},
      {"selection-temperature", "4.5", "base scale of the annealed selection noise"},
      {"greedy-final", "true", "no selection noise at the last iteration"},
  };
}

inline std::vector<ConfigKey> arch() {
  return {
      {"layers", "2", "transformer layers"},
      {"heads", "2", "attention heads"},
      {"embed-dim", "32", "embedding width"},
      {"hidden-dim", "64", "feed-forward width"},
  };
}

inline std::vector<ConfigKey> grid() {
  return {{"grid-h", "4", "token grid height"}, {"grid-w", "4", "token grid width"}};
}

inline std::vector<ConfigKey> source() {
  return {
      {"source", "markov", "training data: iid|markov|classes|images"},
      {"source-weights", "0.4,0.3,0.2,0.1", "iid source token probabilities"},
      {"source-vocab", "4", "markov source vocabulary size"},
      {"markov-stay", "0.85", "markov source probability of repeating the previous token"},
      {"class-weights", "", "classes source: per-class iid probabilities, ';' between classes"},
      {"data", "", "PNG file or directory (subdirectories are classes)"},
      {"codebook", "", "codebook file from fit-codebook (images source)"},
  };
}

inline std::vector<ConfigKey> training(const std::string& steps) {
  return {
      {"steps", steps, "training steps"},
      {"schedule", "cosine", "training mask schedule: linear|cosine|square|cubic|exponential|sqrt|log"},
      {"batch-size", "32", "sequences per step"},
      {"lr", "3e-4", "peak learning rate"},
      {"warmup", "100", "linear warm-up steps"},
      {"beta1", "0.9", "Adam beta1"},
      {"beta2", "0.96", "Adam beta2"},
      {"eps", "1e-8", "Adam epsilon"},
      {"label-smoothing", "0.1", "label smoothing"},
      {"dropout", "0.1", "dropout rate"},
      {"eval-interval", "100", "steps between validation passes (0 = end only)"},
      {"eval-size", "256", "validation sequences"},
  };
}

}  // namespace keys

inline const std::vector<CommandSpec>& commands() {
  using namespace keys;
  static const std::vector<CommandSpec> specs = {
      {"fit-codebook", "Fit a k-means patch codebook to PNG images",
       join({common("fit-codebook"),
             {{"data", "", "PNG file or directory of PNGs"},
              {"codebook-size", "64", "number of codes K"},
              {"patch", "4", "patch size in pixels"},
              {"kmeans-iterations", "20", "Lloyd iterations"}}})},
      {"train", "Train a masked token model",
       join({common("train"), arch(), grid(), source(), training("1000"),
             {{"checkpoint", "", "checkpoint to resume from"}}})},
      {"sample", "Generate token grids by iterative parallel decoding",
       join({common("sample"), decoding(),
             {{"checkpoint", "", "model checkpoint"},
              {"count", "1", "number of samples"},
              {"class-id", "", "class to condition on"},
              {"decoder", "parallel", "parallel|autoregressive"}}})},
      {"edit", "Inpaint, outpaint or class-edit an image",
       join({common("edit"), decoding(),
             {{"checkpoint", "", "model checkpoint with codebook"},
              {"input", "", "input PNG"},
              {"mode", "inpaint", "inpaint|outpaint|class-edit"},
              {"box", "", "inpaint/class-edit region x0,y0,x1,y1 in pixels (half-open)"},
              {"direction", "right", "outpaint edge: left|right|top|bottom"},
              {"fraction", "0.5", "outpaint fraction of the image"},
              {"class-id", "", "class to condition on"}}})},
      {"bench", "Time parallel against autoregressive decoding",
       join({common("bench"), arch(),
             {{"checkpoint", "", "take the architecture from this checkpoint"},
              {"vocab", "64", "vocabulary size"},
              {"sizes", "64,256", "token counts N"},
              {"steps", "8", "parallel decoding iterations T"},
              {"schedule", "cosine", "mask schedule: linear|cosine|square|cubic|exponential|sqrt|log"},
              {"repeats", "10", "timed runs per decoder and size"},
              {"warmup", "3", "untimed runs per decoder and size"},
              {"ar-repeats", "0", "timed autoregressive runs (0 = repeats)"},
              {"ar-warmup", "-1", "untimed autoregressive runs (-1 = warmup)"},
              {"batch", "1", "grids per timed run"}}})},
      {"ablate", "Schedule and iteration-count ablation on a synthetic source",
       join({common("ablate"), arch(), grid(), source(), training("300"),
             {{"checkpoint", "", "decode this model under every schedule instead of training"},
              {"schedules", "linear,cosine,square,cubic,exponential,sqrt,log", "schedules to compare"},
              {"iterations", "1,2,4,8,10,12,16,32,60", "decoding iteration counts T"},
              {"samples", "200", "decoded grids per cell"},
              {"temperature", "1", "token sampling temperature"},
              {"selection-temperature", "4.5", "base scale of the annealed selection noise"}}})},
      {"recon-curve", "Reconstruction quality against mask ratio",
       join({common("recon-curve"), decoding(), source(),
             {{"checkpoint", "", "model checkpoint"},
              {"ratios", "0.95,0.9,0.85,0.75,0.5,0.25,0", "mask ratios"},
              {"seeds", "100", "grids per ratio"},
              {"class-id", "", "class to condition on"}}})},
  };
  return specs;
}

inline const CommandSpec& command_spec(const std::string& name) {
  for (const auto& c : commands()) {
    if (c.name == name) return c;
  }
  throw ConfigError("unknown command '" + name + "'");
}

// ---------------------------------------------------------------- helpers

struct RunContext {
  RunConfig cfg;
  fs::path out;
  std::ostream& log;
  nlohmann::json metrics = nlohmann::json::object();
};

inline int to_int(const RunConfig& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("value for '" + key + "' is out of range");
  return static_cast<int>(v);
}

inline std::optional<int> class_option(const RunConfig& cfg) {
  if (!cfg.has("class-id")) return std::nullopt;
  return to_int(cfg, "class-id");
}

inline DecodeOptions decode_options(const RunConfig& cfg) {
  DecodeOptions o;
  o.schedule = parse_schedule(cfg.require("schedule"));
  o.iterations = to_int(cfg, "steps");
  o.temperature = cfg.get_double("temperature");
  o.selection_temperature = cfg.get_double("selection-temperature");
  o.greedy_final = cfg.get_bool("greedy-final");
  o.seed = cfg.get_u64("seed");
  o.validate();
  return o;
}

inline ModelConfig arch_config(const RunConfig& cfg) {
  ModelConfig c;
  c.layers = to_int(cfg, "layers");
  c.heads = to_int(cfg, "heads");
  c.embed_dim = to_int(cfg, "embed-dim");
  c.hidden_dim = to_int(cfg, "hidden-dim");
  if (cfg.known("grid-h")) {
    c.grid_h = to_int(cfg, "grid-h");
    c.grid_w = to_int(cfg, "grid-w");
  }
  if (cfg.known("dropout")) c.dropout = cfg.get_double("dropout");
  return c;
}

inline TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.schedule = parse_schedule(cfg.require("schedule"));
  t.batch_size = to_int(cfg, "batch-size");
  t.steps = to_int(cfg, "steps");
  t.lr = cfg.get_double("lr");
  t.warmup = to_int(cfg, "warmup");
  t.beta1 = cfg.get_double("beta1");
  t.beta2 = cfg.get_double("beta2");
  t.eps = cfg.get_double("eps");
  t.label_smoothing = cfg.get_double("label-smoothing");
  t.seed = cfg.get_u64("seed");
  t.eval_interval = to_int(cfg, "eval-interval");
  t.eval_size = to_int(cfg, "eval-size");
  t.validate();
  return t;
}

/// PNG inputs: a single file, a directory of PNGs (unlabeled), or a
/// directory of class subdirectories (labeled in sorted name order).
struct ImageSet {
  std::vector<fs::path> files;
  std::vector<int> labels;
  std::vector<std::string> classes;
};

inline std::vector<fs::path> pngs_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline ImageSet list_images(const fs::path& data) {
  ImageSet set;
  if (fs::is_regular_file(data)) {
    set.files.push_back(data);
    return set;
  }
  if (!fs::is_directory(data)) throw IoError("data path '" + data.string() + "' does not exist");
  set.files = pngs_in(data);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(data)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (!dirs.empty()) {
    if (!set.files.empty()) throw IoError("data directory mixes PNG files and class subdirectories");
    for (const auto& d : dirs) {
      const auto files = pngs_in(d);
      if (files.empty()) continue;
      const int label = static_cast<int>(set.classes.size());
      set.classes.push_back(d.filename().string());
      for (const auto& f : files) {
        set.files.push_back(f);
        set.labels.push_back(label);
      }
    }
  }
  if (set.files.empty()) throw IoError("no PNG images found under '" + data.string() + "'");
  return set;
}

/// Training-data description stored in checkpoint metadata, so later
/// commands can draw from the same distribution.
inline nlohmann::json data_spec(const RunConfig& cfg) {
  const std::string kind = cfg.require("source");
  if (kind == "iid") {
    return {{"kind", "synthetic"}, {"sources", {SyntheticSource::iid(cfg.get_doubles("source-weights"))}}};
  }
  if (kind == "markov") {
    const auto src = SyntheticSource::sticky_markov(to_int(cfg, "source-vocab"), cfg.get_double("markov-stay"));
    return {{"kind", "synthetic"}, {"sources", {src}}};
  }
  if (kind == "classes") {
    nlohmann::json sources = nlohmann::json::array();
    for (const auto& part : split(cfg.require("class-weights"), ';')) {
      std::vector<double> w;
      for (const auto& v : split(part, ',')) {
        char* end = nullptr;
        w.push_back(std::strtod(v.c_str(), &end));
        if (v.empty() || *end != '\0') throw ConfigError("invalid value '" + v + "' in 'class-weights'");
      }
      sources.push_back(SyntheticSource::iid(std::move(w)));
    }
    if (sources.size() < 2) throw ConfigError("'class-weights' needs at least two classes");
    return {{"kind", "synthetic"}, {"sources", sources}};
  }
  if (kind == "images") {
    return {{"kind", "images"}, {"data", fs::absolute(cfg.require("data")).string()}};
  }
  throw ConfigError("invalid value '" + kind + "' for 'source': expected iid|markov|classes|images");
}

struct LoadedData {
  TrainingData data;
  int vocab = 0;
  std::vector<std::string> classes;
};

inline LoadedData load_data(const nlohmann::json& spec, const Codebook* cb) {
  LoadedData out;
  if (spec.at("kind") == "synthetic") {
    std::vector<SyntheticSource> sources = spec.at("sources").get<std::vector<SyntheticSource>>();
    out.vocab = sources.at(0).vocab();
    for (const auto& s : sources) {
      if (s.vocab() != out.vocab) throw ConfigError("class sources must share one vocabulary");
    }
    out.data = sources.size() > 1 ? TrainingData::synthetic_classes(std::move(sources))
                                  : TrainingData::synthetic(std::move(sources[0]));
    return out;
  }
  if (!cb) throw ConfigError("the images source needs a codebook");
  const ImageSet set = list_images(spec.at("data").get<std::string>());
  std::vector<TokenGrid> grids;
  for (const auto& f : set.files) grids.push_back(encode(read_png(f), *cb));
  out.data = TrainingData::tokens(std::move(grids), set.labels);
  out.vocab = cb->size;
  out.classes = set.classes;
  return out;
}

/// Draws one grid of the model's shape from `data`, restricted to a class
/// when one is given.
inline TokenGrid draw_grid(const TrainingData& data, const ModelConfig& c, std::optional<int> class_id, Rng& rng) {
  if (!class_id) return sample_batch(data, c, 1, rng).grids.at(0);
  if (*class_id < 0 || *class_id >= std::max(1, data.num_classes())) {
    throw InvalidArgument("class id " + std::to_string(*class_id) + " out of range");
  }
  if (!data.sources.empty()) {
    return sample_synthetic(data.sources[static_cast<std::size_t>(*class_id)], c.grid_h, c.grid_w, rng);
  }
  TrainingData subset;
  for (std::size_t i = 0; i < data.grids.size(); ++i) {
    if (data.labels.empty() || data.labels[i] == *class_id) subset.grids.push_back(data.grids[i]);
  }
  return sample_batch(subset, c, 1, rng).grids.at(0);
}

inline void write_tokens_json(const fs::path& path, const std::vector<TokenGrid>& grids) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& g : grids) j.push_back({{"height", g.height}, {"width", g.width}, {"tokens", g.tokens}});
  write_text(path, j.dump() + "\n");
}

inline Image grid_image(const TokenGrid& g, const Codebook* cb, int vocab) {
  return cb ? decode(g, *cb) : render_tokens(g, vocab, 8);
}

inline std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return detail::hex64(fnv1a64(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

/// Lists every file in the output directory with size and FNV-1a digest.
inline void write_manifest(const RunContext& ctx) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(ctx.out)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::json list = nlohmann::json::array();
  for (const auto& f : files) {
    list.push_back({{"path", f.filename().string()}, {"bytes", fs::file_size(f)}, {"fnv1a64", file_digest(f)}});
  }
  nlohmann::json m = {{"command", ctx.cfg.command()},
                      {"config", ctx.cfg.values()},
                      {"files", list},
                      {"metrics", ctx.metrics}};
  write_text(ctx.out / "manifest.json", m.dump(2) + "\n");
}

inline Checkpoint load_model_checkpoint(const RunConfig& cfg) {
  Checkpoint ck = load_checkpoint(cfg.require("checkpoint"));
  if (!ck.config) throw CheckpointError("missing_model", "checkpoint holds no model (codebook only)");
  return ck;
}

// --------------------------------------------------------------- commands

inline void run_fit_codebook(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const ImageSet set = list_images(cfg.require("data"));
  const int patch = to_int(cfg, "patch");
  PatchSet patches;
  int channels = 0;
  for (const auto& f : set.files) {
    const Image img = read_png(f);
    if (channels != 0 && img.channels != channels) throw InvalidArgument("images mix gray and RGB");
    channels = img.channels;
    append_patches(img, patch, patches);
  }
  Rng rng(cfg.get_u64("seed"));
  const CodebookFit fit =
      fit_codebook(patches, to_int(cfg, "codebook-size"), patch, channels, to_int(cfg, "kmeans-iterations"), rng);
  Checkpoint ck;
  ck.codebook = fit.codebook;
  ck.metadata = {{"command", "fit-codebook"}, {"images", set.files.size()}, {"patches", patches.count()}};
  save_checkpoint(ctx.out / "codebook.mgit", ck);
  std::ostringstream csv;
  csv << "iteration,inertia\n";
  for (std::size_t i = 0; i < fit.inertia.size(); ++i) csv << i + 1 << ',' << format_double(fit.inertia[i]) << '\n';
  write_text(ctx.out / "inertia.csv", csv.str());
  const double final_inertia = fit.inertia.empty() ? 0.0 : fit.inertia.back();
  ctx.metrics = {{"patches", patches.count()},
                 {"mean_squared_error", final_inertia / static_cast<double>(patches.count() * patches.dim)},
                 {"reseeded", fit.reseeded}};
  ctx.log << "codebook: " << fit.codebook.size << " codes from " << patches.count() << " patches, mse "
          << format_double(ctx.metrics["mean_squared_error"].get<double>()) << '\n';
}

inline void run_train(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const TrainConfig tcfg = train_config(cfg);
  const nlohmann::json spec = data_spec(cfg);
  std::optional<Codebook> cb;
  if (spec.at("kind") == "images") cb = checkpoint_codebook(load_checkpoint(cfg.require("codebook")));
  const LoadedData loaded = load_data(spec, cb ? &*cb : nullptr);
  ModelConfig c = arch_config(cfg);
  c.vocab = loaded.vocab;
  c.num_classes = loaded.data.num_classes();
  c.validate();
  const bool resume = cfg.has("checkpoint");
  TrainState state = resume ? from_checkpoint(load_model_checkpoint(cfg)) : TrainState::fresh(c, tcfg.seed);
  if (resume && state.model.config != c) {
    throw ConfigError("resumed checkpoint architecture differs from the configured one");
  }
  const fs::path metrics_path = ctx.out / "metrics.csv";
  if (!resume) fs::remove(metrics_path);
  MetricsWriter writer(metrics_path);
  const auto rows = train(state, loaded.data, tcfg, [&](const MetricsRow& row) {
    writer.write(row);
    if (row.val_nll) {
      ctx.log << "step " << row.step << " loss " << format_double(row.loss) << " val_nll "
              << format_double(*row.val_nll) << '\n';
    }
  });
  nlohmann::json meta = {{"command", "train"}, {"data", spec}, {"train", tcfg}, {"classes", loaded.classes}};
  save_checkpoint(ctx.out / "checkpoint.mgit", to_checkpoint(state, cb, meta));
  ctx.metrics = {{"step", state.step}};
  if (!rows.empty() && rows.back().val_nll) ctx.metrics["val_nll"] = *rows.back().val_nll;
}

inline void run_sample(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Checkpoint ck = load_model_checkpoint(cfg);
  const Model<float> model = checkpoint_model(ck);
  const Codebook* cb = ck.codebook ? &*ck.codebook : nullptr;
  const DecodeOptions opts = decode_options(cfg);
  const std::optional<int> class_id = class_option(cfg);
  const std::string decoder = cfg.require("decoder");
  if (decoder != "parallel" && decoder != "autoregressive") {
    throw ConfigError("invalid value '" + decoder + "' for 'decoder': expected parallel|autoregressive");
  }
  const long long count = cfg.get_int("count");
  if (count < 1) throw ConfigError("'count' must be >= 1");
  const ModelConfig& c = model.config;
  const TokenGrid initial = TokenGrid::all_masked(c.grid_h, c.grid_w);
  std::vector<DecodeResult> results(static_cast<std::size_t>(count));
  parallel_for(results.size(), worker_threads(), [&](std::size_t i) {
    DecodeOptions o = opts;
    o.seed = opts.seed + i;
    results[i] = decoder == "parallel" ? decode(model, initial, class_id, o)
                                       : decode_autoregressive(model, initial, class_id, o.temperature, o.seed);
  });
  std::vector<TokenGrid> grids;
  for (std::size_t i = 0; i < results.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%03zu", i);
    write_png(ctx.out / ("sample_" + std::string(name) + ".png"), grid_image(results[i].grid, cb, c.vocab));
    if (!results[i].trace.empty()) {
      write_trace_jsonl(ctx.out / ("trace_" + std::string(name) + ".jsonl"), results[i].trace);
      write_png(ctx.out / ("filmstrip_" + std::string(name) + ".png"), filmstrip(initial, results[i].trace, cb, c.vocab));
    }
    grids.push_back(results[i].grid);
  }
  write_tokens_json(ctx.out / "tokens.json", grids);
  ctx.metrics = {{"samples", count}, {"predict_passes", results[0].predict_passes}};
  ctx.log << "sampled " << count << " grid(s) with " << results[0].predict_passes << " predict passes each\n";
}

inline void run_edit(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Checkpoint ck = load_model_checkpoint(cfg);
  const Model<float> model = checkpoint_model(ck);
  const Codebook& cb = checkpoint_codebook(ck);
  const Image input = read_png(cfg.require("input"));
  const EditMode mode = parse_edit_mode(cfg.require("mode"));
  PixelRegion region;
  if (mode == EditMode::outpaint) {
    region = outpaint_region(input.width, input.height, cfg.require("direction"), cfg.get_double("fraction"));
  } else {
    const auto box = cfg.get_ints("box");
    if (box.size() != 4) throw ConfigError("'box' must be x0,y0,x1,y1");
    region = box_region(input.width, input.height, static_cast<int>(box[0]), static_cast<int>(box[1]),
                        static_cast<int>(box[2]), static_cast<int>(box[3]));
  }
  const EditResult r = edit_image(model, cb, input, region, mode, class_option(cfg), decode_options(cfg));
  if (!r.model_called) ctx.log << "warning: edit region is empty; output is the tokenized input\n";
  if (r.whole_image) ctx.log << "warning: edit region covers the whole image; decoding unconditionally\n";
  write_png(ctx.out / "edited.png", r.image);
  Image mask(input.width, input.height, 1);
  for (int y = 0; y < input.height; ++y) {
    for (int x = 0; x < input.width; ++x) mask.at(x, y) = region.at(x, y) ? 1.0f : 0.0f;
  }
  write_png(ctx.out / "region.png", mask);
  write_tokens_json(ctx.out / "tokens.json", {r.grid});
  if (!r.decode.trace.empty()) {
    write_trace_jsonl(ctx.out / "trace.jsonl", r.decode.trace);
    write_png(ctx.out / "filmstrip.png", filmstrip(r.decode.trace.empty() ? r.grid : r.decode.trace[0].grid,
                                                   r.decode.trace, &cb, model.config.vocab));
  }
  const auto edited = static_cast<std::size_t>(std::count(r.token_region.begin(), r.token_region.end(), 1));
  ctx.metrics = {{"edited_tokens", edited}, {"predict_passes", r.decode.predict_passes}};
}

inline void run_bench(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  ModelConfig arch;
  if (cfg.has("checkpoint")) {
    arch = *load_model_checkpoint(cfg).config;
  } else {
    arch = arch_config(cfg);
    arch.vocab = to_int(cfg, "vocab");
  }
  SpeedBenchOptions o;
  o.sizes.clear();
  for (long long s : cfg.get_ints("sizes")) {
    if (s < 1) throw ConfigError("'sizes' entries must be >= 1");
    o.sizes.push_back(static_cast<std::size_t>(s));
  }
  o.iterations = to_int(cfg, "steps");
  o.schedule = parse_schedule(cfg.require("schedule"));
  o.repeats = to_int(cfg, "repeats");
  o.warmup = to_int(cfg, "warmup");
  o.ar_repeats = to_int(cfg, "ar-repeats");
  o.ar_warmup = to_int(cfg, "ar-warmup");
  o.batch = to_int(cfg, "batch");
  o.threads = worker_threads();
  o.seed = cfg.get_u64("seed");
  const BenchReport report = run_speed_bench(arch, o);
  const std::string csv = bench_csv(report);
  write_text(ctx.out / "bench.csv", csv);
  write_text(ctx.out / "bench.json", bench_json(report).dump(2) + "\n");
  write_png(ctx.out / "bench.png", bench_plot(report));
  ctx.log << csv;
  ctx.metrics = bench_json(report).at("records");
}

inline SyntheticSource single_source(const nlohmann::json& spec) {
  if (spec.at("kind") != "synthetic" || spec.at("sources").size() != 1) {
    throw ConfigError("ablate needs a single synthetic source (iid or markov)");
  }
  return spec.at("sources").at(0).get<SyntheticSource>();
}

inline void run_ablate(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const SyntheticSource src = single_source(data_spec(cfg));
  ModelConfig arch = arch_config(cfg);
  arch.vocab = src.vocab();
  arch.num_classes = 0;
  arch.validate();
  std::optional<Model<float>> shared;
  if (cfg.has("checkpoint")) {
    shared = checkpoint_model(load_model_checkpoint(cfg));
    if (shared->config.vocab != src.vocab() || shared->config.num_classes != 0) {
      throw ConfigError("shared checkpoint must be unconditional with the source's vocabulary");
    }
  }
  AblationOptions o;
  o.schedules.clear();
  for (const auto& s : cfg.get_strings("schedules")) o.schedules.push_back(parse_schedule(s));
  o.iterations.clear();
  for (long long t : cfg.get_ints("iterations")) o.iterations.push_back(static_cast<int>(t));
  const long long samples = cfg.get_int("samples");
  if (samples < 1) throw ConfigError("'samples' must be >= 1");
  o.samples = static_cast<std::size_t>(samples);
  o.temperature = cfg.get_double("temperature");
  o.selection_temperature = cfg.get_double("selection-temperature");
  o.seed = cfg.get_u64("seed");
  o.threads = worker_threads();
  const AblationReport r =
      run_ablation(arch, src, train_config(cfg), o, shared, [&](const std::string& line) { ctx.log << line << '\n'; });
  write_text(ctx.out / "ablation.json", nlohmann::json(r).dump(2) + "\n");
  write_text(ctx.out / "ablation_table.csv", ablation_table_csv(r));
  write_text(ctx.out / "ablation_curve.csv", ablation_curve_csv(r));
  write_png(ctx.out / "ablation_curve.png", ablation_plot(r));
  ctx.log << ablation_table_csv(r);
  nlohmann::json best = nlohmann::json::object();
  for (const auto& row : r.rows) best[row.schedule] = row.best_iterations;
  ctx.metrics = {{"best_iterations", best}};
}

inline void run_recon_curve_command(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Checkpoint ck = load_model_checkpoint(cfg);
  const Model<float> model = checkpoint_model(ck);
  const Codebook* cb = ck.codebook ? &*ck.codebook : nullptr;
  const nlohmann::json spec = ck.metadata.contains("data") ? ck.metadata.at("data") : data_spec(cfg);
  const LoadedData loaded = load_data(spec, cb);
  if (loaded.vocab != model.config.vocab) throw ConfigError("data vocabulary does not match the model");
  const std::optional<int> class_id = class_option(cfg);
  if (model.config.num_classes > 0 && !class_id) throw ConfigError("class-conditional model needs 'class-id'");
  ReconOptions o;
  o.ratios = cfg.get_doubles("ratios");
  o.seeds = to_int(cfg, "seeds");
  o.decode = decode_options(cfg);
  o.threads = worker_threads();
  o.decode.record_trace = false;
  const auto pts = run_recon_curve(
      model,
      [&](Rng& rng) { return draw_grid(loaded.data, model.config, class_id, rng); },
      cb, class_id, o);
  const std::string csv = recon_csv(pts);
  write_text(ctx.out / "recon_curve.csv", csv);
  PlotSeries recovery{"recovery", {}, {}};
  for (const auto& p : pts) {
    recovery.x.push_back(p.ratio);
    recovery.y.push_back(p.recovery_mean);
  }
  write_png(ctx.out / "recon_curve.png", line_plot({recovery}));
  ctx.log << csv;
  ctx.metrics = {{"points", pts.size()}};
}

// ------------------------------------------------------------------ entry

inline std::string escape_message(const std::string& msg) {
  std::string out;
  for (char ch : msg) {
    if (ch == '"' || ch == '\\') out += '\\';
    if (ch == '\n') {
      out += "\\n";
      continue;
    }
    out += ch;
  }
  return out;
}

inline void print_error(std::ostream& err, const std::string& code, const std::string& message) {
  err << "error: code=" << code << " message=\"" << escape_message(message) << "\"\n";
}

inline void dispatch(RunContext& ctx) {
  const std::string& name = ctx.cfg.command();
  if (name == "fit-codebook") return run_fit_codebook(ctx);
  if (name == "train") return run_train(ctx);
  if (name == "sample") return run_sample(ctx);
  if (name == "edit") return run_edit(ctx);
  if (name == "bench") return run_bench(ctx);
  if (name == "ablate") return run_ablate(ctx);
  if (name == "recon-curve") return run_recon_curve_command(ctx);
  throw ConfigError("unknown command '" + name + "'");
}

/// Runs one command. Returns the process exit code; failures print a single
/// `error: code=<code> message="<text>"` line to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"maskgit: masked generative image-token modeling"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every command and exit");
  app.footer("Settings can also be given in a key = value file via --config; flags override the file.\n"
             "Environment: MASKGIT_THREADS bounds worker threads.");
  struct Parsed {
    std::string config;
    std::map<std::string, std::string> flags;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Parsed> parsed;
  std::map<std::string, CLI::App*> subs;
  for (const auto& spec : commands()) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.description);
    Parsed& p = parsed[spec.name];
    sub->add_option("--config", p.config, "key = value settings file");
    for (const auto& k : spec.keys) {
      std::string help = k.help;
      if (!k.fallback.empty()) help += " [default: " + k.fallback + "]";
      p.options[k.name] = sub->add_option("--" + k.name, p.flags[k.name], help);
    }
    subs[spec.name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return 2;
  }
  try {
    for (const auto& spec : commands()) {
      if (!subs[spec.name]->parsed()) continue;
      const Parsed& p = parsed[spec.name];
      RunConfig cfg(spec.name, spec.keys);
      if (!p.config.empty()) cfg.merge_file(p.config);
      for (const auto& [key, opt] : p.options) {
        if (opt->count() > 0) cfg.set(key, p.flags.at(key));
      }
      RunContext ctx{cfg, fs::path(cfg.require("out")), out};
      fs::create_directories(ctx.out);
      write_text(ctx.out / "config.resolved", cfg.resolved_text());
      dispatch(ctx);
      write_manifest(ctx);
      return 0;
    }
    print_error(err, "usage", "no command given");
    return 2;
  } catch (const Error& e) {
    print_error(err, e.code(), e.what());
  } catch (const nlohmann::json::exception& e) {
    print_error(err, "corrupt_input", e.what());
  } catch (const fs::filesystem_error& e) {
    print_error(err, "io", e.what());
  } catch (const std::exception& e) {
    print_error(err, "internal", e.what());
  }
  return 1;
}

}  // namespace maskgit::cli
