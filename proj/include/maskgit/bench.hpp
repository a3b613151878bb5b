#pragma once

// Experiment drivers: parallel vs autoregressive decoding speed, the
// schedule x iteration-count ablation, and the reconstruction-vs-mask-ratio
// curve.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgit/decoder.hpp"
#include "maskgit/errors.hpp"
#include "maskgit/model.hpp"
#include "maskgit/plot.hpp"
#include "maskgit/schedule.hpp"
#include "maskgit/synthetic.hpp"
#include "maskgit/threads.hpp"
#include "maskgit/tokenizer.hpp"
#include "maskgit/trainer.hpp"

namespace maskgit {

struct SampleStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  double median = 0.0;
};

inline SampleStats summarize(std::vector<double> v) {
  SampleStats s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.stddev = v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------- speed

/// Grid shape used for a sequence length: the most square factorization.
inline std::pair<int, int> grid_shape_for(std::size_t tokens) {
  if (tokens < 1) throw InvalidArgument("token count must be >= 1");
  int h = static_cast<int>(std::sqrt(static_cast<double>(tokens)));
  while (h > 1 && tokens % static_cast<std::size_t>(h) != 0) --h;
  return {h, static_cast<int>(tokens / static_cast<std::size_t>(h))};
}

struct SpeedBenchOptions {
  std::vector<std::size_t> sizes = {64, 256};
  int iterations = 8;
  ScheduleKind schedule = ScheduleKind::cosine;
  int warmup = 3;
  int repeats = 10;
  int batch = 1;
  int threads = 1;
  std::uint64_t seed = 0;
  /// Repeat/warm-up overrides for the autoregressive rows (0 = same as above).
  int ar_warmup = -1;
  int ar_repeats = 0;
};

struct BenchRecord {
  std::string decoder;  // "parallel" or "autoregressive"
  std::size_t tokens = 0;
  int iterations = 0;   // T for parallel, N for autoregressive
  int batch = 1;
  int repeats = 0;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  double median_seconds = 0.0;
  int predict_passes = 0;
  double pass_ratio = 1.0;       // autoregressive passes / these passes
  double speedup = 1.0;          // autoregressive mean / this mean
  double median_speedup = 1.0;   // autoregressive median / this median

  bool operator==(const BenchRecord&) const = default;
};

struct BenchReport {
  std::vector<BenchRecord> records;
  nlohmann::json config = nlohmann::json::object();
};

/// Model with `arch`'s depth and widths, resized to `tokens` positions.
inline Model<float> bench_model(const ModelConfig& arch, std::size_t tokens, std::uint64_t seed) {
  ModelConfig c = arch;
  std::tie(c.grid_h, c.grid_w) = grid_shape_for(tokens);
  c.num_classes = 0;
  c.validate();
  Rng rng(seed);
  return Model<float>::random(c, rng);
}

/// Times parallel and autoregressive decoding of fully masked grids at each
/// size with the same weights. Warm-up runs are excluded. Pass counts come
/// from the decoder itself.
inline BenchReport run_speed_bench(const ModelConfig& arch, const SpeedBenchOptions& opts) {
  if (opts.repeats < 1 || opts.warmup < 0 || opts.batch < 1 || opts.iterations < 1) {
    throw InvalidArgument("bench needs repeats >= 1, warmup >= 0, batch >= 1 and steps >= 1");
  }
  BenchReport report;
  report.config = {{"sizes", opts.sizes},       {"iterations", opts.iterations},
                   {"schedule", std::string(schedule_name(opts.schedule))},
                   {"warmup", opts.warmup},     {"repeats", opts.repeats},
                   {"batch", opts.batch},       {"threads", opts.threads},
                   {"seed", opts.seed},         {"model", arch},
                   {"ar_warmup", opts.ar_warmup < 0 ? opts.warmup : opts.ar_warmup},
                   {"ar_repeats", opts.ar_repeats > 0 ? opts.ar_repeats : opts.repeats}};
  for (std::size_t n : opts.sizes) {
    const Model<float> model = bench_model(arch, n, opts.seed + n);
    const TokenGrid initial = TokenGrid::all_masked(model.config.grid_h, model.config.grid_w);
    DecodeOptions dopts;
    dopts.schedule = opts.schedule;
    dopts.iterations = opts.iterations;
    dopts.record_trace = false;
    auto time_runs = [&](bool parallel, int warmup, int repeats, int& passes) {
      std::vector<double> seconds;
      for (int run = -warmup; run < repeats; ++run) {
        std::vector<int> run_passes(static_cast<std::size_t>(opts.batch));
        const auto start = std::chrono::steady_clock::now();
        parallel_for(static_cast<std::size_t>(opts.batch), opts.threads, [&](std::size_t b) {
          const std::uint64_t seed = opts.seed + static_cast<std::uint64_t>(run + warmup) * 7919 + b;
          if (parallel) {
            DecodeOptions o = dopts;
            o.seed = seed;
            run_passes[b] = decode(model, initial, std::nullopt, o).predict_passes;
          } else {
            run_passes[b] = decode_autoregressive(model, initial, std::nullopt, 1.0, seed).predict_passes;
          }
        });
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        passes = run_passes[0];
        if (run >= 0) seconds.push_back(s);
      }
      return summarize(seconds);
    };
    int par_passes = 0, ar_passes = 0;
    const SampleStats par = time_runs(true, opts.warmup, opts.repeats, par_passes);
    const int ar_warm = opts.ar_warmup < 0 ? opts.warmup : opts.ar_warmup;
    const int ar_reps = opts.ar_repeats > 0 ? opts.ar_repeats : opts.repeats;
    const SampleStats ar = time_runs(false, ar_warm, ar_reps, ar_passes);
    BenchRecord p{"parallel", n, opts.iterations, opts.batch, opts.repeats, par.mean, par.stddev, par.median,
                  par_passes, static_cast<double>(ar_passes) / par_passes, ar.mean / par.mean,
                  ar.median / par.median};
    BenchRecord a{"autoregressive", n, static_cast<int>(n), opts.batch, ar_reps, ar.mean, ar.stddev, ar.median,
                  ar_passes, 1.0, 1.0, 1.0};
    report.records.push_back(p);
    report.records.push_back(a);
  }
  return report;
}

inline std::string bench_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "decoder,tokens,iterations,batch,repeats,mean_seconds,std_seconds,median_seconds,predict_passes,ratio,"
        "speedup,median_speedup\n";
  for (const auto& b : r.records) {
    os << b.decoder << ',' << b.tokens << ',' << b.iterations << ',' << b.batch << ',' << b.repeats << ','
       << format_double(b.mean_seconds) << ',' << format_double(b.std_seconds) << ','
       << format_double(b.median_seconds) << ',' << b.predict_passes << ',' << format_double(b.pass_ratio) << ','
       << format_double(b.speedup) << ',' << format_double(b.median_speedup) << '\n';
  }
  return os.str();
}

inline nlohmann::json bench_json(const BenchReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& b : r.records) {
    rows.push_back({{"decoder", b.decoder},
                    {"tokens", b.tokens},
                    {"iterations", b.iterations},
                    {"batch", b.batch},
                    {"repeats", b.repeats},
                    {"mean_seconds", b.mean_seconds},
                    {"std_seconds", b.std_seconds},
                    {"median_seconds", b.median_seconds},
                    {"predict_passes", b.predict_passes},
                    {"ratio", b.pass_ratio},
                    {"speedup", b.speedup},
                    {"median_speedup", b.median_speedup}});
  }
  return {{"config", r.config}, {"records", rows}};
}

/// Runtime-vs-N curves (log-log): parallel and autoregressive medians.
inline Image bench_plot(const BenchReport& r) {
  PlotSeries par{"parallel", {}, {}}, ar{"autoregressive", {}, {}};
  for (const auto& b : r.records) {
    PlotSeries& s = b.decoder == "parallel" ? par : ar;
    s.x.push_back(static_cast<double>(b.tokens));
    s.y.push_back(b.median_seconds);
  }
  return line_plot({par, ar}, {640, 400, true, true});
}

// ---------------------------------------------------------------- ablation

inline const std::vector<int>& default_ablation_iterations() {
  static const std::vector<int> t = {1, 2, 4, 8, 10, 12, 16, 32, 60};
  return t;
}

struct AblationOptions {
  std::vector<ScheduleKind> schedules{kAllSchedules.begin(), kAllSchedules.end()};
  std::vector<int> iterations = default_ablation_iterations();
  std::size_t samples = 200;  // decoded grids per (schedule, T)
  double temperature = 1.0;
  double selection_temperature = kDefaultSelectionTemperature;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct AblationCell {
  int iterations = 0;
  double oracle_nll = 0.0;   // mean -log p_source(sample) per token
  double marginal_tv = 0.0;  // mean over positions of TV(empirical, exact)
  bool operator==(const AblationCell&) const = default;
};

struct AblationRow {
  std::string schedule;
  double mean_mask_ratio = 0.0;  // integral of gamma over [0, 1]
  double val_nll = 0.0;          // model NLL on fixed uniform-ratio masks
  int best_iterations = 0;       // lowest marginal TV
  std::vector<AblationCell> cells;
  bool operator==(const AblationRow&) const = default;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  nlohmann::json config = nlohmann::json::object();
  bool operator==(const AblationReport&) const = default;
};

inline void to_json(nlohmann::json& j, const AblationCell& c) {
  j = {{"iterations", c.iterations}, {"oracle_nll", c.oracle_nll}, {"marginal_tv", c.marginal_tv}};
}
inline void from_json(const nlohmann::json& j, AblationCell& c) {
  j.at("iterations").get_to(c.iterations);
  j.at("oracle_nll").get_to(c.oracle_nll);
  j.at("marginal_tv").get_to(c.marginal_tv);
}
inline void to_json(nlohmann::json& j, const AblationRow& r) {
  j = {{"schedule", r.schedule},
       {"mean_mask_ratio", r.mean_mask_ratio},
       {"val_nll", r.val_nll},
       {"best_iterations", r.best_iterations},
       {"cells", r.cells}};
}
inline void from_json(const nlohmann::json& j, AblationRow& r) {
  j.at("schedule").get_to(r.schedule);
  j.at("mean_mask_ratio").get_to(r.mean_mask_ratio);
  j.at("val_nll").get_to(r.val_nll);
  j.at("best_iterations").get_to(r.best_iterations);
  j.at("cells").get_to(r.cells);
}
inline void to_json(nlohmann::json& j, const AblationReport& r) { j = {{"config", r.config}, {"rows", r.rows}}; }
inline void from_json(const nlohmann::json& j, AblationReport& r) {
  j.at("config").get_to(r.config);
  j.at("rows").get_to(r.rows);
}

/// Decoding-side metrics of one model against a synthetic oracle.
inline std::vector<AblationCell> evaluate_iterations(const Model<float>& model, const SyntheticSource& src,
                                                     ScheduleKind schedule, const AblationOptions& opts) {
  const ModelConfig& c = model.config;
  const auto exact = exact_marginals(src, c.grid_h, c.grid_w);
  std::vector<AblationCell> cells;
  for (int t : opts.iterations) {
    DecodeOptions d;
    d.schedule = schedule;
    d.iterations = t;
    d.temperature = opts.temperature;
    d.selection_temperature = opts.selection_temperature;
    d.seed = opts.seed * 1000003 + static_cast<std::uint64_t>(t);
    const auto grids = decode_many(model, TokenGrid::all_masked(c.grid_h, c.grid_w), std::nullopt, d, opts.samples,
                                   opts.threads);
    double nll = 0.0;
    for (const auto& g : grids) nll -= log_likelihood(src, g) / static_cast<double>(g.size());
    const auto emp = empirical_marginals(grids, c.vocab);
    double tv = 0.0;
    for (std::size_t i = 0; i < emp.size(); ++i) tv += tv_distance(emp[i], exact[i]);
    cells.push_back({t, nll / static_cast<double>(grids.size()), tv / static_cast<double>(emp.size())});
  }
  return cells;
}

inline int best_iterations_by_tv(const std::vector<AblationCell>& cells) {
  const auto it = std::min_element(cells.begin(), cells.end(),
                                   [](const auto& a, const auto& b) { return a.marginal_tv < b.marginal_tv; });
  return it == cells.end() ? 0 : it->iterations;
}

/// Trains one model per schedule (the schedule drives both training masks
/// and decoding), unless `shared` is given, in which case that model is
/// decoded under every schedule. Validation NLL uses uniform-ratio masks
/// for every schedule so the numbers are comparable.
inline AblationReport run_ablation(const ModelConfig& arch, const SyntheticSource& src, const TrainConfig& train_cfg,
                                   const AblationOptions& opts, const std::optional<Model<float>>& shared = {},
                                   const std::function<void(const std::string&)>& log = {}) {
  if (opts.schedules.empty() || opts.iterations.empty() || opts.samples < 1) {
    throw InvalidArgument("ablation needs schedules, iteration counts and samples");
  }
  const TrainingData data = TrainingData::synthetic(src);
  AblationReport report;
  report.config = {{"model", shared ? shared->config : arch},
                   {"train", train_cfg},
                   {"source", src},
                   {"iterations", opts.iterations},
                   {"samples", opts.samples},
                   {"temperature", opts.temperature},
                   {"selection_temperature", opts.selection_temperature},
                   {"seed", opts.seed},
                   {"shared_checkpoint", shared.has_value()}};
  TrainConfig val_cfg = train_cfg;
  val_cfg.schedule = ScheduleKind::linear;
  for (ScheduleKind kind : opts.schedules) {
    Model<float> model;
    if (shared) {
      model = *shared;
    } else {
      TrainConfig cfg = train_cfg;
      cfg.schedule = kind;
      TrainState state = TrainState::fresh(arch, train_cfg.seed);
      train(state, data, cfg);
      model = state.model;
    }
    AblationRow row;
    row.schedule = std::string(schedule_name(kind));
    row.mean_mask_ratio = mean_mask_ratio(kind);
    row.val_nll = validation_nll(model, make_validation_set(data, model.config, val_cfg));
    row.cells = evaluate_iterations(model, src, kind, opts);
    row.best_iterations = best_iterations_by_tv(row.cells);
    if (log) log(row.schedule + ": val_nll=" + format_double(row.val_nll) + " best_T=" + std::to_string(row.best_iterations));
    report.rows.push_back(std::move(row));
  }
  return report;
}

/// Table-style summary: one line per schedule.
inline std::string ablation_table_csv(const AblationReport& r) {
  std::ostringstream os;
  os << "schedule,mean_mask_ratio,val_nll,best_iterations,best_marginal_tv,best_oracle_nll\n";
  for (const auto& row : r.rows) {
    const auto it = std::find_if(row.cells.begin(), row.cells.end(),
                                 [&](const auto& c) { return c.iterations == row.best_iterations; });
    os << row.schedule << ',' << format_double(row.mean_mask_ratio) << ',' << format_double(row.val_nll) << ','
       << row.best_iterations << ',' << (it == row.cells.end() ? "" : format_double(it->marginal_tv)) << ','
       << (it == row.cells.end() ? "" : format_double(it->oracle_nll)) << '\n';
  }
  return os.str();
}

/// Long-format T-sweep curve.
inline std::string ablation_curve_csv(const AblationReport& r) {
  std::ostringstream os;
  os << "schedule,iterations,oracle_nll,marginal_tv\n";
  for (const auto& row : r.rows) {
    for (const auto& c : row.cells) {
      os << row.schedule << ',' << c.iterations << ',' << format_double(c.oracle_nll) << ','
         << format_double(c.marginal_tv) << '\n';
    }
  }
  return os.str();
}

/// Marginal TV against T, one curve per schedule.
inline Image ablation_plot(const AblationReport& r) {
  std::vector<PlotSeries> series;
  for (const auto& row : r.rows) {
    PlotSeries s{row.schedule, {}, {}};
    for (const auto& c : row.cells) {
      s.x.push_back(c.iterations);
      s.y.push_back(c.marginal_tv);
    }
    series.push_back(std::move(s));
  }
  return line_plot(series, {640, 400, true, false});
}

// ---------------------------------------------------------------- recon

inline const std::vector<double>& default_recon_ratios() {
  static const std::vector<double> r = {0.95, 0.90, 0.85, 0.75, 0.5, 0.25, 0.0};
  return r;
}

inline constexpr double kPsnrCap = 100.0;

struct ReconOptions {
  std::vector<double> ratios = default_recon_ratios();
  int seeds = 100;
  DecodeOptions decode;
  int threads = 1;
};

struct ReconPoint {
  double ratio = 0.0;
  std::size_t masked = 0;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double recovery_mean = 0.0;
};

/// For each seed a grid is drawn (or picked) once and its positions are
/// ordered by one random permutation; ratio r masks the first
/// ceil(r * N) of them, so masks are nested across ratios. The same decode
/// seed is used at every ratio. PSNR compares the decoded image with the
/// original's decode (codebook) or token rendering (no codebook); a
/// per-seed PSNR is capped at 100 dB and is +inf when nothing is masked.
/// Recovery is the fraction of masked tokens restored to their original id.
inline std::vector<ReconPoint> run_recon_curve(const Model<float>& model, const std::function<TokenGrid(Rng&)>& draw,
                                               const Codebook* cb, std::optional<int> class_id,
                                               const ReconOptions& opts) {
  if (opts.seeds < 1) throw InvalidArgument("recon-curve needs at least one seed");
  const ModelConfig& c = model.config;
  const auto n = static_cast<std::size_t>(c.seq_len());
  for (double r : opts.ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw InvalidArgument("mask ratios must lie in [0, 1]");
  }
  const auto seeds = static_cast<std::size_t>(opts.seeds);
  std::vector<TokenGrid> originals(seeds);
  std::vector<std::vector<std::size_t>> orders(seeds);
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(splitmix64(opts.decode.seed + s));
    originals[s] = draw(rng);
    orders[s].resize(n);
    std::iota(orders[s].begin(), orders[s].end(), std::size_t{0});
    std::shuffle(orders[s].begin(), orders[s].end(), rng);
  }
  auto render = [&](const TokenGrid& g) { return cb ? decode(g, *cb) : render_tokens(g, c.vocab, 1); };
  std::vector<ReconPoint> out;
  for (double r : opts.ratios) {
    const std::size_t masked = static_cast<std::size_t>(std::max(0L, detail::ceil_count(r, n)));
    std::vector<double> psnrs(seeds), recovery(seeds);
    parallel_for(seeds, opts.threads, [&](std::size_t s) {
      TokenGrid initial = originals[s];
      for (std::size_t i = 0; i < masked; ++i) {
        initial.mask[orders[s][i]] = 1;
        initial.tokens[orders[s][i]] = 0;
      }
      DecodeOptions d = opts.decode;
      d.seed = opts.decode.seed + s;
      d.record_trace = false;
      const TokenGrid out_grid = decode(model, initial, class_id, d).grid;
      std::size_t hit = 0;
      for (std::size_t i = 0; i < masked; ++i) hit += out_grid.tokens[orders[s][i]] == originals[s].tokens[orders[s][i]];
      recovery[s] = masked ? static_cast<double>(hit) / static_cast<double>(masked) : 1.0;
      const double p = psnr(render(out_grid), render(originals[s]));
      psnrs[s] = masked == 0 ? p : std::min(p, kPsnrCap);
    });
    ReconPoint pt{r, masked, 0, 0, 0};
    if (masked == 0) {
      pt.psnr_mean = std::numeric_limits<double>::infinity();
    } else {
      const SampleStats ps = summarize(psnrs);
      pt.psnr_mean = ps.mean;
      pt.psnr_std = ps.stddev;
    }
    pt.recovery_mean = summarize(recovery).mean;
    out.push_back(pt);
  }
  return out;
}

inline std::string recon_csv(const std::vector<ReconPoint>& pts) {
  std::ostringstream os;
  os << "ratio,psnr_mean,psnr_std,recovery_mean\n";
  for (const auto& p : pts) {
    os << format_double(p.ratio) << ',' << format_double(p.psnr_mean) << ',' << format_double(p.psnr_std) << ','
       << format_double(p.recovery_mean) << '\n';
  }
  return os.str();
}

}  // namespace maskgit
