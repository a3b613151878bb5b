#pragma once

// MVTM training: mask a schedule-drawn number of tokens, predict them with
// the bidirectional model, Adam update. All randomness comes from one
// checkpointed generator plus dropout keyed on (seed, site, step).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgit/checkpoint.hpp"
#include "maskgit/errors.hpp"
#include "maskgit/model.hpp"
#include "maskgit/random.hpp"
#include "maskgit/schedule.hpp"
#include "maskgit/synthetic.hpp"
#include "maskgit/token_grid.hpp"

namespace maskgit {

struct TrainConfig {
  ScheduleKind schedule = ScheduleKind::cosine;
  int batch_size = 32;
  int steps = 1000;
  double lr = 3e-4;
  int warmup = 100;  // linear warm-up steps
  double beta1 = 0.9;
  double beta2 = 0.96;
  double eps = 1e-8;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  int eval_interval = 100;
  int eval_size = 256;  // validation sequences

  /// `allow_zero_lr` admits lr = 0, used to check that an update is a no-op.
  void validate(bool allow_zero_lr = false) const {
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (steps < 0) throw InvalidArgument("steps must be >= 0");
    if (!(lr > 0.0 || (allow_zero_lr && lr == 0.0)) || !std::isfinite(lr)) {
      throw InvalidArgument("learning rate must be > 0");
    }
    if (warmup < 0) throw InvalidArgument("warmup must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw InvalidArgument("Adam betas must lie in (0, 1)");
    }
    if (!(eps > 0.0)) throw InvalidArgument("Adam epsilon must be > 0");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw InvalidArgument("label smoothing must lie in [0, 1)");
    }
    if (eval_interval < 0 || eval_size < 1) throw InvalidArgument("eval settings must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"schedule", std::string(schedule_name(c.schedule))},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"lr", c.lr},
                     {"warmup", c.warmup},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"label_smoothing", c.label_smoothing},
                     {"seed", c.seed},
                     {"eval_interval", c.eval_interval},
                     {"eval_size", c.eval_size}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  j.at("batch_size").get_to(c.batch_size);
  j.at("steps").get_to(c.steps);
  j.at("lr").get_to(c.lr);
  j.at("warmup").get_to(c.warmup);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
  j.at("label_smoothing").get_to(c.label_smoothing);
  j.at("seed").get_to(c.seed);
  j.at("eval_interval").get_to(c.eval_interval);
  j.at("eval_size").get_to(c.eval_size);
}

inline void to_json(nlohmann::json& j, const SyntheticSource& s) {
  j = nlohmann::json{{"kind", s.kind == SourceKind::iid ? "iid" : "row_markov"},
                     {"weights", s.weights},
                     {"transition", s.transition}};
}

inline void from_json(const nlohmann::json& j, SyntheticSource& s) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "iid" && kind != "row_markov") throw InvalidArgument("unknown source kind '" + kind + "'");
  s.kind = kind == "iid" ? SourceKind::iid : SourceKind::row_markov;
  j.at("weights").get_to(s.weights);
  j.at("transition").get_to(s.transition);
  s.validate();
}

/// Training data: synthetic sources (one per class, or a single
/// unconditional one) or pre-encoded token grids with optional labels.
/// Grids larger than the model window are randomly cropped.
struct TrainingData {
  std::vector<SyntheticSource> sources;
  std::vector<TokenGrid> grids;
  std::vector<int> labels;  // parallel to grids; empty = unconditional

  static TrainingData synthetic(SyntheticSource src) { return TrainingData{{std::move(src)}, {}, {}}; }
  static TrainingData synthetic_classes(std::vector<SyntheticSource> per_class) {
    return TrainingData{std::move(per_class), {}, {}};
  }
  static TrainingData tokens(std::vector<TokenGrid> g, std::vector<int> l = {}) {
    return TrainingData{{}, std::move(g), std::move(l)};
  }

  int num_classes() const {
    if (!sources.empty()) return sources.size() > 1 ? static_cast<int>(sources.size()) : 0;
    if (labels.empty()) return 0;
    return *std::max_element(labels.begin(), labels.end()) + 1;
  }

  void validate(const ModelConfig& c) const {
    if (sources.empty() == grids.empty()) {
      throw InvalidArgument("training data needs either synthetic sources or token grids");
    }
    for (const auto& s : sources) {
      if (s.vocab() != c.vocab) throw InvalidArgument("source vocabulary does not match the model");
    }
    for (const auto& g : grids) {
      if (g.height < c.grid_h || g.width < c.grid_w) {
        throw InvalidArgument("training grid smaller than the model window");
      }
      if (!g.fully_unmasked()) throw InvalidArgument("training grids must be fully unmasked");
      g.validate(c.vocab);
    }
    if (!labels.empty() && labels.size() != grids.size()) {
      throw InvalidArgument("one label per training grid is required");
    }
    if (num_classes() != c.num_classes) {
      throw InvalidArgument("training data has " + std::to_string(num_classes()) +
                            " classes but the model expects " + std::to_string(c.num_classes));
    }
  }
};

struct Batch {
  std::vector<TokenGrid> grids;
  std::vector<int> classes;  // empty for unconditional data
};

inline TokenGrid crop_grid(const TokenGrid& g, int top, int left, int h, int w) {
  TokenGrid out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) out.at(r, c) = g.at(top + r, left + c);
  }
  return out;
}

inline Batch sample_batch(const TrainingData& data, const ModelConfig& c, std::size_t size, Rng& rng) {
  Batch batch;
  for (std::size_t b = 0; b < size; ++b) {
    if (!data.sources.empty()) {
      std::size_t k = 0;
      if (data.sources.size() > 1) {
        k = uniform_index(rng, data.sources.size());
        batch.classes.push_back(static_cast<int>(k));
      }
      batch.grids.push_back(sample_synthetic(data.sources[k], c.grid_h, c.grid_w, rng));
    } else {
      const std::size_t i = uniform_index(rng, data.grids.size());
      const TokenGrid& g = data.grids[i];
      const int top = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(g.height - c.grid_h + 1)));
      const int left = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(g.width - c.grid_w + 1)));
      batch.grids.push_back(crop_grid(g, top, left, c.grid_h, c.grid_w));
      if (!data.labels.empty()) batch.classes.push_back(data.labels[i]);
    }
  }
  return batch;
}

struct TrainingExample {
  TokenGrid masked;  // masked positions carry token 0 and mask 1
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
};

/// Masks exactly `count` positions chosen uniformly without replacement.
inline TrainingExample mask_uniformly(const TokenGrid& grid, std::size_t count, Rng& rng) {
  if (!grid.fully_unmasked()) throw InvalidArgument("training example needs a fully unmasked grid");
  if (count > grid.size()) throw InvalidArgument("mask count exceeds the grid size");
  std::vector<std::size_t> order(grid.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {  // partial Fisher-Yates
    std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
  }
  TrainingExample ex{grid, grid.tokens, std::vector<std::uint8_t>(grid.size(), 0)};
  for (std::size_t i = 0; i < count; ++i) {
    ex.mask[order[i]] = 1;
    ex.masked.mask[order[i]] = 1;
    ex.masked.tokens[order[i]] = 0;
  }
  return ex;
}

/// Draws r ~ U[0, 1), masks ceil(gamma(r) * N) positions.
inline TrainingExample make_training_example(const TokenGrid& grid, ScheduleKind schedule, Rng& rng) {
  const std::size_t count = sample_train_mask_count(schedule, grid.size(), rng);
  return mask_uniformly(grid, count, rng);
}

struct TrainState {
  Model<float> model;
  std::vector<Tensor<float>> adam_m;
  std::vector<Tensor<float>> adam_v;
  std::uint64_t step = 0;
  Rng rng;

  static TrainState fresh(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    TrainState s{Model<float>::random(c, rng), {}, {}, 0, Rng(splitmix64(seed))};
    for (const auto& t : s.model.params.tensors) {
      s.adam_m.emplace_back(t.shape());
      s.adam_v.emplace_back(t.shape());
    }
    return s;
  }
};

/// Learning rate at a 0-based step: linear warm-up to `lr`, then constant.
inline double learning_rate_at(const TrainConfig& cfg, std::uint64_t step) {
  if (cfg.warmup == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step + 1) / cfg.warmup);
}

struct PreparedBatch {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
  std::vector<int> classes;
};

inline PreparedBatch prepare_batch(const Batch& batch, const ModelConfig& c, ScheduleKind schedule,
                                   Rng& rng) {
  PreparedBatch p;
  p.classes = batch.classes;
  for (const TokenGrid& g : batch.grids) {
    const TrainingExample ex = make_training_example(g, schedule, rng);
    const auto ids = model_input(ex.masked, c);
    p.inputs.insert(p.inputs.end(), ids.begin(), ids.end());
    p.targets.insert(p.targets.end(), ex.targets.begin(), ex.targets.end());
    p.mask.insert(p.mask.end(), ex.mask.begin(), ex.mask.end());
  }
  return p;
}

/// One Adam update on the mean MVTM loss of `batch`; returns the loss.
/// Masks are drawn from `state.rng`.
inline double train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg) {
  cfg.validate(true);
  const ModelConfig& c = state.model.config;
  const PreparedBatch p = prepare_batch(batch, c, cfg.schedule, state.rng);
  GradTape<float> tape(true);
  const Var logits = forward(tape, state.model, p.inputs, p.classes, {true, cfg.seed, state.step});
  const Var loss = mvtm_loss(tape, logits, p.targets, p.mask, static_cast<std::size_t>(c.seq_len()),
                             cfg.label_smoothing);
  const double value = tape.value(loss).item();
  if (!std::isfinite(value)) {
    throw NumericError("non-finite training loss at step " + std::to_string(state.step));
  }
  const auto grads = tape.backward(loss);

  const std::uint64_t t = state.step + 1;
  const double lr = learning_rate_at(cfg, state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  for (std::size_t s = 0; s < grads.size(); ++s) {
    auto param = state.model.params.tensors[s].data();
    auto m = state.adam_m[s].data();
    auto v = state.adam_v[s].data();
    const auto g = grads[s].data();
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      if (lr == 0.0) continue;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      param[i] = static_cast<float>(param[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  ++state.step;
  return value;
}

/// Fixed validation examples: a seeded batch with seeded masks.
inline PreparedBatch make_validation_set(const TrainingData& data, const ModelConfig& c,
                                         const TrainConfig& cfg) {
  Rng rng(splitmix64(cfg.seed ^ 0x76616c6964ULL));
  const Batch b = sample_batch(data, c, static_cast<std::size_t>(cfg.eval_size), rng);
  return prepare_batch(b, c, cfg.schedule, rng);
}

/// Mean masked-token NLL (no smoothing, no dropout), averaged per sequence
/// then over sequences.
template <typename T>
double validation_nll(const Model<T>& model, const PreparedBatch& set) {
  const auto n = static_cast<std::size_t>(model.config.seq_len());
  const std::size_t count = set.inputs.size() / n;
  constexpr std::size_t kChunk = 64;
  double total = 0.0;
  for (std::size_t start = 0; start < count; start += kChunk) {
    const std::size_t len = std::min(kChunk, count - start);
    const auto span_of = [&](const auto& v) { return std::span(v).subspan(start * n, len * n); };
    std::span<const int> cls;
    if (!set.classes.empty()) cls = std::span(set.classes).subspan(start, len);
    GradTape<T> tape(false);
    const Var logits = forward(tape, model, span_of(set.inputs), cls);
    const Var loss = mvtm_loss(tape, logits, span_of(set.targets), span_of(set.mask), n, 0.0);
    total += static_cast<double>(tape.value(loss).item()) * static_cast<double>(len);
  }
  return total / static_cast<double>(count);
}

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::optional<double> val_nll;
  double seconds = 0.0;
};

/// Append-only `step,loss,val_nll,seconds` CSV; val_nll is blank between
/// evaluations.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open metrics file '" + path.string() + "'");
    if (fresh) out_ << "step,loss,val_nll,seconds\n";
  }

  void write(const MetricsRow& row) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%llu,%.9g,", static_cast<unsigned long long>(row.step), row.loss);
    out_ << buf;
    if (row.val_nll) {
      std::snprintf(buf, sizeof(buf), "%.9g", *row.val_nll);
      out_ << buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.6f\n", row.seconds);
    out_ << buf;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

using MetricsCallback = std::function<void(const MetricsRow&)>;

/// Runs training until `state.step == cfg.steps`. Evaluates on the fixed
/// validation set every `eval_interval` steps and after the last step.
inline std::vector<MetricsRow> train(TrainState& state, const TrainingData& data, const TrainConfig& cfg,
                                     const MetricsCallback& on_step = {}) {
  cfg.validate();
  data.validate(state.model.config);
  const PreparedBatch val = make_validation_set(data, state.model.config, cfg);
  std::vector<MetricsRow> rows;
  const auto start = std::chrono::steady_clock::now();
  while (state.step < static_cast<std::uint64_t>(cfg.steps)) {
    const Batch batch = sample_batch(data, state.model.config, static_cast<std::size_t>(cfg.batch_size),
                                     state.rng);
    MetricsRow row;
    row.loss = train_step(state, batch, cfg);
    row.step = state.step;
    const bool last = state.step == static_cast<std::uint64_t>(cfg.steps);
    if (last || (cfg.eval_interval > 0 && state.step % static_cast<std::uint64_t>(cfg.eval_interval) == 0)) {
      row.val_nll = validation_nll(state.model, val);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(row);
    if (on_step) on_step(row);
  }
  return rows;
}

inline Checkpoint to_checkpoint(const TrainState& s, std::optional<Codebook> codebook = std::nullopt,
                                nlohmann::json metadata = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config = s.model.config;
  ck.params = s.model.params;
  ck.adam_m = s.adam_m;
  ck.adam_v = s.adam_v;
  ck.step = s.step;
  ck.rng_state = rng_state(s.rng);
  ck.codebook = std::move(codebook);
  ck.metadata = std::move(metadata);
  return ck;
}

inline TrainState from_checkpoint(const Checkpoint& ck) {
  TrainState s{checkpoint_model(ck), ck.adam_m, ck.adam_v, ck.step, Rng()};
  if (s.adam_m.empty()) {
    for (const auto& t : s.model.params.tensors) {
      s.adam_m.emplace_back(t.shape());
      s.adam_v.emplace_back(t.shape());
    }
  }
  if (!ck.rng_state.empty()) s.rng = rng_from_state(ck.rng_state);
  return s;
}

}  // namespace maskgit
