#pragma once

// Scheduled confidence-based parallel decoding and the raster-order
// autoregressive baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgit/errors.hpp"
#include "maskgit/image.hpp"
#include "maskgit/model.hpp"
#include "maskgit/random.hpp"
#include "maskgit/schedule.hpp"
#include "maskgit/threads.hpp"
#include "maskgit/token_grid.hpp"
#include "maskgit/tokenizer.hpp"

namespace maskgit {

inline constexpr double kDefaultSelectionTemperature = 4.5;

struct DecodeOptions {
  ScheduleKind schedule = ScheduleKind::cosine;
  int iterations = 8;              // T
  double temperature = 1.0;        // token sampling; 0 = argmax
  double selection_temperature = kDefaultSelectionTemperature;  // base of the annealed noise
  std::uint64_t seed = 0;
  bool greedy_final = true;        // no selection noise at the last iteration
  bool record_trace = true;

  void validate() const {
    if (iterations < 1) throw InvalidArgument("iterations (T) must be >= 1");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
      throw InvalidArgument("sampling temperature must be >= 0");
    }
    if (!(selection_temperature >= 0.0) || !std::isfinite(selection_temperature)) {
      throw InvalidArgument("selection temperature must be >= 0");
    }
  }
};

/// Snapshot after one decoding iteration.
struct DecodeState {
  int t = 0;
  std::size_t masked_before = 0;
  TokenGrid grid;                   // committed tokens and remaining mask
  std::vector<TokenId> predicted;   // this iteration's draw at every position
  std::vector<double> confidences;  // 1.0 at positions unmasked before the pass
  std::vector<std::size_t> kept;    // newly committed positions, ascending
  std::vector<std::uint8_t> frozen;
};

struct DecodeResult {
  TokenGrid grid;
  int predict_passes = 0;
  std::vector<DecodeState> trace;
};

/// Annealed selection-noise scale at iteration t of T.
inline double selection_noise_scale(const DecodeOptions& opts, int t) {
  if (opts.greedy_final && t + 1 == opts.iterations) return 0.0;
  return opts.selection_temperature * (1.0 - static_cast<double>(t + 1) / opts.iterations);
}

/// Keeps the `n_keep` candidates with the highest log-confidence plus
/// `noise_scale` times standard Gumbel noise. Ties go to the lowest index.
/// Returns positions in ascending order.
inline std::vector<std::size_t> select_tokens_to_keep(std::span<const double> confidences,
                                                      std::span<const std::uint8_t> candidates,
                                                      std::size_t n_keep, double noise_scale, Rng& rng) {
  if (candidates.size() != confidences.size()) {
    throw InvalidArgument("candidate mask and confidences differ in length");
  }
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i]) pool.push_back(i);
  }
  if (n_keep > pool.size()) throw InvalidArgument("cannot keep more tokens than are masked");
  std::vector<double> score(confidences.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i : pool) {
    score[i] = std::log(confidences[i]);
    if (noise_scale > 0.0) score[i] += noise_scale * standard_gumbel(rng);
  }
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  pool.resize(n_keep);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::vector<std::size_t> select_tokens_to_keep(std::span<const double> confidences, std::size_t n_keep,
                                                      double noise_scale, Rng& rng) {
  const std::vector<std::uint8_t> all(confidences.size(), 1);
  return select_tokens_to_keep(confidences, all, n_keep, noise_scale, rng);
}

struct TokenDraw {
  TokenId token = 0;
  double probability = 0.0;  // untempered model probability of `token`
};

/// Draws from softmax(logits / temperature); temperature 0 takes the argmax
/// (lowest id on ties).
template <typename T>
TokenDraw sample_token(std::span<const T> logits, double temperature, Rng& rng) {
  const std::size_t k = logits.size();
  const double top = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double z = 0.0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - top);
  std::size_t pick = 0;
  if (temperature == 0.0) {
    pick = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  } else {
    std::vector<double> w(k);
    double zt = 0.0;
    for (std::size_t i = 0; i < k; ++i) zt += w[i] = std::exp((static_cast<double>(logits[i]) - top) / temperature);
    const double u = uniform01(rng) * zt;
    double acc = 0.0;
    pick = k - 1;
    while (pick > 0 && w[pick] == 0.0) --pick;
    for (std::size_t i = 0; i < k; ++i) {
      acc += w[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
  }
  return {static_cast<TokenId>(pick), std::exp(static_cast<double>(logits[pick]) - top) / z};
}

namespace detail {
inline void check_decode_input(const ModelConfig& c, const TokenGrid& initial) {
  if (initial.height != c.grid_h || initial.width != c.grid_w) {
    throw InvalidArgument("grid is " + std::to_string(initial.height) + "x" + std::to_string(initial.width) +
                          " but the model expects " + std::to_string(c.grid_h) + "x" + std::to_string(c.grid_w));
  }
  initial.validate(c.vocab);
}
}  // namespace detail

/// Iterative parallel decoding. Positions unmasked in `initial` are frozen.
/// Performs exactly T predict passes; after pass t the masked count equals
/// the plan over the initially masked count. A grid with nothing masked is
/// returned unchanged without calling the model.
template <typename T>
DecodeResult decode(const Model<T>& model, const TokenGrid& initial, std::optional<int> class_id,
                    const DecodeOptions& opts) {
  opts.validate();
  detail::check_decode_input(model.config, initial);
  DecodeResult result{initial, 0, {}};
  const std::size_t masked0 = initial.masked_count();
  if (masked0 == 0) return result;

  const MaskCountPlan plan = plan_decode_masks(opts.schedule, opts.iterations, masked0);
  std::vector<std::uint8_t> frozen(initial.size());
  for (std::size_t i = 0; i < frozen.size(); ++i) frozen[i] = initial.mask[i] ? 0 : 1;
  Rng rng(opts.seed);
  TokenGrid& grid = result.grid;
  const auto k = static_cast<std::size_t>(model.config.vocab);

  for (int t = 0; t < opts.iterations; ++t) {
    const Tensor<T> logits = predict_logits(model, grid, class_id);
    ++result.predict_passes;
    const std::size_t masked = grid.masked_count();
    std::vector<TokenId> predicted = grid.tokens;
    std::vector<double> confidence(grid.size(), 1.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!grid.mask[i]) continue;
      const TokenDraw d = sample_token<T>(std::span<const T>(logits.data()).subspan(i * k, k), opts.temperature, rng);
      predicted[i] = d.token;
      confidence[i] = d.probability;
    }
    const std::size_t target = plan.remaining[static_cast<std::size_t>(t)];
    const std::size_t n_keep = masked > target ? masked - target : 0;
    const auto kept = select_tokens_to_keep(confidence, grid.mask, n_keep, selection_noise_scale(opts, t), rng);
    for (std::size_t i : kept) {
      grid.tokens[i] = predicted[i];
      grid.mask[i] = 0;
    }
    if (opts.record_trace) {
      result.trace.push_back({t, masked, grid, std::move(predicted), std::move(confidence), kept, frozen});
    }
  }
  if (!grid.fully_unmasked()) throw NumericError("decode finished with masked positions");
  return result;
}

/// Raster-order baseline: one predict pass per masked position, each
/// committing the next masked token in row-major order.
template <typename T>
DecodeResult decode_autoregressive(const Model<T>& model, const TokenGrid& initial, std::optional<int> class_id,
                                   double temperature, std::uint64_t seed) {
  if (!(temperature >= 0.0)) throw InvalidArgument("sampling temperature must be >= 0");
  detail::check_decode_input(model.config, initial);
  DecodeResult result{initial, 0, {}};
  Rng rng(seed);
  const auto k = static_cast<std::size_t>(model.config.vocab);
  TokenGrid& grid = result.grid;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.mask[i]) continue;
    const Tensor<T> logits = predict_logits(model, grid, class_id);
    ++result.predict_passes;
    grid.tokens[i] = sample_token<T>(std::span<const T>(logits.data()).subspan(i * k, k), temperature, rng).token;
    grid.mask[i] = 0;
  }
  return result;
}

/// Decodes many grids with per-grid seeds `opts.seed + i`, in parallel.
/// Output is independent of the thread count.
template <typename T>
std::vector<TokenGrid> decode_many(const Model<T>& model, const TokenGrid& initial, std::optional<int> class_id,
                                   DecodeOptions opts, std::size_t count, int threads = worker_threads()) {
  opts.record_trace = false;
  std::vector<TokenGrid> out(count);
  parallel_for(count, threads, [&](std::size_t i) {
    DecodeOptions o = opts;
    o.seed = opts.seed + i;
    out[i] = decode(model, initial, class_id, o).grid;
  });
  return out;
}

/// One JSON object per iteration: t, masked counts, kept positions,
/// confidences, predicted tokens, and the mask after the pass.
inline void write_trace_jsonl(const std::filesystem::path& path, const std::vector<DecodeState>& trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const DecodeState& s : trace) {
    nlohmann::json j = {{"t", s.t},
                        {"masked_before", s.masked_before},
                        {"masked_count", s.grid.masked_count()},
                        {"kept", s.kept},
                        {"confidences", s.confidences},
                        {"predicted", s.predicted},
                        {"tokens", s.grid.tokens},
                        {"mask", s.grid.mask}};
    out << j.dump() << '\n';
  }
}

/// Image of a partially decoded grid: committed tokens rendered through
/// the codebook (or as gray levels without one), masked patches mid-gray.
inline Image render_state(const TokenGrid& grid, const Codebook* cb, int vocab) {
  if (!cb) {
    Image img = render_tokens(grid, vocab, 4);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        if (grid.mask[static_cast<std::size_t>(y / 4) * grid.width + x / 4]) img.at(x, y) = 0.5f;
      }
    }
    return img;
  }
  TokenGrid filled = grid;
  std::fill(filled.mask.begin(), filled.mask.end(), std::uint8_t{0});
  Image img = decode(filled, *cb);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!grid.mask[static_cast<std::size_t>(y / cb->patch) * grid.width + x / cb->patch]) continue;
      for (int c = 0; c < img.channels; ++c) img.at(x, y, c) = 0.5f;
    }
  }
  return img;
}

/// Frames side by side: the initial grid, then the state after each pass.
inline Image filmstrip(const TokenGrid& initial, const std::vector<DecodeState>& trace, const Codebook* cb,
                       int vocab) {
  std::vector<Image> frames{render_state(initial, cb, vocab)};
  for (const DecodeState& s : trace) frames.push_back(render_state(s.grid, cb, vocab));
  const int gap = 2;
  const int w = frames[0].width, h = frames[0].height, ch = frames[0].channels;
  Image strip(static_cast<int>(frames.size()) * (w + gap) - gap, h, ch, 1.0f);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const int x0 = static_cast<int>(f) * (w + gap);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < ch; ++c) strip.at(x0 + x, y, c) = frames[f].at(x, y, c);
      }
    }
  }
  return strip;
}

}  // namespace maskgit
