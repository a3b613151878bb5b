#pragma once

// Token-grid sources with closed-form distributions, used as ground truth
// for training and decoding checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maskgit/errors.hpp"
#include "maskgit/random.hpp"
#include "maskgit/token_grid.hpp"

namespace maskgit {

enum class SourceKind : std::uint8_t { iid, row_markov };

/// iid: every position drawn from `weights`.
/// row_markov: each row is a Markov chain started from `weights` with
/// row-stochastic `transition` (K x K); rows are independent.
struct SyntheticSource {
  SourceKind kind = SourceKind::iid;
  std::vector<double> weights;
  std::vector<double> transition;

  int vocab() const noexcept { return static_cast<int>(weights.size()); }

  static SyntheticSource iid(std::vector<double> w) {
    SyntheticSource s{SourceKind::iid, std::move(w), {}};
    s.validate();
    return s;
  }

  static SyntheticSource markov(std::vector<double> initial, std::vector<double> trans) {
    SyntheticSource s{SourceKind::row_markov, std::move(initial), std::move(trans)};
    s.validate();
    return s;
  }

  /// Uniform start, stays on the same token with probability `stay`,
  /// otherwise moves to one of the other K-1 tokens uniformly.
  static SyntheticSource sticky_markov(int vocab, double stay) {
    if (vocab < 2) throw InvalidArgument("sticky Markov source needs vocab >= 2");
    std::vector<double> init(static_cast<std::size_t>(vocab), 1.0 / vocab);
    std::vector<double> trans(static_cast<std::size_t>(vocab) * vocab,
                              (1.0 - stay) / (vocab - 1));
    for (int i = 0; i < vocab; ++i) trans[static_cast<std::size_t>(i) * vocab + i] = stay;
    return markov(std::move(init), std::move(trans));
  }

  void validate() const {
    auto check_dist = [](std::span<const double> p, const char* what) {
      double s = 0.0;
      for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
          throw InvalidArgument(std::string(what) + " has a negative or non-finite entry");
        }
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) {
        throw InvalidArgument(std::string(what) + " does not sum to 1 (sum " +
                              std::to_string(s) + ")");
      }
    };
    if (weights.size() < 2) throw InvalidArgument("source vocabulary must have at least 2 tokens");
    check_dist(weights, "source weights");
    if (kind == SourceKind::row_markov) {
      const std::size_t k = weights.size();
      if (transition.size() != k * k) {
        throw InvalidArgument("transition matrix must be K x K");
      }
      for (std::size_t r = 0; r < k; ++r) {
        check_dist(std::span<const double>(transition).subspan(r * k, k), "transition row");
      }
    } else if (!transition.empty()) {
      throw InvalidArgument("iid source takes no transition matrix");
    }
  }

  bool operator==(const SyntheticSource&) const = default;
};

inline TokenId sample_categorical(std::span<const double> p, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return static_cast<TokenId>(k);
  }
  // Rounding left u above the total; return the last token with mass.
  for (std::size_t k = p.size(); k-- > 0;) {
    if (p[k] > 0.0) return static_cast<TokenId>(k);
  }
  return 0;
}

inline TokenGrid sample_synthetic(const SyntheticSource& src, int h, int w, Rng& rng) {
  src.validate();
  TokenGrid grid(h, w);
  const std::size_t k = src.weights.size();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (src.kind == SourceKind::iid || c == 0) {
        grid.at(r, c) = sample_categorical(src.weights, rng);
      } else {
        const auto prev = static_cast<std::size_t>(grid.at(r, c - 1));
        grid.at(r, c) = sample_categorical(
            std::span<const double>(src.transition).subspan(prev * k, k), rng);
      }
    }
  }
  return grid;
}

/// Per-position token distribution, positions in raster order.
inline std::vector<std::vector<double>> exact_marginals(const SyntheticSource& src, int h, int w) {
  src.validate();
  const std::size_t k = src.weights.size();
  std::vector<std::vector<double>> row_marg(static_cast<std::size_t>(w));
  row_marg[0] = src.weights;
  for (int c = 1; c < w; ++c) {
    if (src.kind == SourceKind::iid) {
      row_marg[static_cast<std::size_t>(c)] = src.weights;
      continue;
    }
    std::vector<double> next(k, 0.0);
    const auto& prev = row_marg[static_cast<std::size_t>(c) - 1];
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) next[j] += prev[i] * src.transition[i * k + j];
    }
    row_marg[static_cast<std::size_t>(c)] = std::move(next);
  }
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) out.push_back(row_marg[static_cast<std::size_t>(c)]);
  }
  return out;
}

/// Exact log-likelihood of a fully unmasked grid.
inline double log_likelihood(const SyntheticSource& src, const TokenGrid& grid) {
  grid.validate(src.vocab());
  const std::size_t k = src.weights.size();
  double ll = 0.0;
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      const auto t = static_cast<std::size_t>(grid.at(r, c));
      const double p = (src.kind == SourceKind::iid || c == 0)
                           ? src.weights[t]
                           : src.transition[static_cast<std::size_t>(grid.at(r, c - 1)) * k + t];
      ll += std::log(p);
    }
  }
  return ll;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Mean per-position entropy of the marginals: the best NLL any model that
/// ignores context can reach.
inline double marginal_entropy(const SyntheticSource& src, int h, int w) {
  const auto marg = exact_marginals(src, h, w);
  double s = 0.0;
  for (const auto& m : marg) s += entropy(m);
  return s / static_cast<double>(marg.size());
}

/// Per-token entropy of the source itself (joint entropy / N).
inline double entropy_rate(const SyntheticSource& src, int h, int w) {
  if (src.kind == SourceKind::iid) return entropy(src.weights);
  const auto marg = exact_marginals(src, 1, w);
  const std::size_t k = src.weights.size();
  double total = entropy(src.weights);
  for (int c = 1; c < w; ++c) {
    const auto& prev = marg[static_cast<std::size_t>(c) - 1];
    for (std::size_t i = 0; i < k; ++i) {
      total += prev[i] * entropy(std::span<const double>(src.transition).subspan(i * k, k));
    }
  }
  (void)h;
  return total / static_cast<double>(w);
}

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("tv_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

/// Empirical per-position distributions of a set of grids.
inline std::vector<std::vector<double>> empirical_marginals(std::span<const TokenGrid> grids, int vocab) {
  if (grids.empty()) throw InvalidArgument("empirical_marginals: no grids");
  const std::size_t n = grids.front().size();
  std::vector<std::vector<double>> out(n, std::vector<double>(static_cast<std::size_t>(vocab), 0.0));
  for (const TokenGrid& g : grids) {
    if (g.size() != n) throw InvalidArgument("empirical_marginals: grid sizes differ");
    for (std::size_t i = 0; i < n; ++i) out[i][static_cast<std::size_t>(g.tokens[i])] += 1.0;
  }
  for (auto& row : out) {
    for (double& v : row) v /= static_cast<double>(grids.size());
  }
  return out;
}

}  // namespace maskgit
