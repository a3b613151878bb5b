#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "maskgit/errors.hpp"
#include "maskgit/random.hpp"

namespace maskgit {

/// Mask-ratio schedule gamma(r): 1 at r = 0, 0 at r = 1, non-increasing.
enum class ScheduleKind : std::uint8_t {
  linear,
  cosine,
  square,
  cubic,
  exponential,
  sqrt,
  log,
};

inline constexpr std::array<ScheduleKind, 7> kAllSchedules = {
    ScheduleKind::linear, ScheduleKind::cosine,      ScheduleKind::square,
    ScheduleKind::cubic,  ScheduleKind::exponential, ScheduleKind::sqrt,
    ScheduleKind::log,
};

// Sharpness of the exponential family.
inline constexpr double kExponentialRate = 6.0;

inline std::string_view schedule_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::square: return "square";
    case ScheduleKind::cubic: return "cubic";
    case ScheduleKind::exponential: return "exponential";
    case ScheduleKind::sqrt: return "sqrt";
    case ScheduleKind::log: return "log";
  }
  return "unknown";
}

inline ScheduleKind parse_schedule(std::string_view name) {
  for (ScheduleKind k : kAllSchedules) {
    if (schedule_name(k) == name) return k;
  }
  throw InvalidArgument("unknown schedule '" + std::string(name) +
                        "' (expected linear|cosine|square|cubic|exponential|sqrt|log)");
}

/// True for the families that stay above the linear chord.
inline bool is_concave(ScheduleKind kind) {
  return kind == ScheduleKind::cosine || kind == ScheduleKind::square ||
         kind == ScheduleKind::cubic || kind == ScheduleKind::exponential;
}

inline double eval_schedule(ScheduleKind kind, double r) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw InvalidArgument("schedule ratio must lie in [0, 1], got " +
                          std::to_string(r));
  }
  if (r == 1.0) return 0.0;
  switch (kind) {
    case ScheduleKind::linear:
      return 1.0 - r;
    case ScheduleKind::cosine:
      return std::cos(M_PI * r / 2.0);
    case ScheduleKind::square:
      return 1.0 - r * r;
    case ScheduleKind::cubic:
      return 1.0 - r * r * r;
    case ScheduleKind::exponential: {
      const double top = std::exp(kExponentialRate);
      return (top - std::exp(kExponentialRate * r)) / (top - 1.0);
    }
    case ScheduleKind::sqrt:
      return 1.0 - std::sqrt(r);
    case ScheduleKind::log:
      return 1.0 - std::log1p((M_E - 1.0) * r);
  }
  return 0.0;
}

namespace detail {
// ceil(gamma * n) tolerant to last-ulp error on exact products.
inline long ceil_count(double gamma, std::size_t n) {
  return static_cast<long>(std::ceil(gamma * static_cast<double>(n) - 1e-9));
}
}  // namespace detail

/// Tokens still masked after each decoding iteration.
struct MaskCountPlan {
  int iterations = 0;
  std::size_t tokens = 0;
  std::vector<std::size_t> remaining;  // n_t, t = 0..T-1
};

/// n_t = ceil(gamma((t+1)/T) * N), clamped so each iteration fixes at least
/// one new token (starting from n_{-1} = N) while leaving at least one token
/// for every later iteration (n_t >= T-1-t), and never below zero.
inline MaskCountPlan plan_decode_masks(ScheduleKind kind, int iterations,
                                       std::size_t tokens) {
  if (iterations < 1) throw InvalidArgument("iterations must be >= 1");
  if (tokens < 1) throw InvalidArgument("token count must be >= 1");
  MaskCountPlan plan{iterations, tokens, {}};
  plan.remaining.reserve(static_cast<std::size_t>(iterations));
  long prev = static_cast<long>(tokens);
  for (int t = 0; t < iterations; ++t) {
    const double r = static_cast<double>(t + 1) / iterations;
    long n = t + 1 == iterations ? 0 : detail::ceil_count(eval_schedule(kind, r), tokens);
    n = std::max(0L, std::min(std::max(n, static_cast<long>(iterations - 1 - t)), prev - 1));
    plan.remaining.push_back(static_cast<std::size_t>(n));
    prev = n;
  }
  return plan;
}

/// Mask count for one training example given a ratio r in [0, 1).
inline std::size_t train_mask_count_at(ScheduleKind kind, double r,
                                       std::size_t tokens) {
  const long n = detail::ceil_count(eval_schedule(kind, r), tokens);
  return static_cast<std::size_t>(
      std::clamp(n, 1L, static_cast<long>(tokens)));
}

inline std::size_t sample_train_mask_count(ScheduleKind kind,
                                           std::size_t tokens, Rng& rng) {
  if (tokens < 1) throw InvalidArgument("token count must be >= 1");
  return train_mask_count_at(kind, uniform01(rng), tokens);
}

/// Mean training mask ratio, the integral of gamma over [0, 1]
/// (composite Simpson, 2000 panels).
inline double mean_mask_ratio(ScheduleKind kind) {
  constexpr int kPanels = 2000;
  const double h = 1.0 / kPanels;
  double s = eval_schedule(kind, 0.0) + eval_schedule(kind, 1.0);
  for (int i = 1; i < kPanels; ++i) {
    s += (i % 2 ? 4.0 : 2.0) * eval_schedule(kind, i * h);
  }
  return s * h / 3.0;
}

}  // namespace maskgit
