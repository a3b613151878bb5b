#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "maskgit/errors.hpp"

namespace maskgit {

using Rng = std::mt19937_64;

// 53-bit uniform in [0, 1). Avoids std::uniform_real_distribution so draws do
// not depend on the standard library implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform in (0, 1); safe under log.
inline double uniform_open01(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

inline double standard_gumbel(Rng& rng) {
  return -std::log(-std::log(uniform_open01(rng)));
}

inline double standard_normal(Rng& rng) {
  // Box-Muller, one value per call.
  const double u1 = uniform_open01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Normal(0, stddev) truncated to [-2 stddev, 2 stddev] by rejection.
inline double truncated_normal(Rng& rng, double stddev) {
  for (;;) {
    const double z = standard_normal(rng);
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: a pure function of (key, counter). Used for
/// dropout masks so they are reproducible from (seed, layer, step) alone.
struct CounterRng {
  std::uint64_t key = 0;

  static CounterRng make(std::uint64_t seed, std::uint64_t stream,
                         std::uint64_t step) {
    return CounterRng{
        splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ (step * 0x632be59bd9b4e019ULL))};
  }

  double uniform(std::uint64_t counter) const {
    return static_cast<double>(splitmix64(key ^ splitmix64(counter)) >> 11) *
           0x1.0p-53;
  }
};

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (is.fail()) throw InvalidArgument("malformed RNG state");
  return rng;
}

}  // namespace maskgit
