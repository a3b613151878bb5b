#pragma once

// Stage-1 patch quantizer: k-means codebook over p x p image patches.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "maskgit/errors.hpp"
#include "maskgit/image.hpp"
#include "maskgit/random.hpp"
#include "maskgit/token_grid.hpp"

namespace maskgit {

/// K code vectors of length D = patch * patch * channels, row-major.
struct Codebook {
  int size = 0;
  int patch = 4;
  int channels = 1;
  std::vector<float> codes;

  int dim() const noexcept { return patch * patch * channels; }

  std::span<const float> code(int k) const {
    return std::span<const float>(codes).subspan(
        static_cast<std::size_t>(k) * dim(), static_cast<std::size_t>(dim()));
  }

  void validate() const {
    if (size < 2) throw InvalidArgument("codebook needs at least 2 codes");
    if (patch < 1 || (channels != 1 && channels != 3)) {
      throw InvalidArgument("codebook patch size or channel count invalid");
    }
    if (codes.size() != static_cast<std::size_t>(size) * dim()) {
      throw InvalidArgument("codebook storage does not match K x D");
    }
    for (float v : codes) {
      if (!std::isfinite(v)) throw NumericError("codebook contains non-finite values");
    }
  }

  bool operator==(const Codebook&) const = default;
};

/// Row-major patch matrix: count x dim.
struct PatchSet {
  int dim = 0;
  std::vector<float> values;

  std::size_t count() const noexcept {
    return dim == 0 ? 0 : values.size() / static_cast<std::size_t>(dim);
  }
  std::span<const float> patch(std::size_t i) const {
    return std::span<const float>(values).subspan(i * dim, static_cast<std::size_t>(dim));
  }
};

inline void check_divisible(const Image& img, int patch) {
  if (patch < 1 || img.width % patch != 0 || img.height % patch != 0) {
    throw InvalidArgument("image extents " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) +
                          " not divisible by patch size " + std::to_string(patch));
  }
}

/// Appends every non-overlapping patch of `img` in raster order.
inline void append_patches(const Image& img, int patch, PatchSet& out) {
  check_divisible(img, patch);
  const int dim = patch * patch * img.channels;
  if (out.dim == 0) out.dim = dim;
  if (out.dim != dim) throw InvalidArgument("patch dimension mismatch across images");
  for (int py = 0; py < img.height / patch; ++py) {
    for (int px = 0; px < img.width / patch; ++px) {
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          for (int c = 0; c < img.channels; ++c) {
            out.values.push_back(img.at(px * patch + x, py * patch + y, c));
          }
        }
      }
    }
  }
}

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

/// Nearest code by Euclidean distance; ties go to the lowest id.
inline TokenId nearest_code(const Codebook& cb, std::span<const float> v) {
  TokenId best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.size; ++k) {
    const double d = squared_distance(cb.code(k), v);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

struct CodebookFit {
  Codebook codebook;
  std::vector<double> inertia;  // total squared error after each assignment
  int reseeded = 0;
};

/// Lloyd iterations from explicit initial codes. After each centroid update
/// any code with no assigned patch is moved onto the worst-quantized patch
/// not already used for a reseed.
inline CodebookFit fit_codebook_from(const PatchSet& patches, Codebook init,
                                     int iterations) {
  init.validate();
  if (patches.dim != init.dim()) throw InvalidArgument("patch dimension does not match codebook");
  const std::size_t n = patches.count();
  const int kk = init.size;
  const int dim = init.dim();
  if (n < static_cast<std::size_t>(kk)) {
    throw InvalidArgument("fit_codebook needs at least K=" + std::to_string(kk) +
                          " patches, got " + std::to_string(n));
  }
  CodebookFit fit{std::move(init), {}, 0};
  Codebook& cb = fit.codebook;
  std::vector<int> assign(n);
  std::vector<double> err(n);
  auto assign_all = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = nearest_code(cb, patches.patch(i));
      err[i] = squared_distance(cb.code(assign[i]), patches.patch(i));
      total += err[i];
    }
    fit.inertia.push_back(total);
  };
  assign_all();
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> sums(static_cast<std::size_t>(kk) * dim, 0.0);
    std::vector<std::size_t> counts(static_cast<std::size_t>(kk), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = patches.patch(i);
      const std::size_t k = static_cast<std::size_t>(assign[i]);
      ++counts[k];
      for (int d = 0; d < dim; ++d) sums[k * dim + d] += p[d];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    std::size_t next_far = 0;
    for (int k = 0; k < kk; ++k) {
      float* dst = cb.codes.data() + static_cast<std::size_t>(k) * dim;
      if (counts[static_cast<std::size_t>(k)] > 0) {
        for (int d = 0; d < dim; ++d) {
          dst[d] = static_cast<float>(sums[static_cast<std::size_t>(k) * dim + d] /
                                      static_cast<double>(counts[static_cast<std::size_t>(k)]));
        }
      } else {
        const auto p = patches.patch(order[next_far++ % n]);
        std::copy(p.begin(), p.end(), dst);
        ++fit.reseeded;
      }
    }
    assign_all();
  }
  return fit;
}

/// Picks K distinct patches at random as the initial codes.
inline Codebook random_init(const PatchSet& patches, int size, int patch,
                            int channels, Rng& rng) {
  const std::size_t n = patches.count();
  if (n < static_cast<std::size_t>(size)) {
    throw InvalidArgument("fit_codebook needs at least K=" + std::to_string(size) +
                          " patches, got " + std::to_string(n));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (int k = 0; k < size; ++k) {  // partial Fisher-Yates
    const std::size_t j = static_cast<std::size_t>(k) +
                          uniform_index(rng, n - static_cast<std::size_t>(k));
    std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
  }
  Codebook cb{size, patch, channels, {}};
  cb.codes.reserve(static_cast<std::size_t>(size) * patches.dim);
  for (int k = 0; k < size; ++k) {
    const auto p = patches.patch(idx[static_cast<std::size_t>(k)]);
    cb.codes.insert(cb.codes.end(), p.begin(), p.end());
  }
  return cb;
}

inline CodebookFit fit_codebook(const PatchSet& patches, int size, int patch,
                                int channels, int iterations, Rng& rng) {
  if (size < 2) throw InvalidArgument("codebook needs at least 2 codes");
  if (patches.dim != patch * patch * channels) {
    throw InvalidArgument("patch dimension does not match patch size and channels");
  }
  return fit_codebook_from(patches, random_init(patches, size, patch, channels, rng),
                           iterations);
}

inline TokenGrid encode(const Image& img, const Codebook& cb) {
  check_divisible(img, cb.patch);
  if (img.channels != cb.channels) throw InvalidArgument("image channels do not match codebook");
  const int gh = img.height / cb.patch, gw = img.width / cb.patch;
  TokenGrid grid(gh, gw);
  std::vector<float> buf(static_cast<std::size_t>(cb.dim()));
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      std::size_t i = 0;
      for (int y = 0; y < cb.patch; ++y) {
        for (int x = 0; x < cb.patch; ++x) {
          for (int c = 0; c < cb.channels; ++c) {
            buf[i++] = img.at(px * cb.patch + x, py * cb.patch + y, c);
          }
        }
      }
      grid.at(py, px) = nearest_code(cb, buf);
    }
  }
  return grid;
}

inline Image decode(const TokenGrid& grid, const Codebook& cb) {
  if (!grid.fully_unmasked()) throw InvalidArgument("cannot decode a grid with masked positions");
  grid.validate(cb.size);
  Image img(grid.width * cb.patch, grid.height * cb.patch, cb.channels);
  for (int py = 0; py < grid.height; ++py) {
    for (int px = 0; px < grid.width; ++px) {
      const auto code = cb.code(grid.at(py, px));
      std::size_t i = 0;
      for (int y = 0; y < cb.patch; ++y) {
        for (int x = 0; x < cb.patch; ++x) {
          for (int c = 0; c < cb.channels; ++c) {
            img.at(px * cb.patch + x, py * cb.patch + y, c) = code[i++];
          }
        }
      }
    }
  }
  return img;
}

/// Grayscale rendering of a token grid (id / (K-1)), each token a
/// `scale` x `scale` block. Used when no codebook is available.
inline Image render_tokens(const TokenGrid& grid, int vocab, int scale = 4) {
  Image img(grid.width * scale, grid.height * scale, 1);
  const float denom = vocab > 1 ? static_cast<float>(vocab - 1) : 1.0f;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y / scale) * grid.width + x / scale;
      img.at(x, y) = grid.mask[i] ? 0.0f : static_cast<float>(grid.tokens[i]) / denom;
    }
  }
  return img;
}

}  // namespace maskgit
