#pragma once

// Editing as an initial-mask constraint: tokens outside the region are
// frozen, the region is decoded, and the result is blended back into the
// input with a linear ramp p pixels wide outside the region boundary.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "maskgit/decoder.hpp"
#include "maskgit/errors.hpp"
#include "maskgit/image.hpp"
#include "maskgit/model.hpp"
#include "maskgit/tokenizer.hpp"

namespace maskgit {

enum class EditMode : std::uint8_t { inpaint, outpaint, class_edit };

inline std::string_view edit_mode_name(EditMode m) {
  switch (m) {
    case EditMode::inpaint: return "inpaint";
    case EditMode::outpaint: return "outpaint";
    case EditMode::class_edit: return "class-edit";
  }
  return "unknown";
}

inline EditMode parse_edit_mode(std::string_view name) {
  for (EditMode m : {EditMode::inpaint, EditMode::outpaint, EditMode::class_edit}) {
    if (edit_mode_name(m) == name) return m;
  }
  throw InvalidArgument("unknown edit mode '" + std::string(name) + "' (expected inpaint|outpaint|class-edit)");
}

/// Pixel-level region, row-major, 1 = regenerate.
struct PixelRegion {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> inside;

  PixelRegion() = default;
  PixelRegion(int w, int h) : width(w), height(h), inside(static_cast<std::size_t>(w) * h, 0) {
    if (w < 1 || h < 1) throw InvalidArgument("region extents must be positive");
  }
  std::uint8_t& at(int x, int y) { return inside[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return inside[static_cast<std::size_t>(y) * width + x]; }
};

/// Half-open box [x0, x1) x [y0, y1), clipped to the image.
inline PixelRegion box_region(int width, int height, int x0, int y0, int x1, int y1) {
  PixelRegion r(width, height);
  for (int y = std::max(0, y0); y < std::min(height, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(width, x1); ++x) r.at(x, y) = 1;
  }
  return r;
}

/// The `fraction` of the image nearest the given edge
/// (left|right|top|bottom) is regenerated.
inline PixelRegion outpaint_region(int width, int height, std::string_view direction, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("outpaint fraction must lie in [0, 1]");
  const int cw = static_cast<int>(std::lround(width * fraction));
  const int chh = static_cast<int>(std::lround(height * fraction));
  if (direction == "right") return box_region(width, height, width - cw, 0, width, height);
  if (direction == "left") return box_region(width, height, 0, 0, cw, height);
  if (direction == "bottom") return box_region(width, height, 0, height - chh, width, height);
  if (direction == "top") return box_region(width, height, 0, 0, width, chh);
  throw InvalidArgument("unknown outpaint direction '" + std::string(direction) +
                        "' (expected left|right|top|bottom)");
}

/// Token mask of patches touched by the region (partial cover counts).
inline std::vector<std::uint8_t> snap_region(const PixelRegion& region, int patch) {
  if (patch < 1 || region.width % patch != 0 || region.height % patch != 0) {
    throw InvalidArgument("region extents must be multiples of the patch size");
  }
  const int gw = region.width / patch;
  std::vector<std::uint8_t> tokens(static_cast<std::size_t>(gw) * (region.height / patch), 0);
  for (int y = 0; y < region.height; ++y) {
    for (int x = 0; x < region.width; ++x) {
      if (region.at(x, y)) tokens[static_cast<std::size_t>(y / patch) * gw + x / patch] = 1;
    }
  }
  return tokens;
}

/// Masks the region's tokens and decodes them; everything else is frozen.
template <typename T>
DecodeResult edit_grid(const Model<T>& model, const TokenGrid& grid, const std::vector<std::uint8_t>& region,
                       std::optional<int> class_id, const DecodeOptions& opts) {
  if (region.size() != grid.size()) throw InvalidArgument("region and grid differ in size");
  if (!grid.fully_unmasked()) throw InvalidArgument("edit input grid must be fully unmasked");
  TokenGrid initial = grid;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (region[i]) {
      initial.mask[i] = 1;
      initial.tokens[i] = 0;
    }
  }
  return decode(model, initial, class_id, opts);
}

/// Blend weight of the generated image: 1 inside the snapped region,
/// 1 - d/p at Chebyshev distance d < p outside it, 0 beyond.
inline std::vector<float> blend_alpha(const std::vector<std::uint8_t>& token_region, int grid_w, int grid_h,
                                      int patch) {
  const int w = grid_w * patch, h = grid_h * patch;
  std::vector<float> alpha(static_cast<std::size_t>(w) * h, 0.0f);
  auto inside = [&](int x, int y) {
    return token_region[static_cast<std::size_t>(y / patch) * grid_w + x / patch] != 0;
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (inside(x, y)) {
        alpha[static_cast<std::size_t>(y) * w + x] = 1.0f;
        continue;
      }
      int best = patch;
      for (int dy = -(patch - 1); dy < patch; ++dy) {
        for (int dx = -(patch - 1); dx < patch; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h || !inside(xx, yy)) continue;
          best = std::min(best, std::max(std::abs(dx), std::abs(dy)));
        }
      }
      if (best < patch) {
        alpha[static_cast<std::size_t>(y) * w + x] = 1.0f - static_cast<float>(best) / static_cast<float>(patch);
      }
    }
  }
  return alpha;
}

inline Image composite(const Image& input, const Image& generated, const std::vector<float>& alpha) {
  Image out = input;
  for (int y = 0; y < input.height; ++y) {
    for (int x = 0; x < input.width; ++x) {
      const float a = alpha[static_cast<std::size_t>(y) * input.width + x];
      if (a == 0.0f) continue;
      for (int c = 0; c < input.channels; ++c) {
        out.at(x, y, c) = a == 1.0f ? generated.at(x, y, c) : a * generated.at(x, y, c) + (1.0f - a) * input.at(x, y, c);
      }
    }
  }
  return out;
}

struct EditResult {
  Image image;
  TokenGrid grid;
  std::vector<std::uint8_t> token_region;
  DecodeResult decode;
  bool model_called = false;
  bool whole_image = false;  // region covered everything: unconditional decode
};

/// Image editing. The image must tokenize to exactly the model's grid.
/// Class-edit requires a class-conditional model and a class id.
template <typename T>
EditResult edit_image(const Model<T>& model, const Codebook& cb, const Image& input, const PixelRegion& region,
                      EditMode mode, std::optional<int> class_id, const DecodeOptions& opts) {
  if (region.width != input.width || region.height != input.height) {
    throw InvalidArgument("region extents differ from the image");
  }
  if (input.channels != cb.channels) throw InvalidArgument("image channels do not match the codebook");
  if (mode == EditMode::class_edit && (!class_id || model.config.num_classes == 0)) {
    throw InvalidArgument("class-edit needs a class-conditional model and --class-id");
  }
  if (model.config.num_classes > 0 && !class_id) {
    throw InvalidArgument("class-conditional model needs a class id");
  }
  const TokenGrid grid = encode(input, cb);
  if (grid.height != model.config.grid_h || grid.width != model.config.grid_w) {
    throw InvalidArgument("image tokenizes to " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                          " but the model expects " + std::to_string(model.config.grid_h) + "x" +
                          std::to_string(model.config.grid_w));
  }
  EditResult r;
  r.token_region = snap_region(region, cb.patch);
  const std::size_t count = static_cast<std::size_t>(std::count(r.token_region.begin(), r.token_region.end(), 1));
  if (count == 0) {
    r.grid = grid;
    r.image = decode(grid, cb);
    return r;
  }
  r.whole_image = count == r.token_region.size();
  r.decode = edit_grid(model, grid, r.token_region, class_id, opts);
  r.model_called = true;
  r.grid = r.decode.grid;
  r.image = composite(input, decode(r.grid, cb), blend_alpha(r.token_region, grid.width, grid.height, cb.patch));
  return r;
}

}  // namespace maskgit
