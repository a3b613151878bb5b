#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskgit/errors.hpp"

namespace maskgit {

using TokenId = std::int32_t;

/// 2-D grid of codebook ids with a companion mask (true = unknown).
/// Masked entries carry no meaning.
struct TokenGrid {
  int height = 0;
  int width = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;

  TokenGrid() = default;
  TokenGrid(int h, int w, TokenId fill = 0)
      : height(h),
        width(w),
        tokens(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill),
        mask(tokens.size(), 0) {
    if (h < 1 || w < 1) throw InvalidArgument("token grid extents must be positive");
  }

  static TokenGrid all_masked(int h, int w) {
    TokenGrid g(h, w);
    std::fill(g.mask.begin(), g.mask.end(), std::uint8_t{1});
    return g;
  }

  std::size_t size() const noexcept { return tokens.size(); }

  TokenId& at(int r, int c) {
    return tokens[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(c)];
  }
  TokenId at(int r, int c) const {
    return tokens[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(c)];
  }

  std::size_t masked_count() const noexcept {
    std::size_t n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
  }

  bool fully_unmasked() const noexcept { return masked_count() == 0; }

  /// Throws unless every unmasked id is in [0, vocab).
  void validate(int vocab) const {
    if (tokens.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width) ||
        mask.size() != tokens.size()) {
      throw InvalidArgument("token grid storage does not match its extents");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!mask[i] && (tokens[i] < 0 || tokens[i] >= vocab)) {
        throw InvalidArgument("token id " + std::to_string(tokens[i]) +
                              " at position " + std::to_string(i) +
                              " outside vocabulary of size " + std::to_string(vocab));
      }
    }
  }

  bool operator==(const TokenGrid&) const = default;
};

}  // namespace maskgit
