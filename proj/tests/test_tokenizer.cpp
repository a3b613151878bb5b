#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "maskgit/synthetic.hpp"
#include "maskgit/tokenizer.hpp"

namespace maskgit {
namespace {

PatchSet scalar_patches(std::vector<float> v) { return PatchSet{1, std::move(v)}; }

Image random_image(int w, int h, Rng& rng) {
  Image img(w, h, 1);
  for (float& v : img.pixels) v = static_cast<float>(uniform01(rng));
  return img;
}

Codebook random_codebook(int k, int patch, Rng& rng) {
  Codebook cb{k, patch, 1, {}};
  for (int i = 0; i < k * patch * patch; ++i) cb.codes.push_back(static_cast<float>(uniform01(rng)));
  return cb;
}

// Builds an image by tiling the given code ids.
Image tile(const Codebook& cb, const TokenGrid& ids) { return decode(ids, cb); }

TEST(FitCodebook, DistinctPointsAreRecoveredExactly) {
  std::vector<float> v;
  const std::vector<float> points = {0.1f, 0.4f, 0.7f, 0.95f};
  for (int rep = 0; rep < 5; ++rep) v.insert(v.end(), points.begin(), points.end());
  Rng rng(1);
  const auto fit = fit_codebook(scalar_patches(v), 4, 1, 1, 20, rng);
  std::multiset<float> got(fit.codebook.codes.begin(), fit.codebook.codes.end());
  EXPECT_EQ(got, std::multiset<float>(points.begin(), points.end()));
  EXPECT_EQ(fit.inertia.back(), 0.0);
}

TEST(FitCodebook, TwoClustersOnScalars) {
  Rng rng(2);
  const auto fit = fit_codebook(scalar_patches({0, 0, 0, 10, 10, 10}), 2, 1, 1, 10, rng);
  std::multiset<float> got(fit.codebook.codes.begin(), fit.codebook.codes.end());
  EXPECT_EQ(got, (std::multiset<float>{0.0f, 10.0f}));
}

TEST(FitCodebook, DeadCodesAreReseeded) {
  const PatchSet patches = scalar_patches({0, 0, 1, 1, 5, 5, 9, 9});
  Codebook init{3, 1, 1, {0.0f, 0.0f, 0.0f}};  // two duplicates can never win a patch
  const auto fit = fit_codebook_from(patches, init, 10);
  EXPECT_GT(fit.reseeded, 0);
  std::vector<int> used(3, 0);
  for (std::size_t i = 0; i < patches.count(); ++i) used[nearest_code(fit.codebook, patches.patch(i))]++;
  for (int u : used) EXPECT_GE(u, 1);
}

TEST(FitCodebook, InertiaNeverIncreases) {
  Rng rng(3);
  PatchSet patches;
  for (int i = 0; i < 6; ++i) append_patches(random_image(16, 16, rng), 4, patches);
  const auto fit = fit_codebook(patches, 8, 4, 1, 15, rng);
  for (std::size_t i = 1; i < fit.inertia.size(); ++i) EXPECT_LE(fit.inertia[i], fit.inertia[i - 1]);
}

// Independent naive Lloyd iterations from the same initial codes.
double naive_kmeans_inertia(const PatchSet& patches, std::vector<std::vector<double>> codes, int iterations) {
  const std::size_t n = patches.count();
  const std::size_t d = static_cast<std::size_t>(patches.dim);
  std::vector<std::size_t> assign(n);
  auto dist = [&](std::size_t i, const std::vector<double>& c) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (patches.values[i * d + j] - c[j]) * (patches.values[i * d + j] - c[j]);
    return s;
  };
  double total = 0;
  for (int it = 0; it <= iterations; ++it) {
    total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < codes.size(); ++k) {
        if (dist(i, codes[k]) < dist(i, codes[best])) best = k;
      }
      assign[i] = best;
      total += dist(i, codes[best]);
    }
    if (it == iterations) break;
    for (std::size_t k = 0; k < codes.size(); ++k) {
      std::vector<double> acc(d, 0.0);
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] != k) continue;
        ++cnt;
        for (std::size_t j = 0; j < d; ++j) acc[j] += patches.values[i * d + j];
      }
      if (cnt) {
        for (std::size_t j = 0; j < d; ++j) codes[k][j] = acc[j] / static_cast<double>(cnt);
      }
    }
  }
  return total;
}

TEST(FitCodebook, InertiaCloseToNaiveOracleOnImagePatches) {
  Rng rng(6);
  PatchSet patches;
  // Blob images: each 2x2 patch is one of four base levels plus small noise.
  const float levels[4] = {0.1f, 0.35f, 0.6f, 0.9f};
  for (int img = 0; img < 8; ++img) {
    Image im(16, 16, 1);
    for (int py = 0; py < 8; ++py) {
      for (int px = 0; px < 8; ++px) {
        const float base = levels[uniform_index(rng, 4)];
        for (int y = 0; y < 2; ++y) {
          for (int x = 0; x < 2; ++x) {
            im.at(px * 2 + x, py * 2 + y) = base + static_cast<float>(0.05 * (uniform01(rng) - 0.5));
          }
        }
      }
    }
    append_patches(im, 2, patches);
  }
  Rng init_rng(7);
  const Codebook init = random_init(patches, 4, 2, 1, init_rng);
  std::vector<std::vector<double>> oracle_init;
  for (int k = 0; k < 4; ++k) {
    const auto c = init.code(k);
    oracle_init.emplace_back(c.begin(), c.end());
  }
  const auto fit = fit_codebook_from(patches, init, 20);
  const double oracle = naive_kmeans_inertia(patches, oracle_init, 20);
  EXPECT_LE(fit.inertia.back(), 1.05 * oracle);
}

TEST(FitCodebook, RejectsTooFewPatches) {
  Rng rng(8);
  EXPECT_THROW(fit_codebook(scalar_patches({1, 2}), 3, 1, 1, 5, rng), InvalidArgument);
}

TEST(Encode, TiledAtomsRoundTripToTheirIds) {
  Rng rng(9);
  const Codebook cb = random_codebook(16, 4, rng);
  TokenGrid ids(3, 5);
  for (auto& t : ids.tokens) t = static_cast<TokenId>(uniform_index(rng, 16));
  const Image img = tile(cb, ids);
  EXPECT_EQ(encode(img, cb).tokens, ids.tokens);
  EXPECT_EQ(decode(encode(img, cb), cb), img);
}

TEST(Encode, ConstantImageMapsToItsCode) {
  Codebook cb{3, 2, 1, {0, 0, 0, 0, 0.5f, 0.5f, 0.5f, 0.5f, 1, 1, 1, 1}};
  const Image img(8, 6, 1, 0.5f);
  const TokenGrid g = encode(img, cb);
  EXPECT_EQ(g.height, 3);
  EXPECT_EQ(g.width, 4);
  for (TokenId t : g.tokens) EXPECT_EQ(t, 1);
  EXPECT_EQ(g.masked_count(), 0u);
}

TEST(Encode, EveryIdIsTheBruteForceNearest) {
  Rng rng(10);
  const Codebook cb = random_codebook(12, 4, rng);
  const Image img = random_image(24, 16, rng);
  const TokenGrid g = encode(img, cb);
  for (int py = 0; py < g.height; ++py) {
    for (int px = 0; px < g.width; ++px) {
      double best = 1e300;
      int best_k = -1;
      for (int k = 0; k < cb.size; ++k) {
        double d = 0;
        for (int y = 0; y < 4; ++y) {
          for (int x = 0; x < 4; ++x) {
            const double diff = img.at(px * 4 + x, py * 4 + y) - cb.codes[static_cast<std::size_t>(k) * 16 + y * 4 + x];
            d += diff * diff;
          }
        }
        if (d < best) {
          best = d;
          best_k = k;
        }
      }
      EXPECT_EQ(g.at(py, px), best_k);
    }
  }
}

TEST(Encode, RejectsNonDivisibleExtents) {
  Rng rng(11);
  const Codebook cb = random_codebook(4, 4, rng);
  EXPECT_THROW(encode(Image(10, 8, 1), cb), InvalidArgument);
}

TEST(Decode, QuantizerIsAFixedPoint) {
  Rng rng(12);
  const Codebook cb = random_codebook(8, 4, rng);
  const Image img = random_image(16, 16, rng);
  const TokenGrid once = encode(img, cb);
  EXPECT_EQ(encode(decode(once, cb), cb), once);
}

TEST(Decode, RejectsMaskedPositions) {
  Rng rng(13);
  const Codebook cb = random_codebook(4, 2, rng);
  TokenGrid g(2, 2);
  g.mask[1] = 1;
  EXPECT_THROW(decode(g, cb), InvalidArgument);
}

TEST(Decode, FittedCodebookBeatsSingleCodeBaseline) {
  Rng rng(14);
  auto smooth_image = [&](int seed_shift) {
    Image img(32, 32, 1);
    const double fx = 0.1 + 0.05 * seed_shift, fy = 0.2;
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        img.at(x, y) = static_cast<float>(0.5 + 0.4 * std::sin(fx * x + fy * y + uniform01(rng) * 0.1));
      }
    }
    return img;
  };
  PatchSet train;
  for (int i = 0; i < 6; ++i) append_patches(smooth_image(i), 4, train);
  const Codebook cb = fit_codebook(train, 16, 4, 1, 20, rng).codebook;
  // One-code baseline: the mean patch.
  Codebook mean_cb{2, 4, 1, std::vector<float>(32, 0.0f)};
  for (std::size_t i = 0; i < train.count(); ++i) {
    for (int d = 0; d < 16; ++d) mean_cb.codes[static_cast<std::size_t>(d)] += train.patch(i)[static_cast<std::size_t>(d)] / static_cast<float>(train.count());
  }
  std::fill(mean_cb.codes.begin() + 16, mean_cb.codes.end(), 1e6f);  // unreachable second code
  for (int i = 6; i < 9; ++i) {
    const Image held = smooth_image(i);
    EXPECT_GE(psnr(decode(encode(held, cb), cb), held), psnr(decode(encode(held, mean_cb), mean_cb), held));
  }
}

TEST(Png, RoundTripsThroughDisk) {
  const auto dir = std::filesystem::path(MASKGIT_TEST_TMP);
  std::filesystem::create_directories(dir);
  Image img(5, 3, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i % 256) / 255.0f;
  write_png(dir / "rt.png", img);
  EXPECT_EQ(read_png(dir / "rt.png"), img);
  EXPECT_THROW(read_png(dir / "missing.png"), IoError);
}

TEST(Synthetic, DegenerateWeightsGiveConstantGrid) {
  Rng rng(15);
  const auto src = SyntheticSource::iid({1, 0, 0});
  const TokenGrid g = sample_synthetic(src, 4, 4, rng);
  for (TokenId t : g.tokens) EXPECT_EQ(t, 0);
}

TEST(Synthetic, IdentityTransitionGivesConstantRows) {
  Rng rng(16);
  const auto src = SyntheticSource::markov({0.25, 0.25, 0.5}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const TokenGrid g = sample_synthetic(src, 6, 5, rng);
  for (int r = 0; r < 6; ++r) {
    for (int c = 1; c < 5; ++c) EXPECT_EQ(g.at(r, c), g.at(r, 0));
  }
}

TEST(Synthetic, RejectsInvalidParameters) {
  EXPECT_THROW(SyntheticSource::iid({0.5, 0.6}), InvalidArgument);
  EXPECT_THROW(SyntheticSource::iid({-0.1, 1.1}), InvalidArgument);
  EXPECT_THROW(SyntheticSource::markov({0.5, 0.5}, {1, 0, 0.5, 0.4}), InvalidArgument);
  EXPECT_THROW(SyntheticSource::markov({0.5, 0.5}, {1, 0, 0}), InvalidArgument);
}

TEST(Synthetic, EmpiricalMarginalsMatchExact) {
  Rng rng(17);
  const auto src = SyntheticSource::markov({0.6, 0.3, 0.1}, {0.2, 0.5, 0.3, 0.7, 0.2, 0.1, 0.1, 0.1, 0.8});
  std::vector<TokenGrid> grids;
  for (int i = 0; i < 100000; ++i) grids.push_back(sample_synthetic(src, 2, 4, rng));
  const auto emp = empirical_marginals(grids, 3);
  const auto exact = exact_marginals(src, 2, 4);
  for (std::size_t i = 0; i < exact.size(); ++i) EXPECT_LT(tv_distance(emp[i], exact[i]), 0.01);
}

// Enumeration oracle: likelihoods over every 2x3 grid sum to one, and the
// entropy rate equals the enumerated joint entropy per token.
TEST(Synthetic, LikelihoodAndEntropyAgreeWithEnumeration) {
  const auto src = SyntheticSource::markov({0.5, 0.3, 0.2}, {0.8, 0.1, 0.1, 0.2, 0.6, 0.2, 0.3, 0.3, 0.4});
  double total = 0, joint_h = 0;
  TokenGrid g(2, 3);
  for (int code = 0; code < 729; ++code) {
    int c = code;
    for (auto& t : g.tokens) {
      t = c % 3;
      c /= 3;
    }
    const double p = std::exp(log_likelihood(src, g));
    total += p;
    joint_h -= p * std::log(p);
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(entropy_rate(src, 2, 3), joint_h / 6.0, 1e-12);
  EXPECT_LT(entropy_rate(src, 2, 3), marginal_entropy(src, 2, 3));
}

}  // namespace
}  // namespace maskgit
