#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "maskgit/schedule.hpp"

namespace maskgit {
namespace {

TEST(Schedule, BoundaryValues) {
  for (ScheduleKind k : kAllSchedules) {
    EXPECT_EQ(eval_schedule(k, 0.0), 1.0) << schedule_name(k);
    EXPECT_EQ(eval_schedule(k, 1.0), 0.0) << schedule_name(k);
  }
  EXPECT_EQ(eval_schedule(ScheduleKind::linear, 0.25), 0.75);
  EXPECT_NEAR(eval_schedule(ScheduleKind::cosine, 0.5), 0.70710678118654752, 1e-15);
}

TEST(Schedule, RangeAndMonotonicityOnSampledPoints) {
  Rng rng(1);
  for (ScheduleKind k : kAllSchedules) {
    std::vector<double> rs(1000);
    for (double& r : rs) r = uniform01(rng);
    std::sort(rs.begin(), rs.end());
    double prev = 1.0;
    for (double r : rs) {
      const double g = eval_schedule(k, r);
      EXPECT_GE(g, 0.0);
      EXPECT_LE(g, 1.0);
      EXPECT_LE(g, prev) << schedule_name(k) << " at r=" << r;
      prev = g;
    }
  }
}

TEST(Schedule, ChordClassificationMatchesFamilies) {
  for (ScheduleKind k : kAllSchedules) {
    const double mid = eval_schedule(k, 0.5);
    if (k == ScheduleKind::linear) {
      EXPECT_EQ(mid, 0.5);
    } else if (is_concave(k)) {
      EXPECT_GT(mid, 0.5) << schedule_name(k);
    } else {
      EXPECT_LT(mid, 0.5) << schedule_name(k);
    }
  }
}

TEST(Schedule, RejectsRatioOutsideUnitInterval) {
  EXPECT_THROW(eval_schedule(ScheduleKind::cosine, -0.01), InvalidArgument);
  EXPECT_THROW(eval_schedule(ScheduleKind::cosine, 1.01), InvalidArgument);
  EXPECT_THROW(eval_schedule(ScheduleKind::cosine, std::nan("")), InvalidArgument);
}

TEST(Schedule, NamesRoundTrip) {
  for (ScheduleKind k : kAllSchedules) EXPECT_EQ(parse_schedule(schedule_name(k)), k);
  EXPECT_THROW(parse_schedule("quartic"), InvalidArgument);
}

// Frozen from a 50-digit mpmath evaluation of ceil(N cos(pi (t+1) / 2T))
// with the strict-decrease clamp.
TEST(PlanDecodeMasks, CosineMatchesHighPrecisionOracle) {
  using V = std::vector<std::size_t>;
  EXPECT_EQ(plan_decode_masks(ScheduleKind::cosine, 8, 256).remaining,
            (V{252, 237, 213, 182, 143, 98, 50, 0}));
  EXPECT_EQ(plan_decode_masks(ScheduleKind::cosine, 8, 64).remaining,
            (V{63, 60, 54, 46, 36, 25, 13, 0}));
  EXPECT_EQ(plan_decode_masks(ScheduleKind::cosine, 8, 16).remaining,
            (V{15, 14, 13, 12, 9, 7, 4, 0}));
  EXPECT_EQ(plan_decode_masks(ScheduleKind::cosine, 12, 1024).remaining,
            (V{1016, 990, 947, 887, 813, 725, 624, 512, 392, 266, 134, 0}));
  EXPECT_EQ(plan_decode_masks(ScheduleKind::cosine, 4, 3).remaining, (V{2, 1, 0, 0}));
}

TEST(PlanDecodeMasks, LinearAndSinglePass) {
  EXPECT_EQ(plan_decode_masks(ScheduleKind::linear, 4, 8).remaining,
            (std::vector<std::size_t>{6, 4, 2, 0}));
  for (ScheduleKind k : kAllSchedules) {
    EXPECT_EQ(plan_decode_masks(k, 1, 77).remaining, (std::vector<std::size_t>{0}));
  }
}

TEST(PlanDecodeMasks, InvariantsOverSampledConfigurations) {
  Rng rng(2);
  for (int trial = 0; trial < 3000; ++trial) {
    const ScheduleKind k = kAllSchedules[uniform_index(rng, kAllSchedules.size())];
    const int t_total = 1 + static_cast<int>(uniform_index(rng, 64));
    const std::size_t n = 1 + uniform_index(rng, 4096);
    const auto plan = plan_decode_masks(k, t_total, n);
    ASSERT_EQ(plan.remaining.size(), static_cast<std::size_t>(t_total));
    EXPECT_EQ(plan.remaining.back(), 0u);
    std::size_t prev = n;
    for (std::size_t r : plan.remaining) {
      EXPECT_LT(r, n);
      if (static_cast<std::size_t>(t_total) <= n) {
        EXPECT_LT(r, prev);
      } else {
        EXPECT_TRUE(r < prev || r == 0);
      }
      prev = r;
    }
  }
}

TEST(TrainMaskCount, Endpoints) {
  for (ScheduleKind k : kAllSchedules) EXPECT_EQ(train_mask_count_at(k, 0.0, 256), 256u);
  EXPECT_EQ(train_mask_count_at(ScheduleKind::cosine, std::nextafter(1.0, 0.0), 256), 1u);
}

// Oracle: probability of each count by midpoint integration of r over a
// fine grid, independent of the sampler.
TEST(TrainMaskCount, EmpiricalDistributionMatchesPushforward) {
  for (ScheduleKind k : {ScheduleKind::cosine, ScheduleKind::log, ScheduleKind::exponential}) {
    constexpr std::size_t n = 32;
    constexpr int grid = 1'000'000;
    std::vector<double> exact(n + 1, 0.0);
    for (int i = 0; i < grid; ++i) {
      const double r = (i + 0.5) / grid;
      long c = static_cast<long>(std::ceil(eval_schedule(k, r) * n - 1e-9));
      c = std::clamp(c, 1L, static_cast<long>(n));
      exact[static_cast<std::size_t>(c)] += 1.0 / grid;
    }
    Rng rng(3);
    std::vector<double> emp(n + 1, 0.0);
    constexpr int draws = 100000;
    for (int i = 0; i < draws; ++i) emp[sample_train_mask_count(k, n, rng)] += 1.0 / draws;
    double tv = 0.0;
    for (std::size_t c = 0; c <= n; ++c) tv += 0.5 * std::abs(exact[c] - emp[c]);
    EXPECT_LT(tv, 0.02) << schedule_name(k);
  }
}

// Closed-form integrals of each family on [0, 1].
TEST(MeanMaskRatio, MatchesClosedForms) {
  const double lam = kExponentialRate;
  const std::map<ScheduleKind, double> exact = {
      {ScheduleKind::linear, 0.5},
      {ScheduleKind::cosine, 2.0 / M_PI},
      {ScheduleKind::square, 2.0 / 3.0},
      {ScheduleKind::cubic, 0.75},
      {ScheduleKind::exponential,
       (std::exp(lam) - (std::exp(lam) - 1.0) / lam) / (std::exp(lam) - 1.0)},
      {ScheduleKind::sqrt, 1.0 / 3.0},
      {ScheduleKind::log, 1.0 - 1.0 / (M_E - 1.0)},
  };
  for (const auto& [k, v] : exact) EXPECT_NEAR(mean_mask_ratio(k), v, 1e-4) << schedule_name(k);
  EXPECT_NEAR(mean_mask_ratio(ScheduleKind::cosine), 0.6366, 1e-4);
}

}  // namespace
}  // namespace maskgit
