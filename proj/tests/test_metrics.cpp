#include <gtest/gtest.h>

#include "lastlab/microworld.hpp"
#include "lastlab/metrics.hpp"
#include "test_support.hpp"

using namespace lastlab;
using lastlab::testing::static_agent;
using lastlab::testing::straight_scene;

namespace {

Trajectory constant_speed(double v, double x = 0.0) {
  Trajectory t;
  for (int k = 0; k < kHorizonSteps; ++k) t.waypoints[static_cast<std::size_t>(k)] = {x, v * 0.5 * (k + 1)};
  return t;
}

SubScores random_sub(Rng& rng) {
  return {static_cast<double>(rng.bernoulli(0.8)), static_cast<double>(rng.bernoulli(0.8)),
          static_cast<double>(rng.bernoulli(0.8)), static_cast<double>(rng.bernoulli(0.8)), rng.uniform()};
}

}  // namespace

TEST(SubScores, PassingThroughStaticAgentCollides) {
  auto s = straight_scene(3.0);
  s.agents.push_back(static_agent({0.0, 6.0}, 0.5));
  EXPECT_EQ(sub_scores(s, constant_speed(5.0)).nc, 0.0);
}

TEST(SubScores, ClearPathOnCenterline) {
  auto s = straight_scene(3.0);
  s.agents.push_back(static_agent({6.0, 6.0}, 0.5));
  const auto sc = sub_scores(s, constant_speed(5.0));
  EXPECT_EQ(sc.nc, 1.0);
  EXPECT_EQ(sc.dac, 1.0);
  EXPECT_EQ(sc.ttc, 1.0);
  EXPECT_EQ(sc.cf, 1.0);
  EXPECT_DOUBLE_EQ(sc.ep, 1.0);
  EXPECT_DOUBLE_EQ(pdms(sc), 1.0);
}

TEST(SubScores, LeavingCorridorFailsDac) {
  const auto s = straight_scene(2.0);
  EXPECT_EQ(sub_scores(s, constant_speed(5.0, 2.5)).dac, 0.0);
}

TEST(SubScores, HalfProgressGivesHalfEp) {
  const auto s = straight_scene(3.0);  // GT ends 15 m ahead
  EXPECT_NEAR(sub_scores(s, constant_speed(2.5)).ep, 0.5, 1e-12);
}

TEST(SubScores, TtcIgnoresZeroRelativeSpeedNeighbour) {
  auto s = straight_scene(3.0);
  // Agent 1.2 m beside the ego path edge, moving with the ego.
  s.agents.push_back(lastlab::testing::moving_agent({2.8, 0.0}, {0.0, 5.0}, 0.5));
  s.agents.push_back(lastlab::testing::moving_agent({0.0, 3.0}, {0.0, 5.0}, 0.5));
  const auto sc = sub_scores(s, constant_speed(5.0));
  EXPECT_EQ(sc.nc, 1.0);
  EXPECT_EQ(sc.ttc, 1.0);
}

TEST(SubScores, TtcFlagsClosingAgent) {
  auto s = straight_scene(3.0);
  s.agents.push_back(lastlab::testing::moving_agent({0.0, 13.0}, {0.0, -1.0}, 0.5));
  const auto sc = sub_scores(s, constant_speed(3.0));
  EXPECT_EQ(sc.ttc, 0.0);
}

TEST(SubScores, HardBrakeIsUncomfortable) {
  const auto s = straight_scene(3.0, 60.0, 8.0);
  Trajectory t = constant_speed(8.0);
  for (int k = 1; k < kHorizonSteps; ++k) t.waypoints[static_cast<std::size_t>(k)] = t.waypoints[0];
  EXPECT_EQ(sub_scores(s, t).cf, 0.0);
}

TEST(SubScores, NcAgreesWithBruteForceSweep) {
  Rng rng(2024);
  int collisions = 0;
  for (int i = 0; i < 100; ++i) {
    const auto s = generate_scene(static_cast<std::uint64_t>(i), Difficulty::hard);
    Trajectory t = s.gt_trajectory;
    const double scale = rng.uniform(0.3, 1.6), dx = rng.uniform(-2.0, 2.0);
    for (int k = 0; k < kHorizonSteps; ++k) {
      auto& w = t.waypoints[static_cast<std::size_t>(k)];
      w = {w.x * scale + dx * (k + 1) / 6.0, w.y * scale};
    }
    const bool brute = lastlab::testing::brute_force_collision(s, t);
    collisions += brute;
    EXPECT_EQ(sub_scores(s, t).nc == 0.0, brute) << "scene " << i;
  }
  EXPECT_GT(collisions, 0);
}

TEST(Pdms, HandCases) {
  EXPECT_EQ(pdms({1, 1, 1, 1, 1}), 1.0);
  EXPECT_EQ(pdms({0, 1, 1, 1, 1}), 0.0);
  EXPECT_NEAR(pdms({1, 1, 1, 1, 0.5}), 9.5 / 12.0, 1e-9);
  EXPECT_NEAR(pdms({1, 1, 1, 1, 0.5}), 0.7916666666666666, 1e-9);
}

TEST(Epdms, HandCases) {
  ExtSubScores e;
  EXPECT_EQ(epdms(e), 1.0);
  e.tlc = 0.0;
  EXPECT_EQ(epdms(e), 0.0);
  e.tlc = 1.0;
  e.ec = 0.0;
  EXPECT_EQ(epdms(e), 0.875);
}

TEST(Pdms, RandomVectorsMatchOneLineFormula) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const SubScores s = random_sub(rng);
    EXPECT_NEAR(pdms(s), s.nc * s.dac * (5 * s.ep + 5 * s.ttc + 2 * s.cf) / 12, 1e-12);
    ExtSubScores e{s, (double)rng.bernoulli(0.8), (double)rng.bernoulli(0.8), (double)rng.bernoulli(0.8),
                   (double)rng.bernoulli(0.8), (double)rng.bernoulli(0.8), false};
    EXPECT_NEAR(epdms(e),
                s.nc * s.dac * e.ddc * e.tlc * (5 * s.ep + 2 * e.lk + 2 * e.hc + 5 * s.ttc + 2 * e.ec) / 16, 1e-12);
  }
}

TEST(Pdms, MonotoneAndBounded) {
  Rng rng(2);
  auto base_field = [](SubScores& s, int f) -> double& {
    double* fields[] = {&s.nc, &s.dac, &s.ttc, &s.cf, &s.ep};
    return *fields[f];
  };
  auto ext_field = [](ExtSubScores& e, int f) -> double& {
    double* fields[] = {&e.ddc, &e.tlc, &e.lk, &e.hc, &e.ec};
    return *fields[f];
  };
  for (int i = 0; i < 2000; ++i) {
    SubScores s = random_sub(rng);
    const double p = pdms(s);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    if (s.nc == 0.0 || s.dac == 0.0) {
      EXPECT_EQ(p, 0.0);
    }
    for (int f = 0; f < 5; ++f) {
      SubScores up = s;
      base_field(up, f) = f < 4 ? 1.0 : std::min(1.0, s.ep + rng.uniform());
      EXPECT_GE(pdms(up), p);
      EXPECT_GE(epdms(ExtSubScores{up}), epdms(ExtSubScores{s}));
    }
    ExtSubScores e{s};
    for (int f = 0; f < 5; ++f) {
      ExtSubScores lower = e;
      ext_field(lower, f) = 0.0;
      EXPECT_LE(epdms(lower), epdms(e));
      EXPECT_GE(epdms(lower), 0.0);
    }
  }
}

TEST(ExtSubScores, StopLineCrossingFailsTlc) {
  auto s = straight_scene(3.0);
  s.corridor.stop_line_s = 60.0 + 8.0;  // corridor begins 60 m behind the ego
  EXPECT_EQ(ext_sub_scores(s, constant_speed(5.0)).tlc, 0.0);
  EXPECT_EQ(ext_sub_scores(s, constant_speed(2.0)).tlc, 1.0);
}

TEST(ExtSubScores, ReverseMotionFailsDdc) {
  const auto s = straight_scene(3.0);
  EXPECT_EQ(ext_sub_scores(s, constant_speed(-1.0)).ddc, 0.0);
  EXPECT_EQ(ext_sub_scores(s, constant_speed(1.0)).ddc, 1.0);
}

TEST(ExtSubScores, LaneKeepingUsesHalfOfHalfWidth) {
  const auto s = straight_scene(2.0);
  EXPECT_EQ(ext_sub_scores(s, constant_speed(5.0, 0.9)).lk, 1.0);
  EXPECT_EQ(ext_sub_scores(s, constant_speed(5.0, 1.1)).lk, 0.0);
}

TEST(ExtSubScores, HistoryComfortAndReplanConsistency) {
  const auto s = straight_scene(3.0);
  const auto t = constant_speed(5.0);
  const auto e = ext_sub_scores(s, t);
  EXPECT_EQ(e.hc, 1.0);
  EXPECT_TRUE(e.ec_defaulted);
  Trajectory replan;
  for (int k = 0; k < kHorizonSteps; ++k) replan.waypoints[static_cast<std::size_t>(k)] = {0.0, 2.5 * (k + 2)};
  const auto r = ext_sub_scores(s, t, replan);
  EXPECT_FALSE(r.ec_defaulted);
  EXPECT_EQ(r.ec, 1.0);
  for (auto& w : replan.waypoints) w.x += 0.6;
  EXPECT_EQ(ext_sub_scores(s, t, replan).ec, 0.0);
}

TEST(OpenLoop, IdentityAndUniformOffset) {
  const auto s = straight_scene(3.0);
  const auto gt = constant_speed(5.0);
  const auto same = open_loop(gt, gt, s);
  for (double v : same.l2) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(same.l2_avg, 0.0);
  Trajectory shifted = gt;
  for (auto& w : shifted.waypoints) w.x += 1.0;
  const auto off = open_loop(shifted, gt, s);
  for (double v : off.l2) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(off.l2_avg, 1.0);
}

TEST(OpenLoop, RandomPairsMatchPointwiseRecomputation) {
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const auto s = generate_scene(static_cast<std::uint64_t>(i), i % 2 ? Difficulty::hard : Difficulty::easy);
    Trajectory a, b;
    for (int k = 0; k < kHorizonSteps; ++k) {
      a.waypoints[static_cast<std::size_t>(k)] = {rng.uniform(-5, 5), rng.uniform(0, 25)};
      b.waypoints[static_cast<std::size_t>(k)] = {rng.uniform(-5, 5), rng.uniform(0, 25)};
    }
    const auto r = open_loop(a, b, s);
    double avg = 0.0;
    for (int h = 0; h < 3; ++h) {
      const int idx = 2 * h + 1;  // waypoint at (h + 1) s
      const double dx = a.waypoints[idx].x - b.waypoints[idx].x, dy = a.waypoints[idx].y - b.waypoints[idx].y;
      const double d = std::sqrt(dx * dx + dy * dy);
      EXPECT_NEAR(r.l2[static_cast<std::size_t>(h)], d, 1e-12);
      avg += d / 3.0;
      EXPECT_EQ(r.collision[static_cast<std::size_t>(h)] > 0.0,
                lastlab::testing::brute_force_collision(s, a, h + 1.0));
    }
    EXPECT_NEAR(r.l2_avg, avg, 1e-12);
  }
}

TEST(Aggregate, MeanCases) {
  const std::vector<double> two{1.0, 0.0}, one{0.37};
  EXPECT_EQ(aggregate(two), 0.5);
  EXPECT_EQ(aggregate(one), 0.37);
  EXPECT_THROW(aggregate(std::vector<double>{}), ConfigError);
}

TEST(Aggregate, MatchesCompensatedSum) {
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> v(100);
    for (auto& x : v) x = rng.uniform();
    EXPECT_NEAR(aggregate(v), lastlab::testing::kahan_mean(v), 1e-12);
  }
}

TEST(Aggregate, SummaryIsMeanOfPerScenePdms) {
  std::vector<SceneEvaluation> rows(2);
  rows[0].scores.base = {1, 1, 1, 1, 1};
  rows[1].scores.base = {0, 1, 1, 1, 1};
  for (auto& r : rows) {
    r.pdms = pdms(r.scores.base);
    r.epdms = epdms(r.scores);
  }
  rows[1].fallback = true;
  const auto d = summarize(rows);
  EXPECT_EQ(d.count, 2u);
  EXPECT_DOUBLE_EQ(d.pdms, 0.5);
  EXPECT_DOUBLE_EQ(d.nc, 0.5);
  EXPECT_DOUBLE_EQ(d.fallback_rate, 0.5);
}
