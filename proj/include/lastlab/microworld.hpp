#pragma once

// Procedural bird's-eye-view driving scenes, the ego-centric raster and the
// deterministic teacher oracles that supply geometry and dynamics targets.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "lastlab/metrics.hpp"
#include "lastlab/rng.hpp"
#include "lastlab/scene.hpp"

namespace lastlab {

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

namespace detail {

struct LongitudinalState {
  double s = 0.0;
  double v = 0.0;
  double a = 0.0;
};

/// Centerline from piecewise-constant curvature, sampled every meter.
/// Local frame: origin at the ego, heading +y.
inline std::vector<Vec2> build_centerline(double s_min, double s_max, double turn_start, double turn_length,
                                          double curvature) {
  auto kappa = [&](double s) { return (s >= turn_start && s < turn_start + turn_length) ? curvature : 0.0; };
  const double fine = 0.01;
  std::vector<Vec2> forward_pts{{0.0, 0.0}};
  {
    Vec2 p{0.0, 0.0};
    double heading = std::numbers::pi / 2.0;
    int steps = 0;
    for (double s = 0.0; s < s_max - 1e-9; s += fine) {
      const double mid = heading + 0.5 * fine * kappa(s + 0.5 * fine);
      p = p + unit_from_angle(mid) * fine;
      heading += fine * kappa(s + 0.5 * fine);
      if (++steps % 100 == 0) forward_pts.push_back(p);
    }
  }
  std::vector<Vec2> out;
  for (double s = s_min; s < -0.5; s += 1.0) out.push_back({0.0, s});
  out.insert(out.end(), forward_pts.begin(), forward_pts.end());
  return out;
}

/// Agent following the centerline from arc length s0 at constant speed.
inline AgentTrack lane_follower(const DrivableCorridor& lane, double s0, double speed, double radius,
                                double t_begin, double t_end) {
  AgentTrack a;
  a.radius = radius;
  const double dt = 0.5;
  for (double t = t_begin; t <= t_end + 1e-9; t += dt) {
    a.times.push_back(t);
    a.points.push_back(lane.pose_at(s0 + speed * t).position);
  }
  return a;
}

inline AgentTrack straight_mover(Vec2 p0, Vec2 vel, double radius, double t_begin, double t_end) {
  AgentTrack a;
  a.radius = radius;
  a.times = {t_begin, t_end};
  a.points = {p0 + vel * t_begin, p0 + vel * t_end};
  return a;
}

/// Reference driver: IDM toward a desired speed, yielding to agents that are
/// (or within `lookahead` seconds will be) inside the ego's lane band, and to
/// an active stop line. Jerk-limited. Returns ego-frame waypoints.
inline Trajectory simulate_reference(const DrivableCorridor& lane_world, const EgoFrame& frame,
                                     const std::vector<AgentTrack>& agents, double v0, double a0, double v_des) {
  const double dt = 0.1;
  const double a_max = 1.5, b = 2.0, s_min_gap = 2.0, headway = 1.0, lookahead = 1.5;
  const double s_ego0 = lane_world.project(frame.origin).s;
  LongitudinalState st{s_ego0, v0, a0};
  Trajectory out;
  int wp = 0;
  for (int k = 1; k <= 30; ++k) {
    const double t = (k - 1) * dt;
    double gap_best = 1e9;
    double v_obs = 0.0;
    for (const auto& ag : agents) {
      for (double tau = 0.0; tau <= lookahead + 1e-9; tau += 0.25) {
        const Vec2 p = ag.position(t + tau);
        const auto pr = lane_world.project(p);
        if (pr.distance < ag.radius + kEgoRadius + 0.4 && pr.s > st.s) {
          const double gap = pr.s - st.s - ag.radius - kEgoRadius;
          if (gap < gap_best) {
            gap_best = gap;
            v_obs = std::max(0.0, dot(ag.velocity(t), pr.tangent));
          }
          break;
        }
      }
    }
    if (lane_world.stop_line_s && *lane_world.stop_line_s > st.s) {
      const double gap = *lane_world.stop_line_s - st.s - 0.5;
      if (gap < gap_best) {
        gap_best = gap;
        v_obs = 0.0;
      }
    }
    double a_cmd = a_max * (1.0 - std::pow(st.v / std::max(v_des, 0.1), 4));
    if (gap_best < 1e8) {
      const double s_star = s_min_gap + std::max(0.0, st.v * headway + st.v * (st.v - v_obs) / (2.0 * std::sqrt(a_max * b)));
      a_cmd -= a_max * std::pow(s_star / std::max(gap_best, 0.1), 2);
    }
    a_cmd = std::clamp(a_cmd, -3.5, a_max);
    const double jerk_cap = 5.0 * dt;
    st.a = std::clamp(a_cmd, st.a - jerk_cap, st.a + jerk_cap);
    const double v_next = std::max(0.0, st.v + st.a * dt);
    st.s += 0.5 * (st.v + v_next) * dt;
    st.v = v_next;
    if (k % 5 == 0) {
      out.waypoints[static_cast<std::size_t>(wp++)] = frame.to_local(lane_world.pose_at(st.s).position);
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic scene for (seed, difficulty). Candidate scenes whose
/// reference trajectory collides, leaves the corridor or is uncomfortable are
/// redrawn from the next derived stream.
inline SceneRecord generate_scene(std::uint64_t seed, Difficulty difficulty) {
  MetricConfig mcfg;
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng = Rng::derive(seed * 2 + (difficulty == Difficulty::hard ? 1 : 0), attempt);
    SceneRecord sc;
    sc.seed = seed;
    sc.difficulty = difficulty;
    sc.scene_id = static_cast<std::int64_t>(seed) * 2 + (difficulty == Difficulty::hard ? 1 : 0);
    sc.duration = 6.0;

    const double u = rng.uniform();
    enum class Kind { straight, left, right, stop } kind =
        u < 0.35 ? Kind::straight : u < 0.55 ? Kind::left : u < 0.75 ? Kind::right : Kind::stop;

    const double hw = rng.uniform(1.8, 3.0);
    double v0 = 0.0;
    switch (kind) {
      case Kind::straight: v0 = rng.uniform(3.0, 8.0); break;
      case Kind::left:
      case Kind::right: v0 = rng.uniform(4.0, 7.0); break;
      case Kind::stop: v0 = rng.uniform(3.0, 6.0); break;
    }
    const double a0 = rng.uniform(-0.3, 0.3);

    double turn_start = 1e9, turn_len = 0.0, curvature = 0.0, v_des = v0;
    if (kind == Kind::left || kind == Kind::right) {
      const double radius = rng.uniform(std::max(12.0, v0 * v0 / 2.5), 30.0);
      turn_start = rng.uniform(0.0, 3.0);
      turn_len = radius * std::numbers::pi / 2.0;
      curvature = (kind == Kind::left ? 1.0 : -1.0) / radius;
      v_des = std::min(v0 + rng.uniform(-0.5, 0.5), std::sqrt(2.5 * radius));
    } else if (kind == Kind::straight) {
      v_des = std::clamp(v0 + rng.uniform(-1.0, 1.5), 2.0, 9.0);
    }

    const std::vector<Vec2> local = detail::build_centerline(-25.0, 70.0, turn_start, turn_len, curvature);
    const Vec2 origin{rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0)};
    const double heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const EgoFrame frame{origin, heading};

    sc.corridor.half_width = hw;
    for (const auto& p : local) sc.corridor.centerline.push_back(frame.to_world(p));
    const double s_ego = sc.corridor.project(origin).s;
    if (kind == Kind::stop) {
      const double decel = rng.uniform(1.2, 2.2);
      sc.corridor.stop_line_s = s_ego + v0 * v0 / (2.0 * decel) + 2.0;
    }

    sc.ego = EgoState{v0, a0, origin, heading};
    for (int k = 0; k < kHistorySteps; ++k) {
      const double tau = kWaypointDt * (k + 1);
      sc.history[static_cast<std::size_t>(k)] = sc.corridor.pose_at(s_ego - (v0 * tau - 0.5 * a0 * tau * tau));
    }
    sc.goal = sc.corridor.pose_at(s_ego + 20.0).position;

    // Clutter that never enters the corridor.
    const int clutter = rng.uniform_int(0, 2);
    for (int i = 0; i < clutter; ++i) {
      const double r = rng.uniform(0.5, 1.0);
      const auto p = sc.corridor.pose_at(s_ego + rng.uniform(-5.0, 30.0));
      const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const Vec2 left = unit_from_angle(p.heading + std::numbers::pi / 2.0);
      const Vec2 pos = p.position + left * (side * (hw + r + rng.uniform(1.0, 4.0)));
      if (sc.corridor.distance_to_centerline(pos) < hw + r + 0.5) continue;
      sc.agents.push_back(detail::straight_mover(pos, {}, r, -2.0, sc.duration));
    }

    std::size_t conflict_index = sc.agents.size();
    if (difficulty == Difficulty::hard) {
      if (rng.bernoulli(0.5)) {
        const double s_a = s_ego + rng.uniform(v0 * 1.0 + 4.0, v0 * 2.0 + 6.0);
        const double v_a = rng.uniform(0.0, 0.6 * v0);
        auto a = detail::lane_follower(sc.corridor, s_a - v_a * 0.0, v_a, 1.0, -2.0, sc.duration);
        sc.agents.push_back(a);
      } else {
        const auto p = sc.corridor.pose_at(s_ego + rng.uniform(8.0, 18.0));
        const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const Vec2 left = unit_from_angle(p.heading + std::numbers::pi / 2.0);
        const double speed = rng.uniform(1.0, 1.8);
        const double r = rng.uniform(0.5, 0.8);
        const Vec2 start = p.position + left * (side * (hw + 1.5));
        sc.agents.push_back(detail::straight_mover(start, left * (-side * speed), r, -2.0, sc.duration));
      }
    }

    sc.gt_trajectory = detail::simulate_reference(sc.corridor, frame, sc.agents, v0, a0, v_des);

    // Reference must be clean.
    const SubScores gt = sub_scores(sc, sc.gt_trajectory, mcfg);
    if (gt.nc < 1.0 || gt.dac < 1.0 || gt.cf < 1.0) continue;
    bool in_range = true;
    for (const auto& w : sc.gt_trajectory.waypoints) {
      in_range = in_range && std::abs(w.x) <= kTrajectoryLimit && std::abs(w.y) <= kTrajectoryLimit;
    }
    if (!in_range) continue;

    if (difficulty == Difficulty::hard) {
      // The conflict agent must cut across the reference path within 4 s.
      const AgentTrack& a = sc.agents[conflict_index];
      std::vector<Vec2> path{{0.0, 0.0}};
      for (const auto& w : sc.gt_trajectory.waypoints) path.push_back(w);
      double best = 1e9;
      for (double t = 0.0; t <= 4.0 + 1e-9; t += 0.05) {
        const Vec2 p = frame.to_local(a.position(t));
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
          best = std::min(best, closest_approach(p, p, path[i], path[i + 1]));
        }
      }
      if (!(best < 2.0 * a.radius + kEgoRadius)) continue;
    }

    const Vec2 end = sc.gt_trajectory.waypoints.back();
    const Vec2 before = sc.gt_trajectory.waypoints[kHorizonSteps - 2];
    const Vec2 dir = end - before;
    const double dheading = norm(dir) > 1e-3 ? std::atan2(-dir.x, dir.y) : 0.0;
    if (kind == Kind::stop) {
      sc.instruction = Instruction::stop;
    } else if (std::abs(dheading) >= 15.0 * std::numbers::pi / 180.0) {
      sc.instruction = dheading > 0.0 ? Instruction::left : Instruction::right;
    } else {
      sc.instruction = Instruction::straight;
    }
    return sc;
  }
}

// ---------------------------------------------------------------------------
// Raster
// ---------------------------------------------------------------------------

/// 3 x 64 x 64 ego-centric grid: drivable, agents, ego + goal. Always drawn
/// in the frame of the ego pose at t = 0.
struct Raster {
  static constexpr int kChannels = 3;
  static constexpr int kSize = ViewGrid::kSize;
  std::vector<double> values = std::vector<double>(kChannels * kSize * kSize, 0.0);

  double& at(int ch, int row, int col) { return values[static_cast<std::size_t>((ch * kSize + row) * kSize + col)]; }
  double at(int ch, int row, int col) const {
    return values[static_cast<std::size_t>((ch * kSize + row) * kSize + col)];
  }
};

inline void require_time(const SceneRecord& scene, double t) {
  if (!(t >= 0.0 && t <= scene.duration)) throw RangeError("time outside scene duration");
}

inline Raster rasterize(const SceneRecord& scene, double t) {
  require_time(scene, t);
  Raster r;
  const EgoFrame frame = scene.ego.frame();
  std::vector<Vec2> agents_now;
  for (const auto& a : scene.agents) agents_now.push_back(a.position(t));
  const Vec2 goal_local = frame.to_local(scene.goal);
  for (int row = 0; row < Raster::kSize; ++row) {
    for (int col = 0; col < Raster::kSize; ++col) {
      const Vec2 local = ViewGrid::cell_center(row, col);
      const Vec2 world = frame.to_world(local);
      if (scene.corridor.contains(world)) r.at(0, row, col) = 1.0;
      for (std::size_t i = 0; i < scene.agents.size(); ++i) {
        if (norm(world - agents_now[i]) <= scene.agents[i].radius) r.at(1, row, col) = 1.0;
      }
      if (norm(goal_local - local) <= 1.0) r.at(2, row, col) = 0.5;
      if (norm(local) <= kEgoRadius) r.at(2, row, col) = 1.0;
    }
  }
  return r;
}

/// 8 x 8 patches of 8 x 8 cells, each flattened channel-major (192 values).
inline Eigen::MatrixXd patchify(const Raster& raster, int patch = 8) {
  const int per_side = Raster::kSize / patch;
  Eigen::MatrixXd out(per_side * per_side, Raster::kChannels * patch * patch);
  for (int pr = 0; pr < per_side; ++pr) {
    for (int pc = 0; pc < per_side; ++pc) {
      int k = 0;
      for (int ch = 0; ch < Raster::kChannels; ++ch) {
        for (int dr = 0; dr < patch; ++dr) {
          for (int dc = 0; dc < patch; ++dc) out(pr * per_side + pc, k++) = raster.at(ch, pr * patch + dr, pc * patch + dc);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Teacher oracles
// ---------------------------------------------------------------------------

struct OracleConfig {
  int k_3d = 12;
  int k_wm = 12;
  int feature_dim = 32;
  double max_range = 20.0;
  static constexpr int kHorizons = 3;  // 1 s, 2 s, 3 s ahead
};

/// Teacher targets: f_geo is k_3d x d_t, f_dyn stacks the three horizons as
/// (3 * k_wm) x d_t with horizon h in rows [h * k_wm, (h + 1) * k_wm).
struct TeacherFeatures {
  Eigen::MatrixXd f_geo;
  Eigen::MatrixXd f_dyn;

  Eigen::MatrixXd horizon(int h, int k_wm) const { return f_dyn.middleRows(h * k_wm, k_wm); }
};

namespace detail {

/// Ray parameter interval [lo, hi] inside the capsule around segment a-b.
inline bool ray_capsule(Vec2 o, Vec2 d, Vec2 a, Vec2 b, double radius, double& lo, double& hi) {
  lo = std::numeric_limits<double>::infinity();
  hi = -std::numeric_limits<double>::infinity();
  auto disk = [&](Vec2 c) {
    const Vec2 m = o - c;
    const double bq = dot(m, d);
    const double cq = dot(m, m) - radius * radius;
    const double disc = bq * bq - cq;
    if (disc < 0.0) return;
    const double sq = std::sqrt(disc);
    lo = std::min(lo, -bq - sq);
    hi = std::max(hi, -bq + sq);
  };
  disk(a);
  disk(b);
  const Vec2 ab = b - a;
  const double len = norm(ab);
  if (len > 0.0) {
    const Vec2 ax = ab * (1.0 / len);
    const Vec2 ay{-ax.y, ax.x};
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    auto slab = [&](double origin, double dir, double mn, double mx) {
      if (std::abs(dir) < 1e-15) {
        if (origin < mn || origin > mx) t0 = std::numeric_limits<double>::infinity();
        return;
      }
      double ta = (mn - origin) / dir, tb = (mx - origin) / dir;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    };
    slab(dot(o - a, ax), dot(d, ax), 0.0, len);
    slab(dot(o - a, ay), dot(d, ay), -radius, radius);
    if (t0 <= t1) {
      lo = std::min(lo, t0);
      hi = std::max(hi, t1);
    }
  }
  return lo <= hi;
}

/// Distance from o along unit d until leaving the corridor.
inline double corridor_exit(const DrivableCorridor& c, Vec2 o, Vec2 d) {
  std::vector<std::pair<double, double>> spans;
  for (std::size_t i = 0; i + 1 < c.centerline.size(); ++i) {
    double lo, hi;
    if (ray_capsule(o, d, c.centerline[i], c.centerline[i + 1], c.half_width, lo, hi) && hi >= 0.0) {
      spans.emplace_back(lo, hi);
    }
  }
  std::sort(spans.begin(), spans.end());
  double reach = 0.0;
  bool inside = false;
  for (const auto& [lo, hi] : spans) {
    if (lo > reach) break;
    if (hi >= reach) {
      reach = hi;
      inside = true;
    }
  }
  return inside ? reach : 0.0;
}

inline double ray_disk_entry(Vec2 o, Vec2 d, Vec2 c, double radius) {
  const Vec2 m = o - c;
  const double cq = dot(m, m) - radius * radius;
  if (cq <= 0.0) return 0.0;
  const double bq = dot(m, d);
  const double disc = bq * bq - cq;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double r = -bq - std::sqrt(disc);
  return r >= 0.0 ? r : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Ego-frame direction for angle alpha, CCW from forward.
inline Vec2 ego_ray_direction(double alpha) { return {-std::sin(alpha), std::cos(alpha)}; }

/// Ray angle for fan entry j of geometry token k.
inline double geometry_ray_angle(int k, int j, const OracleConfig& cfg) {
  const int rays = cfg.feature_dim - 1;
  return 2.0 * std::numbers::pi * (k + (j + 0.5) / rays) / cfg.k_3d;
}

inline Eigen::MatrixXd geometry_oracle(const SceneRecord& scene, double t, const OracleConfig& cfg = {}) {
  require_time(scene, t);
  const EgoFrame frame = scene.ego.frame();
  const Vec2 o = scene.ego.position;
  Eigen::MatrixXd f(cfg.k_3d, cfg.feature_dim);
  std::vector<Vec2> centers;
  for (const auto& a : scene.agents) centers.push_back(a.position(t));
  for (int k = 0; k < cfg.k_3d; ++k) {
    for (int j = 0; j < cfg.feature_dim - 1; ++j) {
      const Vec2 d = frame.vector_to_world(ego_ray_direction(geometry_ray_angle(k, j, cfg)));
      double r = detail::corridor_exit(scene.corridor, o, d);
      for (std::size_t i = 0; i < centers.size(); ++i) {
        r = std::min(r, detail::ray_disk_entry(o, d, centers[i], scene.agents[i].radius));
      }
      f(k, j) = std::clamp(std::min(r, cfg.max_range) / cfg.max_range, -1.0, 1.0);
    }
    const auto proj = scene.corridor.project(o);
    f(k, cfg.feature_dim - 1) = std::clamp(proj.lateral / scene.corridor.half_width, -1.0, 1.0);
  }
  return f;
}

/// Sector index for an ego-frame point, sectors CCW from forward.
inline int dynamics_sector(Vec2 local, int k_wm) {
  double ang = std::atan2(-local.x, local.y);
  if (ang < 0.0) ang += 2.0 * std::numbers::pi;
  int k = static_cast<int>(ang / (2.0 * std::numbers::pi) * k_wm);
  return std::clamp(k, 0, k_wm - 1);
}

inline constexpr int kDynamicsStatFeatures = 7;
inline constexpr double kDynamicsCountNorm = 4.0;
inline constexpr double kDynamicsSpeedNorm = 10.0;
inline constexpr double kDynamicsKernelSigma = 6.0;

inline Eigen::MatrixXd dynamics_oracle(const SceneRecord& scene, double t, const OracleConfig& cfg = {}) {
  if (!(t >= 0.0 && t + OracleConfig::kHorizons <= scene.duration + 1e-12)) {
    throw RangeError("dynamics horizon exceeds scene duration");
  }
  const EgoFrame frame = scene.ego.frame();
  const Vec2 ego_vel{0.0, scene.ego.velocity};
  const int bins = cfg.feature_dim - kDynamicsStatFeatures;
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(OracleConfig::kHorizons * cfg.k_wm, cfg.feature_dim);
  for (int h = 0; h < OracleConfig::kHorizons; ++h) {
    const double tau = t + h + 1.0;
    std::vector<int> count(static_cast<std::size_t>(cfg.k_wm), 0);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(cfg.k_wm, 6);
    std::vector<std::vector<double>> ranges(static_cast<std::size_t>(cfg.k_wm));
    for (const auto& a : scene.agents) {
      const Vec2 p = frame.to_local(a.position(tau));
      const double rho = norm(p);
      if (rho > cfg.max_range) continue;
      const int k = dynamics_sector(p, cfg.k_wm);
      const Vec2 rel_v = frame.vector_to_local(a.velocity(tau)) - ego_vel;
      const Vec2 disp = p - frame.to_local(a.position(tau - 1.0));
      count[static_cast<std::size_t>(k)]++;
      Eigen::RowVectorXd stats(6);
      stats << p.x, p.y, rel_v.x, rel_v.y, disp.x, disp.y;
      sums.row(k) += stats;
      ranges[static_cast<std::size_t>(k)].push_back(rho);
    }
    for (int k = 0; k < cfg.k_wm; ++k) {
      const int row = h * cfg.k_wm + k;
      const int n = count[static_cast<std::size_t>(k)];
      f(row, 0) = std::min(n / kDynamicsCountNorm, 1.0);
      if (n > 0) {
        const Eigen::RowVectorXd m = sums.row(k) / n;
        f(row, 1) = m(0) / cfg.max_range;
        f(row, 2) = m(1) / cfg.max_range;
        f(row, 3) = m(2) / kDynamicsSpeedNorm;
        f(row, 4) = m(3) / kDynamicsSpeedNorm;
        f(row, 5) = m(4) / cfg.max_range;
        f(row, 6) = m(5) / cfg.max_range;
      }
      for (int j = 0; j < bins; ++j) {
        const double c = (j + 0.5) * cfg.max_range / bins;
        double acc = 0.0;
        for (double rho : ranges[static_cast<std::size_t>(k)]) {
          acc += std::exp(-(rho - c) * (rho - c) / (2.0 * kDynamicsKernelSigma * kDynamicsKernelSigma));
        }
        f(row, kDynamicsStatFeatures + j) = std::min(acc, 1.0);
      }
    }
  }
  return f.cwiseMax(-1.0).cwiseMin(1.0);
}

inline TeacherFeatures teacher_features(const SceneRecord& scene, const OracleConfig& cfg = {}) {
  return {geometry_oracle(scene, 0.0, cfg), dynamics_oracle(scene, 0.0, cfg)};
}

}  // namespace lastlab
