#pragma once

// Closed-loop sub-metrics (micro-world proxies of the NAVSIM definitions),
// PDMS / EPDMS aggregation and open-loop L2 / collision evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "lastlab/scene.hpp"

namespace lastlab {

struct MetricConfig {
  double ego_radius = kEgoRadius;
  double step = 0.1;          // seconds between interpolated checks
  double ttc_horizon = 1.0;   // seconds of constant-velocity projection
  double max_accel = 4.0;     // m/s^2
  double max_jerk = 8.0;      // m/s^3
  double reverse_tolerance = 0.05;  // meters of backward motion allowed per step
  double ec_tolerance = 0.5;  // meters
};

struct SubScores {
  double nc = 1.0;
  double dac = 1.0;
  double ttc = 1.0;
  double cf = 1.0;
  double ep = 1.0;
};

struct ExtSubScores {
  SubScores base;
  double ddc = 1.0;
  double tlc = 1.0;
  double lk = 1.0;
  double hc = 1.0;
  double ec = 1.0;
  bool ec_defaulted = true;  // no replanned trajectory was supplied
};

inline double pdms(const SubScores& s) {
  return s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.cf) / 12.0;
}

inline double epdms(const ExtSubScores& s) {
  return s.base.nc * s.base.dac * s.ddc * s.tlc *
         (5.0 * s.base.ep + 2.0 * s.lk + 2.0 * s.hc + 5.0 * s.base.ttc + 2.0 * s.ec) / 16.0;
}

namespace detail {

inline int interpolation_steps(const MetricConfig& cfg) {
  return static_cast<int>(std::lround(kHorizonSteps * kWaypointDt / cfg.step));
}

/// World-frame ego positions at 0, step, 2*step, ... 3 s.
inline std::vector<Vec2> world_path(const SceneRecord& scene, const Trajectory& traj, const MetricConfig& cfg) {
  const EgoFrame frame = scene.ego.frame();
  const int n = interpolation_steps(cfg);
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k) out.push_back(frame.to_world(trajectory_point(traj, k * cfg.step)));
  return out;
}

/// True if the ego disk sweeping p0->p1 over [t0, t1] touches the agent disk.
/// Exact for linear motion: the interval is split at every agent knot.
inline bool sweep_hits(const AgentTrack& agent, Vec2 p0, Vec2 p1, double t0, double t1, double ego_radius) {
  std::vector<double> cuts{t0};
  for (double kt : agent.times) {
    if (kt > t0 && kt < t1) cuts.push_back(kt);
  }
  cuts.push_back(t1);
  const double reach = ego_radius + agent.radius;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double ua = (cuts[i] - t0) / (t1 - t0);
    const double ub = (cuts[i + 1] - t0) / (t1 - t0);
    const Vec2 ea = p0 + (p1 - p0) * ua;
    const Vec2 eb = p0 + (p1 - p0) * ub;
    if (closest_approach(ea, eb, agent.position(cuts[i]), agent.position(cuts[i + 1])) < reach) return true;
  }
  return false;
}

/// Collision anywhere on the path up to `until` seconds.
inline bool path_collides(const SceneRecord& scene, const std::vector<Vec2>& path, const MetricConfig& cfg,
                          double until) {
  for (std::size_t k = 0; k + 1 < path.size(); ++k) {
    const double t0 = static_cast<double>(k) * cfg.step;
    const double t1 = t0 + cfg.step;
    if (t0 >= until - 1e-9) break;
    for (const auto& agent : scene.agents) {
      if (sweep_hits(agent, path[k], path[k + 1], t0, t1, cfg.ego_radius)) return true;
    }
  }
  return false;
}

/// Comfort on a uniformly spaced (0.5 s) ego-frame position sequence.
inline bool comfortable(std::span<const Vec2> q, const MetricConfig& cfg) {
  const double dt = kWaypointDt;
  std::vector<Vec2> acc;
  for (std::size_t k = 1; k + 1 < q.size(); ++k) acc.push_back((q[k + 1] - q[k] * 2.0 + q[k - 1]) * (1.0 / (dt * dt)));
  for (const auto& a : acc) {
    if (norm(a) > cfg.max_accel) return false;
  }
  for (std::size_t k = 0; k + 1 < acc.size(); ++k) {
    if (norm(acc[k + 1] - acc[k]) / dt > cfg.max_jerk) return false;
  }
  return true;
}

/// Sequence [virtual previous position, origin, waypoints...] for comfort checks.
inline std::vector<Vec2> comfort_sequence(const SceneRecord& scene, const Trajectory& traj) {
  const double dt = kWaypointDt;
  const double v = scene.ego.velocity;
  const double a = scene.ego.acceleration;
  std::vector<Vec2> q{{0.0, -v * dt + 0.5 * a * dt * dt}, {0.0, 0.0}};
  for (const auto& w : traj.waypoints) q.push_back(w);
  return q;
}

inline double progress(const DrivableCorridor& corridor, double s_start, Vec2 world_end) {
  return corridor.project(world_end).s - s_start;
}

}  // namespace detail

inline SubScores sub_scores(const SceneRecord& scene, const Trajectory& traj, const MetricConfig& cfg = {}) {
  SubScores out;
  const auto path = detail::world_path(scene, traj, cfg);
  const double horizon = kHorizonSteps * kWaypointDt;

  out.nc = detail::path_collides(scene, path, cfg, horizon) ? 0.0 : 1.0;

  out.dac = 1.0;
  for (const auto& p : path) {
    if (!scene.corridor.contains(p)) {
      out.dac = 0.0;
      break;
    }
  }

  out.ttc = 1.0;
  for (std::size_t k = 0; k < path.size() && out.ttc > 0.0; ++k) {
    const double t = static_cast<double>(k) * cfg.step;
    const Vec2 ve = k + 1 < path.size() ? (path[k + 1] - path[k]) * (1.0 / cfg.step)
                                        : (path[k] - path[k - 1]) * (1.0 / cfg.step);
    for (const auto& agent : scene.agents) {
      // Velocity of the segment the agent is entering at t.
      const Vec2 va = agent.velocity(t + 1e-9);
      const Vec2 pa = agent.position(t);
      const Vec2 e1 = path[k] + ve * cfg.ttc_horizon;
      const Vec2 a1 = pa + va * cfg.ttc_horizon;
      if (closest_approach(path[k], e1, pa, a1) < cfg.ego_radius + agent.radius) {
        out.ttc = 0.0;
        break;
      }
    }
  }

  const auto q = detail::comfort_sequence(scene, traj);
  out.cf = detail::comfortable(q, cfg) ? 1.0 : 0.0;

  const double s0 = scene.corridor.project(scene.ego.position).s;
  const EgoFrame frame = scene.ego.frame();
  const double gt_prog = detail::progress(scene.corridor, s0, frame.to_world(scene.gt_trajectory.waypoints.back()));
  const double pred_prog = detail::progress(scene.corridor, s0, frame.to_world(traj.waypoints.back()));
  if (gt_prog <= 1e-6) {
    out.ep = pred_prog >= 0.0 ? 1.0 : 0.0;
  } else {
    out.ep = std::clamp(pred_prog / gt_prog, 0.0, 1.0);
  }
  return out;
}

/// Deviation check between a plan and a replan made 0.5 s later, with the
/// replan expressed in the original ego frame.
inline double extended_comfort(const Trajectory& previous, const Trajectory& replanned_in_previous_frame,
                               const MetricConfig& cfg = {}) {
  for (int k = 1; k < kHorizonSteps; ++k) {
    const Vec2 a = previous.waypoints[static_cast<std::size_t>(k)];
    const Vec2 b = replanned_in_previous_frame.waypoints[static_cast<std::size_t>(k - 1)];
    if (norm(a - b) >= cfg.ec_tolerance) return 0.0;
  }
  return 1.0;
}

inline ExtSubScores ext_sub_scores(const SceneRecord& scene, const Trajectory& traj,
                                   const std::optional<Trajectory>& replanned = std::nullopt,
                                   const MetricConfig& cfg = {}) {
  ExtSubScores out;
  out.base = sub_scores(scene, traj, cfg);
  const auto path = detail::world_path(scene, traj, cfg);

  out.ddc = 1.0;
  for (std::size_t k = 0; k + 1 < path.size(); ++k) {
    const Vec2 d = path[k + 1] - path[k];
    const auto proj = scene.corridor.project((path[k] + path[k + 1]) * 0.5);
    if (dot(d, proj.tangent) < -cfg.reverse_tolerance) {
      out.ddc = 0.0;
      break;
    }
  }

  out.tlc = 1.0;
  if (scene.corridor.stop_line_s) {
    for (const auto& p : path) {
      if (scene.corridor.project(p).s > *scene.corridor.stop_line_s) {
        out.tlc = 0.0;
        break;
      }
    }
  }

  double max_lat = 0.0;
  for (const auto& p : path) max_lat = std::max(max_lat, scene.corridor.project(p).distance);
  out.lk = max_lat <= scene.corridor.half_width / 2.0 ? 1.0 : 0.0;

  const EgoFrame frame = scene.ego.frame();
  std::vector<Vec2> q;
  for (int k = kHistorySteps - 1; k >= 0; --k) q.push_back(frame.to_local(scene.history[static_cast<std::size_t>(k)].position));
  q.push_back({0.0, 0.0});
  for (const auto& w : traj.waypoints) q.push_back(w);
  out.hc = detail::comfortable(q, cfg) ? 1.0 : 0.0;

  if (replanned) {
    out.ec = extended_comfort(traj, *replanned, cfg);
    out.ec_defaulted = false;
  } else {
    out.ec = 1.0;
    out.ec_defaulted = true;
  }
  return out;
}

struct OpenLoopResult {
  std::array<double, 3> l2{};         // at 1, 2, 3 s
  double l2_avg = 0.0;
  std::array<double, 3> collision{};  // indicator up to 1, 2, 3 s
  double collision_avg = 0.0;
};

inline OpenLoopResult open_loop(const Trajectory& pred, const Trajectory& gt, const SceneRecord& scene,
                                const MetricConfig& cfg = {}) {
  OpenLoopResult r;
  const auto path = detail::world_path(scene, pred, cfg);
  for (int k = 0; k < 3; ++k) {
    const double t = k + 1.0;
    const auto idx = static_cast<std::size_t>(std::lround(t / kWaypointDt)) - 1;
    r.l2[static_cast<std::size_t>(k)] = norm(pred.waypoints[idx] - gt.waypoints[idx]);
    r.collision[static_cast<std::size_t>(k)] = detail::path_collides(scene, path, cfg, t) ? 1.0 : 0.0;
  }
  r.l2_avg = (r.l2[0] + r.l2[1] + r.l2[2]) / 3.0;
  r.collision_avg = (r.collision[0] + r.collision[1] + r.collision[2]) / 3.0;
  return r;
}

/// Dataset score: the mean of per-scene scores (not the formula applied to
/// mean sub-scores).
inline double aggregate(std::span<const double> per_scene) {
  if (per_scene.empty()) throw ConfigError("aggregate: empty score list");
  double sum = 0.0;
  for (double v : per_scene) sum += v;
  return sum / static_cast<double>(per_scene.size());
}

/// Per-scene evaluation row.
struct SceneEvaluation {
  std::int64_t scene_id = 0;
  Difficulty difficulty = Difficulty::easy;
  Instruction instruction = Instruction::straight;
  bool fallback = false;
  ExtSubScores scores;
  double pdms = 0.0;
  double epdms = 0.0;
  OpenLoopResult open;
};

struct DatasetScore {
  std::size_t count = 0;
  double pdms = 0.0;
  double epdms = 0.0;
  double nc = 0.0, dac = 0.0, ttc = 0.0, cf = 0.0, ep = 0.0;
  double ddc = 0.0, tlc = 0.0, lk = 0.0, hc = 0.0, ec = 0.0;
  double fallback_rate = 0.0;
  std::array<double, 3> l2{};
  double l2_avg = 0.0;
  std::array<double, 3> collision{};
  double collision_avg = 0.0;
};

inline DatasetScore summarize(std::span<const SceneEvaluation> rows) {
  if (rows.empty()) throw ConfigError("summarize: no scenes");
  DatasetScore d;
  d.count = rows.size();
  std::vector<double> p, e;
  for (const auto& r : rows) {
    p.push_back(r.pdms);
    e.push_back(r.epdms);
  }
  d.pdms = aggregate(p);
  d.epdms = aggregate(e);
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    d.nc += r.scores.base.nc / n;
    d.dac += r.scores.base.dac / n;
    d.ttc += r.scores.base.ttc / n;
    d.cf += r.scores.base.cf / n;
    d.ep += r.scores.base.ep / n;
    d.ddc += r.scores.ddc / n;
    d.tlc += r.scores.tlc / n;
    d.lk += r.scores.lk / n;
    d.hc += r.scores.hc / n;
    d.ec += r.scores.ec / n;
    d.fallback_rate += (r.fallback ? 1.0 : 0.0) / n;
    for (std::size_t k = 0; k < 3; ++k) {
      d.l2[k] += r.open.l2[k] / n;
      d.collision[k] += r.open.collision[k] / n;
    }
    d.l2_avg += r.open.l2_avg / n;
    d.collision_avg += r.open.collision_avg / n;
  }
  return d;
}

}  // namespace lastlab
