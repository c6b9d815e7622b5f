#pragma once

// Micro-world data types and the planar geometry shared by the scene
// generator, the teacher oracles and the metric engine.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lastlab/errors.hpp"

namespace lastlab {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
  friend Vec2 operator*(double s, Vec2 a) { return {a.x * s, a.y * s}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 unit_from_angle(double a) { return {std::cos(a), std::sin(a)}; }

inline double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// Planning horizon: waypoints at 0.5 s spacing out to 3 s.
inline constexpr int kHorizonSteps = 6;
inline constexpr double kWaypointDt = 0.5;
inline constexpr int kHistorySteps = 4;
inline constexpr double kTrajectoryLimit = 32.0;

/// Future waypoints in the ego frame: x to the right, y forward, meters.
struct Trajectory {
  std::array<Vec2, kHorizonSteps> waypoints{};
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Pose {
  Vec2 position;
  double heading = 0.0;  // radians, world frame, CCW from +x
};

/// Ego-centric frame anchored at a pose: x right, y forward.
struct EgoFrame {
  Vec2 origin;
  double heading = 0.0;

  Vec2 forward() const { return unit_from_angle(heading); }
  Vec2 right() const { return {std::sin(heading), -std::cos(heading)}; }

  Vec2 to_local(Vec2 world) const {
    const Vec2 d = world - origin;
    return {dot(d, right()), dot(d, forward())};
  }
  Vec2 to_world(Vec2 local) const { return origin + right() * local.x + forward() * local.y; }
  Vec2 vector_to_local(Vec2 v) const { return {dot(v, right()), dot(v, forward())}; }
  Vec2 vector_to_world(Vec2 v) const { return right() * v.x + forward() * v.y; }
};

struct CorridorProjection {
  double s = 0.0;        // arc length of the closest centerline point
  double lateral = 0.0;  // signed, positive to the left of travel
  double distance = 0.0;
  Vec2 point;
  Vec2 tangent;
  std::size_t segment = 0;
};

/// Drivable region: all points within half_width of the centerline polyline.
struct DrivableCorridor {
  std::vector<Vec2> centerline;
  double half_width = 2.0;
  std::optional<double> stop_line_s;  // arc length of an active stop line

  void validate() const {
    if (centerline.size() < 2) throw ConfigError("corridor needs at least two centerline points");
    if (!(half_width > 0.0)) throw ConfigError("corridor half_width must be positive");
  }

  std::size_t segments() const { return centerline.size() - 1; }

  Vec2 direction(std::size_t seg) const {
    const Vec2 d = centerline[seg + 1] - centerline[seg];
    const double n = norm(d);
    return n > 0.0 ? d * (1.0 / n) : Vec2{1.0, 0.0};
  }

  std::vector<double> arc_lengths() const {
    std::vector<double> s(centerline.size(), 0.0);
    for (std::size_t i = 1; i < centerline.size(); ++i) s[i] = s[i - 1] + norm(centerline[i] - centerline[i - 1]);
    return s;
  }

  CorridorProjection project(Vec2 p) const {
    CorridorProjection best;
    best.distance = std::numeric_limits<double>::infinity();
    double s0 = 0.0;
    for (std::size_t i = 0; i + 1 < centerline.size(); ++i) {
      const Vec2 a = centerline[i];
      const Vec2 ab = centerline[i + 1] - a;
      const double len2 = dot(ab, ab);
      const double len = std::sqrt(len2);
      const double u = len2 > 0.0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
      const Vec2 c = a + ab * u;
      const double d = norm(p - c);
      if (d < best.distance) {
        best.distance = d;
        best.s = s0 + u * len;
        best.point = c;
        best.tangent = direction(i);
        best.lateral = cross(best.tangent, p - c) >= 0.0 ? d : -d;
        best.segment = i;
      }
      s0 += len;
    }
    return best;
  }

  double distance_to_centerline(Vec2 p) const { return project(p).distance; }
  bool contains(Vec2 p) const { return distance_to_centerline(p) <= half_width; }

  /// Centerline point and unit tangent at arc length s (clamped to the ends).
  Pose pose_at(double s) const {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < centerline.size(); ++i) {
      const double len = norm(centerline[i + 1] - centerline[i]);
      if (s <= acc + len || i + 2 == centerline.size()) {
        const double u = len > 0.0 ? std::clamp((s - acc) / len, 0.0, 1.0) : 0.0;
        const Vec2 dir = direction(i);
        return {centerline[i] + (centerline[i + 1] - centerline[i]) * u, std::atan2(dir.y, dir.x)};
      }
      acc += len;
    }
    return {centerline.back(), 0.0};
  }
};

/// Piecewise-linear agent motion: linear interpolation between knots,
/// constant-velocity extrapolation outside them.
struct AgentTrack {
  double radius = 1.0;
  std::vector<double> times;
  std::vector<Vec2> points;

  void validate() const {
    if (!(radius > 0.0)) throw ConfigError("agent radius must be positive");
    if (times.empty() || times.size() != points.size()) throw ConfigError("agent track needs matching knots");
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (!(times[i] > times[i - 1])) throw ConfigError("agent knot times must increase");
    }
  }

  Vec2 velocity(double t) const {
    if (times.size() < 2) return {};
    std::size_t i = segment_index(t);
    return (points[i + 1] - points[i]) * (1.0 / (times[i + 1] - times[i]));
  }

  Vec2 position(double t) const {
    if (times.size() < 2) return points.front();
    const std::size_t i = segment_index(t);
    const double u = (t - times[i]) / (times[i + 1] - times[i]);
    return points[i] + (points[i + 1] - points[i]) * u;
  }

 private:
  std::size_t segment_index(double t) const {
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    std::size_t i = it == times.begin() ? 0 : static_cast<std::size_t>(it - times.begin()) - 1;
    return std::min(i, times.size() - 2);
  }
};

struct EgoState {
  double velocity = 0.0;
  double acceleration = 0.0;
  Vec2 position;
  double heading = 0.0;

  EgoFrame frame() const { return {position, heading}; }
};

enum class Instruction { straight, left, right, stop };
enum class Difficulty { easy, hard };

inline const char* to_string(Instruction i) {
  switch (i) {
    case Instruction::straight: return "straight";
    case Instruction::left: return "left";
    case Instruction::right: return "right";
    case Instruction::stop: return "stop";
  }
  return "straight";
}

inline Instruction instruction_from_string(const std::string& s) {
  if (s == "straight") return Instruction::straight;
  if (s == "left") return Instruction::left;
  if (s == "right") return Instruction::right;
  if (s == "stop") return Instruction::stop;
  throw FormatError("unknown instruction '" + s + "'");
}

inline const char* to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "hard"; }

inline Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "hard") return Difficulty::hard;
  throw FormatError("unknown difficulty '" + s + "'");
}

/// One micro-world scenario observed at t = 0.
struct SceneRecord {
  std::int64_t scene_id = 0;
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::easy;
  DrivableCorridor corridor;
  std::vector<AgentTrack> agents;
  EgoState ego;
  std::array<Pose, kHistorySteps> history{};  // t = -0.5 s, -1.0 s, ... world frame
  Instruction instruction = Instruction::straight;
  Trajectory gt_trajectory;
  Vec2 goal;  // route goal marker, world frame
  double duration = 6.0;
};

// ---------------------------------------------------------------------------
// Motion helpers
// ---------------------------------------------------------------------------

inline constexpr double kEgoRadius = 1.0;

/// Ego-frame position at time t in [0, 3] s: linear interpolation through the
/// origin and the waypoints.
inline Vec2 trajectory_point(const Trajectory& traj, double t) {
  const double k = std::clamp(t / kWaypointDt, 0.0, static_cast<double>(kHorizonSteps));
  const int i = std::min(static_cast<int>(std::floor(k)), kHorizonSteps - 1);
  const double u = k - i;
  const Vec2 a = i == 0 ? Vec2{} : traj.waypoints[static_cast<std::size_t>(i - 1)];
  const Vec2 b = traj.waypoints[static_cast<std::size_t>(i)];
  return a + (b - a) * u;
}

/// Minimum distance over u in [0,1] between a0 + u*(a1-a0) and b0 + u*(b1-b0).
inline double closest_approach(Vec2 a0, Vec2 a1, Vec2 b0, Vec2 b1) {
  const Vec2 r0 = a0 - b0;
  const Vec2 dr = (a1 - a0) - (b1 - b0);
  const double dd = dot(dr, dr);
  double u = 0.0;
  if (dd > 0.0) u = std::clamp(-dot(r0, dr) / dd, 0.0, 1.0);
  return norm(r0 + dr * u);
}

/// Horizontal extent of the raster / oracle view in the ego frame.
struct ViewGrid {
  static constexpr int kSize = 64;
  static constexpr double kResolution = 0.5;  // meters per cell
  static constexpr int kEgoRow = 48;
  static constexpr int kEgoCol = 32;

  static Vec2 cell_center(int row, int col) {
    return {(col - kEgoCol) * kResolution, (kEgoRow - row) * kResolution};
  }
};

}  // namespace lastlab
