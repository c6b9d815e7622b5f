#pragma once

// Fixed vocabulary, waypoint text grammar and structural-format checks.
//
// Answer grammar (one token per character):
//   <answer> pair (';' pair){5} </answer>
//   pair   := number ',' number
//   number := '-'? ('0' | [1-9][0-9]?) '.' [0-9]

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lastlab/errors.hpp"
#include "lastlab/scene.hpp"

namespace lastlab {

namespace tok {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int digit0 = 3;
inline constexpr int minus = 13;
inline constexpr int dot = 14;
inline constexpr int comma = 15;
inline constexpr int semicolon = 16;
inline constexpr int wm_start = 17;
inline constexpr int wm_end = 18;
inline constexpr int geo_start = 19;
inline constexpr int geo_end = 20;
inline constexpr int answer_start = 21;
inline constexpr int answer_end = 22;
inline constexpr int latent = 23;
inline constexpr int instruction0 = 24;
inline constexpr int speed0 = 28;
inline constexpr int accel0 = 44;
inline constexpr int kBuckets = 16;
inline constexpr int kVocabSize = 60;
}  // namespace tok

inline constexpr const char* kVocabFormat = "lastlab-vocab-v1";

class Vocabulary {
 public:
  static const Vocabulary& instance() {
    static const Vocabulary v;
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  int id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    if (it == index_.end()) throw FormatError("unknown token '" + std::string(token) + "'");
    return it->second;
  }

  std::string render(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) out += token(i);
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write vocabulary to " + path);
    f << "# " << kVocabFormat << '\n';
    for (const auto& t : tokens_) f << t << '\n';
  }

 private:
  Vocabulary() {
    tokens_ = {"<pad>", "<bos>", "<eos>"};
    for (char c = '0'; c <= '9'; ++c) tokens_.emplace_back(1, c);
    for (const char* s : {"-", ".", ",", ";", "<latent_start_wm>", "<latent_end_wm>", "<latent_start_3d>",
                          "<latent_end_3d>", "<answer>", "</answer>", "<latent>", "straight", "left", "right", "stop"}) {
      tokens_.emplace_back(s);
    }
    for (int i = 0; i < tok::kBuckets; ++i) tokens_.push_back("<v" + std::to_string(i) + ">");
    for (int i = 0; i < tok::kBuckets; ++i) tokens_.push_back("<a" + std::to_string(i) + ">");
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline int instruction_token(Instruction i) { return tok::instruction0 + static_cast<int>(i); }

/// 1 m/s buckets over [0, 16).
inline int speed_token(double v) {
  return tok::speed0 + std::clamp(static_cast<int>(std::floor(v)), 0, tok::kBuckets - 1);
}

/// 0.5 m/s^2 buckets over [-4, 4).
inline int accel_token(double a) {
  return tok::accel0 + std::clamp(static_cast<int>(std::floor((a + 4.0) / 0.5)), 0, tok::kBuckets - 1);
}

/// Round v to a multiple of 0.1, ties to even (on the decimal value).
inline std::int64_t quantize_tenths(double v) {
  const double q = v * 10.0;
  const double f = std::floor(q);
  const double frac = q - f;
  const auto fi = static_cast<std::int64_t>(f);
  if (std::abs(frac - 0.5) < 1e-9) return (fi % 2 == 0) ? fi : fi + 1;
  return frac < 0.5 ? fi : fi + 1;
}

inline Trajectory quantize(const Trajectory& t) {
  Trajectory q;
  for (std::size_t i = 0; i < t.waypoints.size(); ++i) {
    q.waypoints[i] = {quantize_tenths(t.waypoints[i].x) / 10.0, quantize_tenths(t.waypoints[i].y) / 10.0};
  }
  return q;
}

inline void append_tenths(std::vector<int>& out, std::int64_t tenths) {
  if (tenths < 0) {
    out.push_back(tok::minus);
    tenths = -tenths;
  }
  const std::string whole = std::to_string(tenths / 10);
  for (char c : whole) out.push_back(tok::digit0 + (c - '0'));
  out.push_back(tok::dot);
  out.push_back(tok::digit0 + static_cast<int>(tenths % 10));
}

/// Comma/semicolon separated "x,y" pairs without the answer tags.
inline std::vector<int> serialize_points(std::span<const Vec2> pts) {
  std::vector<int> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i > 0) out.push_back(tok::semicolon);
    append_tenths(out, quantize_tenths(pts[i].x));
    out.push_back(tok::comma);
    append_tenths(out, quantize_tenths(pts[i].y));
  }
  return out;
}

inline std::vector<int> serialize_trajectory(const Trajectory& traj) {
  for (const auto& w : traj.waypoints) {
    if (!std::isfinite(w.x) || !std::isfinite(w.y) || std::abs(w.x) > kTrajectoryLimit ||
        std::abs(w.y) > kTrajectoryLimit) {
      throw EncodingError("waypoint coordinate outside [-32, 32] m");
    }
  }
  std::vector<int> out{tok::answer_start};
  const auto body = serialize_points(traj.waypoints);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(tok::answer_end);
  return out;
}

enum class ParseStatus { ok, tag_error, syntax_error };

struct ParseOutcome {
  ParseStatus status = ParseStatus::tag_error;
  Trajectory trajectory;
  bool ok() const { return status == ParseStatus::ok; }
};

namespace detail {

inline bool is_digit(int t) { return t >= tok::digit0 && t < tok::digit0 + 10; }

/// Parses one number starting at pos; returns tenths or nullopt on mismatch.
inline std::optional<std::int64_t> parse_number(std::span<const int> toks, std::size_t& pos) {
  bool neg = false;
  if (pos < toks.size() && toks[pos] == tok::minus) {
    neg = true;
    ++pos;
  }
  std::int64_t whole = 0;
  int n_digits = 0;
  const std::size_t first = pos;
  while (pos < toks.size() && is_digit(toks[pos])) {
    whole = whole * 10 + (toks[pos] - tok::digit0);
    ++n_digits;
    ++pos;
  }
  if (n_digits == 0 || n_digits > 2) return std::nullopt;
  if (n_digits == 2 && toks[first] == tok::digit0) return std::nullopt;
  if (pos >= toks.size() || toks[pos] != tok::dot) return std::nullopt;
  ++pos;
  if (pos >= toks.size() || !is_digit(toks[pos])) return std::nullopt;
  const std::int64_t tenths = whole * 10 + (toks[pos] - tok::digit0);
  ++pos;
  if (tenths > static_cast<std::int64_t>(kTrajectoryLimit * 10)) return std::nullopt;
  return neg ? -tenths : tenths;
}

}  // namespace detail

/// Non-throwing parse used by the format reward.
inline ParseOutcome try_parse_trajectory(std::span<const int> toks) {
  ParseOutcome r;
  const auto open = std::find(toks.begin(), toks.end(), tok::answer_start);
  if (open == toks.end()) return r;
  const auto close = std::find(open + 1, toks.end(), tok::answer_end);
  if (close == toks.end()) return r;
  const std::span<const int> body(&*open + 1, static_cast<std::size_t>(close - open - 1));
  r.status = ParseStatus::syntax_error;
  std::size_t pos = 0;
  for (int i = 0; i < kHorizonSteps; ++i) {
    if (i > 0) {
      if (pos >= body.size() || body[pos] != tok::semicolon) return r;
      ++pos;
    }
    const auto x = detail::parse_number(body, pos);
    if (!x) return r;
    if (pos >= body.size() || body[pos] != tok::comma) return r;
    ++pos;
    const auto y = detail::parse_number(body, pos);
    if (!y) return r;
    r.trajectory.waypoints[static_cast<std::size_t>(i)] = {*x / 10.0, *y / 10.0};
  }
  if (pos != body.size()) return r;
  r.status = ParseStatus::ok;
  return r;
}

inline Trajectory parse_trajectory(std::span<const int> toks) {
  const auto r = try_parse_trajectory(toks);
  if (r.status == ParseStatus::tag_error) throw TagError("missing or misplaced <answer>...</answer> tags");
  if (r.status == ParseStatus::syntax_error) throw SyntaxError("answer does not match the waypoint grammar");
  return r.trajectory;
}

struct FormatCheck {
  bool tags_ok = false;
  bool syntax_ok = false;
};

/// Tag order for latent-reasoning outputs; without latent segments only the
/// answer pair is required.
inline FormatCheck validate_format(std::span<const int> toks, bool latent_tags = true) {
  static constexpr std::array<int, 6> kLatentOrder{tok::wm_start, tok::wm_end, tok::geo_start,
                                                   tok::geo_end, tok::answer_start, tok::answer_end};
  static constexpr std::array<int, 2> kAnswerOrder{tok::answer_start, tok::answer_end};
  const std::span<const int> order = latent_tags ? std::span<const int>(kLatentOrder) : std::span<const int>(kAnswerOrder);
  FormatCheck fc;
  fc.tags_ok = true;
  std::ptrdiff_t last = -1;
  for (int tag : order) {
    const auto n = std::count(toks.begin(), toks.end(), tag);
    if (n != 1) {
      fc.tags_ok = false;
      break;
    }
    const auto at = std::find(toks.begin(), toks.end(), tag) - toks.begin();
    if (at <= last) {
      fc.tags_ok = false;
      break;
    }
    last = at;
  }
  fc.syntax_ok = try_parse_trajectory(toks).ok();
  return fc;
}

/// Tokens the decoder may emit inside the answer segment.
inline std::vector<bool> answer_alphabet() {
  std::vector<bool> allowed(tok::kVocabSize, false);
  for (int d = 0; d < 10; ++d) allowed[tok::digit0 + d] = true;
  for (int t : {tok::minus, tok::dot, tok::comma, tok::semicolon, tok::answer_end}) allowed[static_cast<std::size_t>(t)] = true;
  return allowed;
}

/// Prompt: <bos> instruction speed accel history-text. History is rendered
/// newest first in the current ego frame.
inline std::vector<int> prompt_tokens(const SceneRecord& scene) {
  std::vector<int> out{tok::bos, instruction_token(scene.instruction), speed_token(scene.ego.velocity),
                       accel_token(scene.ego.acceleration)};
  const EgoFrame frame = scene.ego.frame();
  std::array<Vec2, kHistorySteps> pts{};
  for (int k = 0; k < kHistorySteps; ++k) {
    Vec2 p = frame.to_local(scene.history[static_cast<std::size_t>(k)].position);
    p.x = std::clamp(p.x, -kTrajectoryLimit, kTrajectoryLimit);
    p.y = std::clamp(p.y, -kTrajectoryLimit, kTrajectoryLimit);
    pts[static_cast<std::size_t>(k)] = p;
  }
  const auto hist = serialize_points(pts);
  out.insert(out.end(), hist.begin(), hist.end());
  return out;
}

}  // namespace lastlab
