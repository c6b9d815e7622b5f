#pragma once

// Interleaved sequence layout and the structured causal attention mask.
//
// Order: TXT (prompt) | IMG (patch slots) | WM block | GEO block | ACT.
// The WM block is <latent_start_wm>, 3 x K_wm slots, <latent_end_wm>; GEO is
// <latent_start_3d>, K_3d slots, <latent_end_3d>. Tags carry the label of the
// segment they bracket. Prompt text precedes the image so that discrete
// prompt states never summarise pixels for the action tokens.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "lastlab/autograd.hpp"
#include "lastlab/errors.hpp"
#include "lastlab/tokenizer.hpp"

namespace lastlab {

enum class Segment : std::uint8_t { txt, img, wm, geo, act };

enum class MaskPhase { phase1, phase2_and_rl };
enum class MaskMode { structured, standard };

struct MaskRule {
  MaskPhase phase = MaskPhase::phase2_and_rl;
  MaskMode mode = MaskMode::structured;
};

struct LayoutConfig {
  int n_patches = 64;
  int k_wm = 12;
  int wm_groups = 3;
  int k_3d = 12;
  bool latent = true;     // false: prompt -> image -> answer, no latent blocks
  int max_answer = 96;    // sampled answer tokens before </answer> is forced
  int max_prompt = 51;    // longest prompt; shorter ones are right-aligned in position ids
};

struct SequenceLayout {
  int txt_len = 0;
  int img_begin = 0;
  int img_len = 0;
  int wm_begin = 0;  // <latent_start_wm>
  int wm_len = 0;    // including both tags
  int geo_begin = 0;
  int geo_len = 0;
  int act_begin = 0;  // <answer>
  int k_wm = 0;
  int wm_groups = 0;
  int k_3d = 0;
  bool latent = true;
  int max_answer = 96;
  int pos_offset = 0;  // position id of token i is i + pos_offset

  int n_wm_slots() const { return latent ? k_wm * wm_groups : 0; }
  int n_geo_slots() const { return latent ? k_3d : 0; }
  int wm_slot_begin() const { return wm_begin + 1; }
  int geo_slot_begin() const { return geo_begin + 1; }
  /// Longest sequence generate() can produce.
  int max_length() const { return act_begin + max_answer + 2; }
  /// Position ids consumed by the longest sequence.
  int max_position_ids() const { return pos_offset + max_length(); }

  Segment segment_at(int pos) const {
    if (pos < txt_len) return Segment::txt;
    if (pos < img_begin + img_len) return Segment::img;
    if (latent && pos < geo_begin) return Segment::wm;
    if (latent && pos < act_begin) return Segment::geo;
    return Segment::act;
  }

  bool is_slot(int pos) const {
    return latent && ((pos >= wm_slot_begin() && pos < wm_slot_begin() + n_wm_slots()) ||
                      (pos >= geo_slot_begin() && pos < geo_slot_begin() + n_geo_slots()));
  }

  /// Index into the learned slot table (WM slots first, then GEO).
  int slot_index(int pos) const {
    if (pos >= geo_slot_begin()) return n_wm_slots() + (pos - geo_slot_begin());
    return pos - wm_slot_begin();
  }
};

inline SequenceLayout make_layout(int prompt_len, const LayoutConfig& cfg) {
  if (prompt_len < 1) throw ConfigError("layout: empty prompt");
  if (cfg.n_patches < 1) throw ConfigError("layout: n_patches must be positive");
  if (cfg.latent && (cfg.k_wm < 1 || cfg.k_3d < 1 || cfg.wm_groups < 1)) {
    throw ConfigError("layout: latent slot counts must be positive");
  }
  if (cfg.max_answer < 1) throw ConfigError("layout: max_answer must be positive");
  if (prompt_len > cfg.max_prompt) throw ConfigError("layout: prompt longer than max_prompt");
  SequenceLayout l;
  l.pos_offset = cfg.max_prompt - prompt_len;
  l.txt_len = prompt_len;
  l.img_begin = prompt_len;
  l.img_len = cfg.n_patches;
  l.latent = cfg.latent;
  l.k_wm = cfg.k_wm;
  l.wm_groups = cfg.wm_groups;
  l.k_3d = cfg.k_3d;
  l.max_answer = cfg.max_answer;
  l.wm_begin = l.img_begin + l.img_len;
  l.wm_len = cfg.latent ? cfg.k_wm * cfg.wm_groups + 2 : 0;
  l.geo_begin = l.wm_begin + l.wm_len;
  l.geo_len = cfg.latent ? cfg.k_3d + 2 : 0;
  l.act_begin = l.geo_begin + l.geo_len;
  return l;
}

/// Token ids per position plus segment labels. Image positions hold <pad>
/// and latent slots hold <latent>; their inputs come from patches and the
/// slot table respectively.
struct TokenSequence {
  SequenceLayout layout;
  std::vector<int> tokens;

  int size() const { return static_cast<int>(tokens.size()); }
  std::span<const int> answer() const {
    return std::span<const int>(tokens).subspan(static_cast<std::size_t>(layout.act_begin));
  }
};

/// Answer fields: x and y of each waypoint.
inline constexpr int kAnswerFields = 2 * kHorizonSteps;

/// Field being written after `token`, given the field before it. Separators
/// advance the field; the count saturates at the last one.
inline int next_answer_field(int field, int token) {
  return (token == tok::comma || token == tok::semicolon) ? std::min(field + 1, kAnswerFields - 1) : field;
}

/// Deterministic part of every sequence: prompt, image, latent blocks, <answer>.
inline TokenSequence sequence_prefix(std::span<const int> prompt, const LayoutConfig& cfg) {
  TokenSequence s;
  s.layout = make_layout(static_cast<int>(prompt.size()), cfg);
  s.tokens.assign(prompt.begin(), prompt.end());
  s.tokens.insert(s.tokens.end(), static_cast<std::size_t>(cfg.n_patches), tok::pad);
  if (cfg.latent) {
    s.tokens.push_back(tok::wm_start);
    s.tokens.insert(s.tokens.end(), static_cast<std::size_t>(s.layout.n_wm_slots()), tok::latent);
    s.tokens.push_back(tok::wm_end);
    s.tokens.push_back(tok::geo_start);
    s.tokens.insert(s.tokens.end(), static_cast<std::size_t>(s.layout.n_geo_slots()), tok::latent);
    s.tokens.push_back(tok::geo_end);
  }
  s.tokens.push_back(tok::answer_start);
  return s;
}

/// Full teacher-forcing sequence; `answer` is a serialized trajectory
/// including both answer tags.
inline TokenSequence build_sequence(std::span<const int> prompt, std::span<const int> answer,
                                    const LayoutConfig& cfg) {
  if (answer.empty() || answer.front() != tok::answer_start) throw ConfigError("answer must start with <answer>");
  TokenSequence s = sequence_prefix(prompt, cfg);
  s.tokens.insert(s.tokens.end(), answer.begin() + 1, answer.end());
  return s;
}

/// Whether a query in segment q may see a key in segment k, causality aside.
inline bool segment_visible(const SequenceLayout& layout, const MaskRule& rule, Segment q, Segment k) {
  if (rule.mode == MaskMode::standard || !layout.latent) return true;
  if ((q == Segment::wm && k == Segment::geo) || (q == Segment::geo && k == Segment::wm)) return false;
  if (rule.phase == MaskPhase::phase1 && q == Segment::act && k == Segment::img) return false;
  return true;
}

/// L x L allow matrix: causal base narrowed by the structured rules. Without
/// latent blocks there is no alternative path, so only causality applies.
inline BoolMatrix build_mask(const SequenceLayout& layout, int length, const MaskRule& rule) {
  BoolMatrix allow = BoolMatrix::Constant(length, length, false);
  std::vector<Segment> seg(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) seg[static_cast<std::size_t>(i)] = layout.segment_at(i);
  for (int q = 0; q < length; ++q) {
    for (int k = 0; k <= q; ++k) {
      allow(q, k) = segment_visible(layout, rule, seg[static_cast<std::size_t>(q)], seg[static_cast<std::size_t>(k)]);
    }
  }
  return allow;
}

inline BoolMatrix build_mask(const TokenSequence& seq, const MaskRule& rule) {
  return build_mask(seq.layout, seq.size(), rule);
}

inline const char* to_string(MaskPhase p) { return p == MaskPhase::phase1 ? "phase1" : "phase2_and_rl"; }
inline const char* to_string(MaskMode m) { return m == MaskMode::structured ? "structured" : "standard"; }

}  // namespace lastlab
