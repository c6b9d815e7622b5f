#pragma once

// Flat key=value run configuration with typed validation, a canonical text
// form and its FNV-1a hash. run_dir is a location, not a setting, so it is
// excluded from both.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lastlab/grpo.hpp"
#include "lastlab/sft.hpp"

namespace lastlab {

inline constexpr const char* kConfigFormat = "lastlab-config-v1";

enum class Reasoning { latent, none };

struct DataConfig {
  int n_hard = 200;  // smoke set: phase I data, RL scenes
  int n_easy = 200;  // added to the hard scenes for phase II
  int n_eval = 200;  // held-out hard scenes
  std::uint64_t train_seed = 1000;
  std::uint64_t eval_seed = 100000;
};

struct SftSchedule {
  long phase1_steps = 300;
  long phase2_steps = 1500;
  double learning_rate = 3e-4;
  int batch_size = 2;
  int grad_accum = 4;
  double grad_clip = 1.0;
  double mask_ratio = 0.5;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string run_dir;
  Reasoning reasoning = Reasoning::latent;
  bool latent_supervision = true;
  MaskMode mask = MaskMode::structured;
  DataConfig data;
  ModelConfig model;
  SftSchedule sft;
  GrpoConfig rl;
  MetricConfig metrics;

  /// Model shapes with the reasoning mode applied and position ids sized to
  /// the longest sequence.
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.policy.layout.latent = reasoning == Reasoning::latent;
    m.policy.max_positions = make_layout(m.policy.layout.max_prompt, m.policy.layout).max_position_ids();
    return m;
  }

  SftConfig sft_config(int phase) const {
    SftConfig c;
    c.phase = phase;
    c.steps = phase == 1 ? sft.phase1_steps : sft.phase2_steps;
    c.learning_rate = sft.learning_rate;
    c.batch_size = sft.batch_size;
    c.grad_accum = sft.grad_accum;
    c.grad_clip = sft.grad_clip;
    c.mask_ratio = sft.mask_ratio;
    c.latent_supervision = latent_supervision && reasoning == Reasoning::latent;
    c.mask = mask;
    c.seed = seed;
    return c;
  }

  GrpoConfig rl_config() const {
    GrpoConfig c = rl;
    c.mask = mask;
    c.seed = seed;
    return c;
  }

  MaskRule eval_rule() const { return {MaskPhase::phase2_and_rl, mask}; }
};

namespace detail {

inline std::string real_text(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_real(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("expected a number");
  return v;
}

template <typename I>
I parse_integer(const std::string& s) {
  I v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("expected an integer");
  return v;
}

inline bool parse_switch(const std::string& s) {
  if (s == "on" || s == "true") return true;
  if (s == "off" || s == "false") return false;
  throw std::invalid_argument("expected on or off");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string tiers_text(const GoalTiers& t) {
  std::string s;
  for (std::size_t i = 0; i < t.dist.size(); ++i) s += (i ? "," : "") + real_text(t.dist[i]) + ":" + real_text(t.reward[i]);
  return s;
}

inline GoalTiers parse_tiers(const std::string& s) {
  GoalTiers t;
  const auto parts = split(s, ',');
  if (parts.size() != t.dist.size()) throw std::invalid_argument("expected three dist:reward pairs");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto kv = split(parts[i], ':');
    if (kv.size() != 2) throw std::invalid_argument("expected dist:reward");
    t.dist[i] = parse_real(trim(kv[0]));
    t.reward[i] = parse_real(trim(kv[1]));
  }
  return t;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename I>
Field integer(std::string key, std::function<I&(RunConfig&)> ref) {
  return {std::move(key), [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& v) { ref(c) = parse_integer<I>(v); }};
}

inline Field real(std::string key, std::function<double&(RunConfig&)> ref) {
  return {std::move(key), [ref](const RunConfig& c) { return real_text(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& v) { ref(c) = parse_real(v); }};
}

}  // namespace detail

inline const char* to_string(Reasoning r) { return r == Reasoning::latent ? "latent" : "none"; }

/// Every settable key, in canonical (sorted) order.
inline const std::vector<detail::Field>& config_fields() {
  using detail::Field;
  using detail::integer;
  using detail::real;
  static const std::vector<Field> fields = [] {
    std::vector<Field> f{
        integer<int>("data.n_easy", [](RunConfig& c) -> int& { return c.data.n_easy; }),
        integer<int>("data.n_eval", [](RunConfig& c) -> int& { return c.data.n_eval; }),
        integer<int>("data.n_hard", [](RunConfig& c) -> int& { return c.data.n_hard; }),
        integer<std::uint64_t>("data.train_seed", [](RunConfig& c) -> std::uint64_t& { return c.data.train_seed; }),
        integer<std::uint64_t>("data.eval_seed", [](RunConfig& c) -> std::uint64_t& { return c.data.eval_seed; }),
        real("metrics.ec_tolerance", [](RunConfig& c) -> double& { return c.metrics.ec_tolerance; }),
        real("metrics.max_accel", [](RunConfig& c) -> double& { return c.metrics.max_accel; }),
        real("metrics.max_jerk", [](RunConfig& c) -> double& { return c.metrics.max_jerk; }),
        real("metrics.reverse_tolerance", [](RunConfig& c) -> double& { return c.metrics.reverse_tolerance; }),
        real("metrics.step", [](RunConfig& c) -> double& { return c.metrics.step; }),
        real("metrics.ttc_horizon", [](RunConfig& c) -> double& { return c.metrics.ttc_horizon; }),
        {"mode.latent_supervision", [](const RunConfig& c) { return std::string(c.latent_supervision ? "on" : "off"); },
         [](RunConfig& c, const std::string& v) { c.latent_supervision = detail::parse_switch(v); }},
        {"mode.mask", [](const RunConfig& c) { return std::string(to_string(c.mask)); },
         [](RunConfig& c, const std::string& v) {
           if (v == "structured") c.mask = MaskMode::structured;
           else if (v == "standard") c.mask = MaskMode::standard;
           else throw std::invalid_argument("expected structured or standard");
         }},
        {"mode.reasoning", [](const RunConfig& c) { return std::string(to_string(c.reasoning)); },
         [](RunConfig& c, const std::string& v) {
           if (v == "latent") c.reasoning = Reasoning::latent;
           else if (v == "none") c.reasoning = Reasoning::none;
           else throw std::invalid_argument("expected latent or none");
         }},
        integer<int>("model.adapter_heads", [](RunConfig& c) -> int& { return c.model.adapter_heads; }),
        integer<int>("model.adapter_hidden", [](RunConfig& c) -> int& { return c.model.adapter_hidden; }),
        integer<int>("model.d_model", [](RunConfig& c) -> int& { return c.model.policy.d_model; }),
        integer<int>("model.feature_dim", [](RunConfig& c) -> int& { return c.model.feature_dim; }),
        real("model.init_scale", [](RunConfig& c) -> double& { return c.model.policy.init_scale; }),
        integer<int>("model.k_3d", [](RunConfig& c) -> int& { return c.model.policy.layout.k_3d; }),
        integer<int>("model.k_wm", [](RunConfig& c) -> int& { return c.model.policy.layout.k_wm; }),
        integer<int>("model.max_answer", [](RunConfig& c) -> int& { return c.model.policy.layout.max_answer; }),
        integer<int>("model.mlp_ratio", [](RunConfig& c) -> int& { return c.model.policy.mlp_ratio; }),
        integer<int>("model.n_heads", [](RunConfig& c) -> int& { return c.model.policy.n_heads; }),
        integer<int>("model.n_layers", [](RunConfig& c) -> int& { return c.model.policy.n_layers; }),
        real("rl.clip_eps", [](RunConfig& c) -> double& { return c.rl.clip_eps; }),
        {"rl.goal_tiers", [](const RunConfig& c) { return detail::tiers_text(c.rl.tiers); },
         [](RunConfig& c, const std::string& v) { c.rl.tiers = detail::parse_tiers(v); }},
        real("rl.grad_clip", [](RunConfig& c) -> double& { return c.rl.grad_clip; }),
        {"rl.grammar_forcing", [](const RunConfig& c) { return std::string(c.rl.grammar_forcing ? "on" : "off"); },
         [](RunConfig& c, const std::string& v) { c.rl.grammar_forcing = detail::parse_switch(v); }},
        integer<int>("rl.group_size", [](RunConfig& c) -> int& { return c.rl.group_size; }),
        integer<int>("rl.iterations", [](RunConfig& c) -> int& { return c.rl.iterations; }),
        real("rl.kl_beta", [](RunConfig& c) -> double& { return c.rl.kl_beta; }),
        real("rl.learning_rate", [](RunConfig& c) -> double& { return c.rl.learning_rate; }),
        integer<int>("rl.probe_interval", [](RunConfig& c) -> int& { return c.rl.probe_interval; }),
        integer<int>("rl.probe_size", [](RunConfig& c) -> int& { return c.rl.probe_size; }),
        integer<int>("rl.reuse", [](RunConfig& c) -> int& { return c.rl.reuse; }),
        real("rl.reward_fmt", [](RunConfig& c) -> double& { return c.rl.weights.fmt; }),
        real("rl.reward_goal", [](RunConfig& c) -> double& { return c.rl.weights.goal; }),
        real("rl.reward_traj", [](RunConfig& c) -> double& { return c.rl.weights.traj; }),
        integer<int>("rl.scenes_per_iteration", [](RunConfig& c) -> int& { return c.rl.scenes_per_iteration; }),
        real("rl.temperature", [](RunConfig& c) -> double& { return c.rl.temperature; }),
        integer<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }),
        integer<int>("sft.batch_size", [](RunConfig& c) -> int& { return c.sft.batch_size; }),
        integer<int>("sft.grad_accum", [](RunConfig& c) -> int& { return c.sft.grad_accum; }),
        real("sft.grad_clip", [](RunConfig& c) -> double& { return c.sft.grad_clip; }),
        real("sft.learning_rate", [](RunConfig& c) -> double& { return c.sft.learning_rate; }),
        real("sft.mask_ratio", [](RunConfig& c) -> double& { return c.sft.mask_ratio; }),
        integer<long>("sft.phase1_steps", [](RunConfig& c) -> long& { return c.sft.phase1_steps; }),
        integer<long>("sft.phase2_steps", [](RunConfig& c) -> long& { return c.sft.phase2_steps; }),
    };
    std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return f;
  }();
  return fields;
}

/// Field-level range checks; an empty list means the config is usable.
inline std::vector<std::pair<std::string, std::string>> config_problems(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> p;
  auto need = [&](bool ok, const char* key, const char* msg) {
    if (!ok) p.emplace_back(key, msg);
  };
  need(c.data.n_hard >= 0, "data.n_hard", "must be >= 0");
  need(c.data.n_easy >= 0, "data.n_easy", "must be >= 0");
  need(c.data.n_eval >= 0, "data.n_eval", "must be >= 0");
  need(c.model.policy.d_model >= 1, "model.d_model", "must be positive");
  need(c.model.policy.n_heads >= 1 && c.model.policy.d_model % std::max(c.model.policy.n_heads, 1) == 0,
       "model.n_heads", "must divide model.d_model");
  need(c.model.adapter_heads >= 1 && c.model.policy.d_model % std::max(c.model.adapter_heads, 1) == 0,
       "model.adapter_heads", "must divide model.d_model");
  need(c.model.policy.n_layers >= 1, "model.n_layers", "must be positive");
  need(c.model.policy.mlp_ratio >= 1, "model.mlp_ratio", "must be positive");
  need(c.model.adapter_hidden >= 1, "model.adapter_hidden", "must be positive");
  need(c.model.feature_dim >= 1, "model.feature_dim", "must be positive");
  need(c.model.policy.init_scale > 0.0, "model.init_scale", "must be positive");
  need(c.model.policy.layout.k_3d >= 1 && c.model.policy.layout.k_3d <= 64, "model.k_3d", "must lie in [1, 64]");
  need(c.model.policy.layout.k_wm >= 1 && c.model.policy.layout.k_wm <= 64, "model.k_wm", "must lie in [1, 64]");
  need(c.model.policy.layout.max_answer >= 1, "model.max_answer", "must be positive");
  need(c.sft.phase1_steps >= 0, "sft.phase1_steps", "must be >= 0");
  need(c.sft.phase2_steps >= 0, "sft.phase2_steps", "must be >= 0");
  need(c.sft.learning_rate >= 0.0, "sft.learning_rate", "must be >= 0");
  need(c.sft.batch_size >= 1, "sft.batch_size", "must be positive");
  need(c.sft.grad_accum >= 1, "sft.grad_accum", "must be positive");
  need(c.sft.grad_clip > 0.0, "sft.grad_clip", "must be positive");
  need(c.sft.mask_ratio >= 0.0 && c.sft.mask_ratio < 1.0, "sft.mask_ratio", "must lie in [0, 1)");
  need(c.rl.group_size >= 2, "rl.group_size", "must be >= 2");
  need(c.rl.temperature > 0.0, "rl.temperature", "must be positive");
  need(c.rl.clip_eps > 0.0 && c.rl.clip_eps < 1.0, "rl.clip_eps", "must lie in (0, 1)");
  need(c.rl.kl_beta >= 0.0, "rl.kl_beta", "must be >= 0");
  need(c.rl.learning_rate >= 0.0, "rl.learning_rate", "must be >= 0");
  need(c.rl.grad_clip > 0.0, "rl.grad_clip", "must be positive");
  need(c.rl.iterations >= 0, "rl.iterations", "must be >= 0");
  need(c.rl.scenes_per_iteration >= 1, "rl.scenes_per_iteration", "must be positive");
  need(c.rl.reuse >= 1, "rl.reuse", "must be positive");
  need(c.rl.probe_size >= 0, "rl.probe_size", "must be >= 0");
  need(c.rl.probe_interval >= 1, "rl.probe_interval", "must be positive");
  bool tiers_ok = true;
  for (std::size_t i = 0; i < c.rl.tiers.dist.size(); ++i) {
    if (!(c.rl.tiers.dist[i] >= 0.0) || (i > 0 && c.rl.tiers.dist[i] <= c.rl.tiers.dist[i - 1])) tiers_ok = false;
  }
  need(tiers_ok, "rl.goal_tiers", "distances must be nonnegative and increasing");
  need(c.metrics.step > 0.0, "metrics.step", "must be positive");
  need(c.metrics.ttc_horizon > 0.0, "metrics.ttc_horizon", "must be positive");
  need(c.metrics.max_accel > 0.0, "metrics.max_accel", "must be positive");
  need(c.metrics.max_jerk > 0.0, "metrics.max_jerk", "must be positive");
  need(!(c.reasoning == Reasoning::none && c.latent_supervision), "mode.latent_supervision",
       "must be off when mode.reasoning=none");
  return p;
}

inline void validate(const RunConfig& c) {
  auto p = config_problems(c);
  if (!p.empty()) throw InvalidConfig(std::move(p));
}

/// Applies `key=value` assignments in order, then validates.
inline RunConfig apply_settings(RunConfig c, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::map<std::string, const detail::Field*> by_key;
  for (const auto& f : config_fields()) by_key[f.key] = &f;
  std::vector<std::pair<std::string, std::string>> problems;
  for (const auto& [k, v] : kv) {
    if (k == "run_dir") {
      c.run_dir = v;
      continue;
    }
    const auto it = by_key.find(k);
    if (it == by_key.end()) {
      problems.emplace_back(k, "unknown key");
      continue;
    }
    try {
      it->second->set(c, v);
    } catch (const std::invalid_argument& e) {
      problems.emplace_back(k, e.what() + std::string(", got '") + v + "'");
    }
  }
  if (!problems.empty()) throw InvalidConfig(std::move(problems));
  validate(c);
  return c;
}

/// Splits "key=value" (or "key = value"); blank lines and '#' comments skip.
inline std::vector<std::pair<std::string, std::string>> parse_settings(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::vector<std::pair<std::string, std::string>> problems;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = detail::trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      problems.emplace_back("line " + std::to_string(n), "expected key=value");
      continue;
    }
    out.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  if (!problems.empty()) throw InvalidConfig(std::move(problems));
  return out;
}

inline RunConfig parse_config(const std::string& text) { return apply_settings(RunConfig{}, parse_settings(text)); }

/// Sorted `key=value` lines for every hashed field.
inline std::string canonical_config(const RunConfig& c) {
  std::string s;
  for (const auto& f : config_fields()) s += f.key + "=" + f.get(c) + "\n";
  return s;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_config(c))));
  return buf;
}

/// Config snapshot written into run directories.
inline std::string config_snapshot(const RunConfig& c) {
  return "# format=" + std::string(kConfigFormat) + "\n# config_hash=" + config_hash(c) + "\n" + canonical_config(c);
}

}  // namespace lastlab
