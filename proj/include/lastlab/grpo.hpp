#pragma once

// Group-relative policy optimization over sampled answers: composite reward,
// standardized advantages, clipped surrogate with a per-token KL penalty.
// Only policy parameters are optimized; adapters never enter the graph.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lastlab/io.hpp"
#include "lastlab/metrics.hpp"
#include "lastlab/model.hpp"
#include "lastlab/optim.hpp"

namespace lastlab {

/// Endpoint L1 tiers: reward[i] if distance <= dist[i], scanned in order.
struct GoalTiers {
  std::array<double, 3> dist{0.5, 1.0, 2.0};
  std::array<double, 3> reward{1.0, 0.5, 0.25};
};

struct RewardWeights {
  double traj = 8.0;
  double fmt = 1.0;
  double goal = 1.0;
};

struct RewardBreakdown {
  double r_traj = 0.0;
  double r_fmt = 0.0;
  double r_goal = 0.0;
  double total = 0.0;
  bool parsed = false;
};

inline double goal_reward(Vec2 pred_end, Vec2 gt_end, const GoalTiers& tiers = {}) {
  const double d = std::abs(pred_end.x - gt_end.x) + std::abs(pred_end.y - gt_end.y);
  for (std::size_t i = 0; i < tiers.dist.size(); ++i) {
    if (d <= tiers.dist[i]) return tiers.reward[i];
  }
  return 0.0;
}

inline RewardBreakdown compute_reward(std::span<const int> tokens, const SceneRecord& scene, bool latent_tags = true,
                                      const RewardWeights& w = {}, const GoalTiers& tiers = {}) {
  RewardBreakdown r;
  const FormatCheck fc = validate_format(tokens, latent_tags);
  r.r_fmt = 0.5 * static_cast<double>(fc.tags_ok) + 0.5 * static_cast<double>(fc.syntax_ok);
  const ParseOutcome parsed = try_parse_trajectory(tokens);
  if (parsed.ok()) {
    r.parsed = true;
    r.r_traj = pdms(sub_scores(scene, parsed.trajectory));
    r.r_goal = goal_reward(parsed.trajectory.waypoints.back(), scene.gt_trajectory.waypoints.back(), tiers);
  }
  r.total = w.traj * r.r_traj + w.fmt * r.r_fmt + w.goal * r.r_goal;
  return r;
}

inline RewardBreakdown compute_reward(const TokenSequence& seq, const SceneRecord& scene, const RewardWeights& w = {},
                                      const GoalTiers& tiers = {}) {
  return compute_reward(std::span<const int>(seq.tokens), scene, seq.layout.latent, w, tiers);
}

/// (R - mean) / popstd, or all zeros when the group is degenerate.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ConfigError("group_advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd < 1e-8) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

/// One sequence's contribution: mean clipped surrogate minus beta times the
/// mean k3 KL estimate, with its derivative in each new log-prob.
struct SequenceObjective {
  double value = 0.0;
  double surrogate = 0.0;
  double kl = 0.0;
  double clip_frac = 0.0;
  std::vector<double> grad;
};

inline SequenceObjective sequence_objective(std::span<const double> logp_new, std::span<const double> logp_old,
                                            std::span<const double> logp_ref, double advantage, double eps,
                                            double beta) {
  if (logp_new.empty() || logp_old.size() != logp_new.size() || logp_ref.size() != logp_new.size()) {
    throw ConfigError("grpo_objective: log-prob sequences are misaligned or empty");
  }
  const std::size_t n = logp_new.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  SequenceObjective s;
  s.grad.assign(n, 0.0);
  std::size_t clipped = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double c = std::exp(logp_new[t] - logp_old[t]);
    const double cc = std::clamp(c, 1.0 - eps, 1.0 + eps);
    const double unclipped = c * advantage, clip_term = cc * advantage;
    if (cc != c) ++clipped;
    double dterm = 0.0;
    if (unclipped <= clip_term || cc == c) dterm = c * advantage;
    s.surrogate += std::min(unclipped, clip_term) * inv_n;
    const double rr = std::exp(logp_ref[t] - logp_new[t]);
    s.kl += (rr - (logp_ref[t] - logp_new[t]) - 1.0) * inv_n;
    s.grad[t] = (dterm - beta * (1.0 - rr)) * inv_n;
  }
  s.value = s.surrogate - beta * s.kl;
  s.clip_frac = static_cast<double>(clipped) * inv_n;
  return s;
}

/// Group objective: mean of the sequence objectives.
inline double grpo_objective(const std::vector<std::vector<double>>& logp_new,
                             const std::vector<std::vector<double>>& logp_old,
                             const std::vector<std::vector<double>>& logp_ref, std::span<const double> advantages,
                             double eps, double beta) {
  if (logp_new.empty() || logp_old.size() != logp_new.size() || logp_ref.size() != logp_new.size() ||
      advantages.size() != logp_new.size()) {
    throw ConfigError("grpo_objective: group sizes differ");
  }
  double j = 0.0;
  for (std::size_t i = 0; i < logp_new.size(); ++i) {
    j += sequence_objective(logp_new[i], logp_old[i], logp_ref[i], advantages[i], eps, beta).value;
  }
  return j / static_cast<double>(logp_new.size());
}

/// Tape version over an n x 1 column of new log-probs.
template <typename T>
Var<T> sequence_objective(const Var<T>& logp_new, std::span<const double> logp_old, std::span<const double> logp_ref,
                          double advantage, double eps, double beta, SequenceObjective* stats = nullptr) {
  std::vector<double> v(static_cast<std::size_t>(logp_new.rows()));
  for (std::size_t t = 0; t < v.size(); ++t) v[t] = static_cast<double>(logp_new.value()(static_cast<Eigen::Index>(t), 0));
  SequenceObjective s = sequence_objective(v, logp_old, logp_ref, advantage, eps, beta);
  Matrix<T> jac(logp_new.rows(), 1);
  for (std::size_t t = 0; t < v.size(); ++t) jac(static_cast<Eigen::Index>(t), 0) = static_cast<T>(s.grad[t]);
  const T value = static_cast<T>(s.value);
  if (stats != nullptr) *stats = std::move(s);
  return scalar_with_jacobian(logp_new, value, jac);
}

struct GrpoConfig {
  int group_size = 8;
  double temperature = 2.0;
  double clip_eps = 0.2;
  double kl_beta = 0.1;
  double learning_rate = 3e-5;
  double grad_clip = 1.0;
  int iterations = 100;
  int scenes_per_iteration = 2;
  int reuse = 1;  // optimizer steps per sampling round
  int probe_size = 200;     // leading scenes scored by the probe
  int probe_interval = 10;  // iterations between probes
  MaskMode mask = MaskMode::structured;
  bool grammar_forcing = true;
  RewardWeights weights;
  GoalTiers tiers;
  std::uint64_t seed = 0;

  void validate() const {
    if (group_size < 2) throw ConfigError("rl.group_size must be >= 2");
    if (!(temperature > 0.0)) throw ConfigError("rl.temperature must be positive");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("rl.clip_eps must lie in (0, 1)");
    if (!(kl_beta >= 0.0)) throw ConfigError("rl.kl_beta must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("rl.learning_rate must be >= 0");
    if (iterations < 0 || scenes_per_iteration < 1 || reuse < 1 || probe_size < 0 || probe_interval < 1) {
      throw ConfigError("rl: iterations, scenes_per_iteration, reuse, probe_size and probe_interval out of range");
    }
  }

  MaskRule rule() const { return {MaskPhase::phase2_and_rl, mask}; }
};

struct RlScene {
  SceneRecord scene;
  SceneInputs inputs;
};

inline std::vector<RlScene> make_rl_scenes(std::span<const SceneRecord> scenes) {
  std::vector<RlScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({s, scene_inputs(s)});
  return out;
}

template <typename T>
struct RolloutGroup {
  const RlScene* scene = nullptr;
  std::vector<Generation<T>> rollouts;
  std::vector<RewardBreakdown> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> ref_logprobs;
};

/// G rollouts from one shared prefill of the current parameters.
template <typename T>
RolloutGroup<T> sample_group(const PolicyParams<T>& policy, const RlScene& rs, const GrpoConfig& cfg, Rng& rng) {
  RolloutGroup<T> g;
  g.scene = &rs;
  const TokenSequence prefix = sequence_prefix(rs.inputs.prompt, policy.cfg.layout);
  const Decoder<T> dec(policy, cfg.rule());
  const auto state = dec.prefill(rs.inputs, prefix);
  GenerateOptions opt;
  opt.temperature = cfg.temperature;
  opt.grammar_forcing = cfg.grammar_forcing;
  std::vector<double> totals;
  for (int i = 0; i < cfg.group_size; ++i) {
    g.rollouts.push_back(generate_from(dec, state, prefix, opt, rng));
    g.rewards.push_back(compute_reward(g.rollouts.back().sequence, rs.scene, cfg.weights, cfg.tiers));
    totals.push_back(g.rewards.back().total);
  }
  g.advantages = group_advantages(totals);
  return g;
}

/// Tempered log-probs of a rollout's sampled tokens, recorded on `tape`.
template <typename T>
Var<T> rollout_logprobs(Tape<T>& tape, PolicyParams<T>& policy, const SceneInputs& in, const Generation<T>& g,
                        const GrpoConfig& cfg) {
  auto out = forward(tape, policy, in, g.sequence, cfg.rule());
  std::vector<int> rows, local, ids;
  for (std::size_t t = 0; t < g.sampled_positions.size(); ++t) {
    const int pos = g.sampled_positions[t];
    rows.push_back(pos - 1);
    local.push_back(static_cast<int>(t));
    ids.push_back(g.sequence.tokens[static_cast<std::size_t>(pos)]);
  }
  return token_logprobs(out.logits(rows), local, ids, sampling_support(cfg.grammar_forcing),
                        static_cast<T>(cfg.temperature));
}

template <typename T>
std::vector<double> column_values(const Var<T>& v) {
  std::vector<double> out(static_cast<std::size_t>(v.rows()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v.value()(static_cast<Eigen::Index>(i), 0));
  return out;
}

/// Fills g.ref_logprobs from a no-grad pass of the reference policy.
template <typename T>
void attach_reference(const PolicyParams<T>& ref, RolloutGroup<T>& g, const GrpoConfig& cfg) {
  auto& ref_mut = const_cast<PolicyParams<T>&>(ref);  // no-grad tape: read only
  g.ref_logprobs.clear();
  for (const auto& r : g.rollouts) {
    Tape<T> tape(false);
    g.ref_logprobs.push_back(column_values(rollout_logprobs(tape, ref_mut, g.scene->inputs, r, cfg)));
  }
}

struct UpdateStats {
  double objective = 0.0;
  double kl = 0.0;
  double clip_frac = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;
};

/// Optimizer steps on one group. Old log-probs are the detached values of the
/// first pass, so the first step always sees ratio 1.
template <typename T>
UpdateStats policy_update(PolicyParams<T>& policy, Adam<T>& opt, const RolloutGroup<T>& g, const GrpoConfig& cfg) {
  const std::size_t n = g.rollouts.size();
  if (g.ref_logprobs.size() != n || g.advantages.size() != n) throw ConfigError("grpo: group is incomplete");
  std::vector<std::vector<double>> old(n);
  UpdateStats stats;
  for (int epoch = 0; epoch < cfg.reuse; ++epoch) {
    opt.zero_grad();
    UpdateStats round;
    for (std::size_t i = 0; i < n; ++i) {
      Tape<T> tape;
      const Var<T> lp = rollout_logprobs(tape, policy, g.scene->inputs, g.rollouts[i], cfg);
      if (epoch == 0) old[i] = column_values(lp);
      SequenceObjective s;
      const Var<T> j = sequence_objective(lp, old[i], g.ref_logprobs[i], g.advantages[i], cfg.clip_eps, cfg.kl_beta, &s);
      if (!std::isfinite(s.value)) {
        round.skipped = true;
        break;
      }
      round.objective += s.value / static_cast<double>(n);
      round.kl += s.kl / static_cast<double>(n);
      round.clip_frac += s.clip_frac / static_cast<double>(n);
      tape.backward(j, static_cast<T>(-1.0 / static_cast<double>(n)));
    }
    if (!round.skipped) {
      round.grad_norm = clip_grad_norm(opt.params(), cfg.grad_clip);
      round.skipped = !std::isfinite(round.grad_norm);
    }
    if (round.skipped) {
      opt.zero_grad();
      round.objective = std::numeric_limits<double>::quiet_NaN();
      return round;
    }
    opt.step();
    if (epoch == 0) stats = round;
  }
  return stats;
}

struct IterationStats {
  int iter = 0;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  double r_traj = 0.0;
  double r_fmt = 0.0;
  double r_goal = 0.0;
  double kl = 0.0;
  double clip_frac = 0.0;
  double fallback_rate = 0.0;
  double probe_reward = std::numeric_limits<double>::quiet_NaN();  // NaN between probes
  int skipped = 0;
};

/// Mean total reward over fixed probe scenes with a fixed sampling stream, so
/// successive iterations are compared on common random numbers.
template <typename T>
double probe_reward(const PolicyParams<T>& policy, std::span<const RlScene> probe, const GrpoConfig& cfg) {
  if (probe.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    Rng rng = Rng::derive(cfg.seed, 0x70726f6265ULL + i);
    const auto g = sample_group(policy, probe[i], cfg, rng);
    for (const auto& r : g.rewards) acc += r.total;
  }
  return acc / static_cast<double>(probe.size() * static_cast<std::size_t>(cfg.group_size));
}

/// One iteration over `scenes`: a sampling round and an update per scene.
template <typename T>
IterationStats grpo_iteration(PolicyParams<T>& policy, const PolicyParams<T>& ref, Adam<T>& opt,
                              std::span<const RlScene* const> scenes, const GrpoConfig& cfg, Rng& rng) {
  IterationStats st;
  std::vector<double> totals;
  int updates = 0, fallbacks = 0;
  for (const RlScene* rs : scenes) {
    auto g = sample_group(policy, *rs, cfg, rng);
    for (const auto& r : g.rewards) {
      totals.push_back(r.total);
      st.r_traj += r.r_traj;
      st.r_fmt += r.r_fmt;
      st.r_goal += r.r_goal;
      fallbacks += r.parsed ? 0 : 1;
    }
    attach_reference(ref, g, cfg);
    const UpdateStats u = policy_update(policy, opt, g, cfg);
    if (u.skipped) {
      ++st.skipped;
      continue;
    }
    st.kl += u.kl;
    st.clip_frac += u.clip_frac;
    ++updates;
  }
  const double n = static_cast<double>(std::max<std::size_t>(totals.size(), 1));
  for (double t : totals) st.mean_reward += t / n;
  for (double t : totals) st.reward_std += (t - st.mean_reward) * (t - st.mean_reward) / n;
  st.reward_std = std::sqrt(st.reward_std);
  st.r_traj /= n;
  st.r_fmt /= n;
  st.r_goal /= n;
  st.fallback_rate = fallbacks / n;
  if (updates > 0) {
    st.kl /= updates;
    st.clip_frac /= updates;
  }
  return st;
}

inline const std::vector<std::string>& grpo_log_columns() {
  static const std::vector<std::string> c{"iter",  "mean_reward", "reward_std",    "r_traj",       "r_fmt", "r_goal",
                                          "kl",    "clip_frac",   "fallback_rate", "probe_reward", "skipped"};
  return c;
}

struct GrpoResult {
  std::vector<IterationStats> history;  // entry 0 is the probe before any update
  std::string log_csv;

  double initial_probe() const { return history.empty() ? std::numeric_limits<double>::quiet_NaN() : history[0].probe_reward; }

  double best_probe() const {
    double b = -std::numeric_limits<double>::infinity();
    for (const auto& s : history) {
      if (!std::isnan(s.probe_reward)) b = std::max(b, s.probe_reward);
    }
    return b;
  }
};

/// Runs cfg.iterations iterations. Scenes stream through seeded
/// permutations. The probe scores the first probe_size scenes before any
/// update, every probe_interval iterations, and after the last one.
template <typename T>
GrpoResult run_grpo(Model<T>& model, const PolicyParams<T>& ref, std::span<const RlScene> data, const GrpoConfig& cfg,
                    const std::string& config_hash = "") {
  cfg.validate();
  if (data.empty()) throw ConfigError("rl: dataset is empty");
  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  Adam<T> opt(model.policy_parameters(), ac);
  Rng order = Rng::derive(cfg.seed, 0x67726f6fULL);
  Rng sampler = Rng::derive(cfg.seed, 0x726f6c6cULL);
  const auto probe = data.first(std::min<std::size_t>(data.size(), static_cast<std::size_t>(cfg.probe_size)));
  CsvLog log("lastlab-rl-log-v1", config_hash, grpo_log_columns());
  GrpoResult result;
  auto record = [&](IterationStats s) {
    if (s.iter % cfg.probe_interval == 0 || s.iter == cfg.iterations) s.probe_reward = probe_reward(model.policy, probe, cfg);
    log.row({std::to_string(s.iter), fmt_real(s.mean_reward), fmt_real(s.reward_std), fmt_real(s.r_traj),
             fmt_real(s.r_fmt), fmt_real(s.r_goal), fmt_real(s.kl), fmt_real(s.clip_frac), fmt_real(s.fallback_rate),
             fmt_real(s.probe_reward), std::to_string(s.skipped)});
    result.history.push_back(s);
  };
  record(IterationStats{});
  std::vector<std::size_t> perm = permutation(data.size(), order);
  std::size_t cursor = 0;
  std::vector<const RlScene*> batch;
  for (int it = 1; it <= cfg.iterations; ++it) {
    batch.clear();
    while (static_cast<int>(batch.size()) < cfg.scenes_per_iteration) {
      if (cursor == perm.size()) {
        perm = permutation(data.size(), order);
        cursor = 0;
      }
      batch.push_back(&data[perm[cursor++]]);
    }
    IterationStats s = grpo_iteration(model.policy, ref, opt, std::span<const RlScene* const>(batch), cfg, sampler);
    s.iter = it;
    record(s);
  }
  result.log_csv = log.str();
  return result;
}

}  // namespace lastlab
