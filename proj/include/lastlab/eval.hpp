#pragma once

// Closed- and open-loop scoring of greedy plans over a scene list.

#include <span>
#include <string>
#include <vector>

#include "lastlab/config.hpp"
#include "lastlab/io.hpp"
#include "lastlab/metrics.hpp"
#include "lastlab/policy.hpp"

namespace lastlab {

inline constexpr const char* kEvalFormat = "lastlab-eval-v1";

/// Single-shot plans: no replanned trajectory, so ec is 1 for every scene.
template <typename T>
std::vector<SceneEvaluation> evaluate_plans(const PolicyParams<T>& policy, std::span<const SceneRecord> scenes,
                                            const MaskRule& rule, const MetricConfig& metrics = {}) {
  std::vector<SceneEvaluation> rows;
  rows.reserve(scenes.size());
  for (const auto& s : scenes) {
    const PlanResult p = plan(policy, scene_inputs(s), rule);
    SceneEvaluation e;
    e.scene_id = s.scene_id;
    e.difficulty = s.difficulty;
    e.instruction = s.instruction;
    e.fallback = p.fallback;
    e.scores = ext_sub_scores(s, p.trajectory, std::nullopt, metrics);
    e.pdms = pdms(e.scores.base);
    e.epdms = epdms(e.scores);
    e.open = open_loop(p.trajectory, s.gt_trajectory, s, metrics);
    rows.push_back(e);
  }
  return rows;
}

inline const std::vector<std::string>& eval_columns() {
  static const std::vector<std::string> c{"scene_id", "difficulty", "instruction", "fallback", "nc",     "dac",
                                          "ttc",      "cf",         "ep",          "ddc",      "tlc",    "lk",
                                          "hc",       "ec",         "pdms",        "epdms",    "l2_1s",  "l2_2s",
                                          "l2_3s",    "l2_avg",     "col_1s",      "col_2s",   "col_3s", "col_avg"};
  return c;
}

/// Report header lines naming every threshold, since the sub-metrics are
/// micro-world proxies.
inline std::vector<std::pair<std::string, std::string>> eval_meta(const RunConfig& cfg, const DatasetScore& d) {
  const auto& m = cfg.metrics;
  return {{"metrics", "micro-world proxies of NC/DAC/TTC/C/EP and DDC/TLC/LK/HC/EC"},
          {"thresholds", "ego_radius=" + fmt_real(m.ego_radius) + " step=" + fmt_real(m.step) +
                             " ttc_horizon=" + fmt_real(m.ttc_horizon) + " max_accel=" + fmt_real(m.max_accel) +
                             " max_jerk=" + fmt_real(m.max_jerk)},
          {"ec", "single-shot plans; ec fixed at 1"},
          {"goal_tiers", detail::tiers_text(cfg.rl.tiers)},
          {"fallback_rate", fmt_real(d.fallback_rate)},
          {"fallback_flag", d.fallback_rate > 0.5 ? "HIGH" : "ok"}};
}

inline std::string eval_csv(std::span<const SceneEvaluation> rows, const RunConfig& cfg) {
  const DatasetScore d = rows.empty() ? DatasetScore{} : summarize(rows);
  CsvLog log(kEvalFormat, config_hash(cfg), eval_columns(), eval_meta(cfg, d));
  auto b = [](double v) { return fmt_real(v); };
  for (const auto& r : rows) {
    const auto& s = r.scores;
    log.row({std::to_string(r.scene_id), to_string(r.difficulty), to_string(r.instruction), r.fallback ? "1" : "0",
             b(s.base.nc), b(s.base.dac), b(s.base.ttc), b(s.base.cf), b(s.base.ep), b(s.ddc), b(s.tlc), b(s.lk), b(s.hc),
             b(s.ec), b(r.pdms), b(r.epdms), b(r.open.l2[0]), b(r.open.l2[1]), b(r.open.l2[2]), b(r.open.l2_avg),
             b(r.open.collision[0]), b(r.open.collision[1]), b(r.open.collision[2]), b(r.open.collision_avg)});
  }
  if (!rows.empty()) {
    log.row({"summary", "", "", b(d.fallback_rate), b(d.nc), b(d.dac), b(d.ttc), b(d.cf), b(d.ep), b(d.ddc), b(d.tlc),
             b(d.lk), b(d.hc), b(d.ec), b(d.pdms), b(d.epdms), b(d.l2[0]), b(d.l2[1]), b(d.l2[2]), b(d.l2_avg),
             b(d.collision[0]), b(d.collision[1]), b(d.collision[2]), b(d.collision_avg)});
  }
  return log.str();
}

}  // namespace lastlab
