#pragma once

// Run directories, the gen-data/sft/rl/eval/report commands, and ablations.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lastlab/checkpoint.hpp"
#include "lastlab/config.hpp"
#include "lastlab/eval.hpp"
#include "lastlab/grpo.hpp"
#include "lastlab/io.hpp"
#include "lastlab/microworld.hpp"
#include "lastlab/sft.hpp"

namespace lastlab {

namespace fs = std::filesystem;

inline constexpr const char* kTimingFormat = "lastlab-timing-v1";
inline constexpr const char* kSummaryFormat = "lastlab-summary-v1";
inline constexpr const char* kAblationFormat = "lastlab-ablation-v1";

/// Stage names accepted by eval: checkpoints written by sft and rl.
inline const std::vector<std::string>& checkpoint_stages() {
  static const std::vector<std::string> s{"init", "sft1", "sft", "rl"};
  return s;
}

struct RunPaths {
  fs::path root;

  fs::path config() const { return root / "config.txt"; }
  fs::path data(const std::string& split) const { return root / "data" / (split + ".jsonl"); }
  fs::path checkpoint(const std::string& stage) const { return root / (stage + ".ckpt"); }
  fs::path log(const std::string& name) const { return root / "logs" / (name + ".csv"); }
  fs::path eval(const std::string& stage) const { return root / ("eval_" + stage + ".csv"); }
  fs::path report() const { return root / "report"; }
  fs::path timing() const { return root / "timing.json"; }
};

/// Default root for runs without an explicit run_dir.
inline fs::path run_root() {
  const char* env = std::getenv("LASTLAB_RUN_ROOT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

/// The run's directory: cfg.run_dir, or <run root>/<config hash>.
inline RunPaths run_paths(const RunConfig& cfg) {
  return {cfg.run_dir.empty() ? run_root() / config_hash(cfg) : fs::path(cfg.run_dir)};
}

namespace detail {

inline void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact("missing artifact: " + p.string());
}

inline std::string snapshot_hash(const fs::path& p) {
  const auto t = read_file(p);
  const std::string key = "# config_hash=";
  const auto at = t.find(key);
  if (at == std::string::npos) throw FormatError("config snapshot: no config_hash line");
  return t.substr(at + key.size(), 16);
}

/// Writes the config snapshot, or checks it against an existing one.
inline RunPaths open_run(const RunConfig& cfg) {
  const RunPaths p = run_paths(cfg);
  if (fs::exists(p.config())) {
    const auto h = snapshot_hash(p.config());
    if (h != config_hash(cfg)) {
      throw InvalidConfig({{"run_dir", p.root.string() + " holds a run with config_hash " + h}});
    }
  } else {
    write_file_atomic(p.config(), config_snapshot(cfg));
  }
  return p;
}

inline void record_time(const RunPaths& p, const std::string& key, double seconds) {
  Json j{{"format", kTimingFormat}};
  if (fs::exists(p.timing())) {
    try {
      j = Json::parse(read_file(p.timing()));
    } catch (const Json::exception&) {
    }
  }
  j["seconds"][key] = seconds;
  write_file_atomic(p.timing(), j.dump(2) + "\n");
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::vector<SceneRecord> load_split(const RunPaths& p, const std::string& split) {
  require(p.data(split));
  return load_dataset(p.data(split));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Hard and easy training splits share train_seed; the held-out split draws
/// hard scenes from eval_seed.
inline RunPaths cmd_gen_data(const RunConfig& cfg) {
  detail::Stopwatch clock;
  const RunPaths p = detail::open_run(cfg);
  const auto& d = cfg.data;
  auto make = [&](const char* split, int n, std::uint64_t seed, Difficulty diff) {
    std::vector<SceneRecord> scenes;
    for (int i = 0; i < n; ++i) scenes.push_back(generate_scene(seed + static_cast<std::uint64_t>(i), diff));
    write_file_atomic(p.data(split), dataset_jsonl(scenes, {split, config_hash(cfg), scenes.size()},
                                                   cfg.model_config().oracle()));
  };
  make("train_hard", d.n_hard, d.train_seed, Difficulty::hard);
  make("train_easy", d.n_easy, d.train_seed, Difficulty::easy);
  make("eval", d.n_eval, d.eval_seed, Difficulty::hard);
  detail::record_time(p, "gen-data", clock.seconds());
  return p;
}

/// Phase I on the hard split, then phase II on hard plus easy.
inline RunPaths cmd_sft(const RunConfig& cfg) {
  detail::Stopwatch clock;
  for (const char* split : {"train_hard", "train_easy"}) detail::require(run_paths(cfg).data(split));
  const RunPaths p = detail::open_run(cfg);
  const auto hard = detail::load_split(p, "train_hard");
  auto both = hard;
  const auto easy = detail::load_split(p, "train_easy");
  both.insert(both.end(), easy.begin(), easy.end());
  const ModelConfig mc = cfg.model_config();
  const std::string h = config_hash(cfg);
  auto model = Model<float>::init(mc, cfg.seed);
  save_checkpoint(p.checkpoint("init"), model, cfg, "init");
  const auto ex1 = make_examples(hard, mc);
  const auto r1 = run_sft(model, std::span<const TrainingExample>(ex1), cfg.sft_config(1), h);
  write_file_atomic(p.log("sft_phase1"), r1.log_csv);
  save_checkpoint(p.checkpoint("sft1"), model, cfg, "sft1");
  const auto ex2 = make_examples(both, mc);
  const auto r2 = run_sft(model, std::span<const TrainingExample>(ex2), cfg.sft_config(2), h);
  write_file_atomic(p.log("sft_phase2"), r2.log_csv);
  save_checkpoint(p.checkpoint("sft"), model, cfg, "sft");
  detail::record_time(p, "sft", clock.seconds());
  return p;
}

/// GRPO from sft.ckpt on the hard split; the SFT policy is the reference.
inline GrpoResult cmd_rl(const RunConfig& cfg) {
  detail::Stopwatch clock;
  detail::require(run_paths(cfg).checkpoint("sft"));
  detail::require(run_paths(cfg).data("train_hard"));
  const RunPaths p = detail::open_run(cfg);
  auto model = load_checkpoint(p.checkpoint("sft"), cfg);
  const auto scenes = make_rl_scenes(detail::load_split(p, "train_hard"));
  const auto ref = model.policy;
  auto r = run_grpo(model, ref, std::span<const RlScene>(scenes), cfg.rl_config(), config_hash(cfg));
  write_file_atomic(p.log("rl"), r.log_csv);
  save_checkpoint(p.checkpoint("rl"), model, cfg, "rl");
  detail::record_time(p, "rl", clock.seconds());
  return r;
}

/// Scores a checkpoint on the held-out split and writes eval_<stage>.csv.
/// `checkpoint` overrides the run's own file for that stage.
inline std::vector<SceneEvaluation> cmd_eval(const RunConfig& cfg, const std::string& stage,
                                             const std::optional<fs::path>& checkpoint = std::nullopt) {
  if (std::find(checkpoint_stages().begin(), checkpoint_stages().end(), stage) == checkpoint_stages().end()) {
    throw InvalidConfig({{"stage", "must be one of init, sft1, sft, rl; got '" + stage + "'"}});
  }
  detail::Stopwatch clock;
  detail::require(checkpoint.value_or(run_paths(cfg).checkpoint(stage)));
  detail::require(run_paths(cfg).data("eval"));
  const RunPaths p = detail::open_run(cfg);
  const auto model = load_checkpoint(checkpoint.value_or(p.checkpoint(stage)), cfg);
  const auto scenes = detail::load_split(p, "eval");
  const auto rows = evaluate_plans(model.policy, std::span<const SceneRecord>(scenes), cfg.eval_rule(), cfg.metrics);
  write_file_atomic(p.eval(stage), eval_csv(rows, cfg));
  detail::record_time(p, "eval_" + stage, clock.seconds());
  return rows;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Static line chart; NaN points are skipped.
inline std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                                  const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
    << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label
    << "</text>\n"
    << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (T + H - B) / 2 << ")\">" << y_label << "</text>\n";
  for (double f : {0.0, 0.5, 1.0}) {
    const double xv = x0 + f * (x1 - x0), yv = y0 + f * (y1 - y0);
    o << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt_real(xv)
      << "</text>\n"
      << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt_real(yv)
      << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* c = colors[i % 6];
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[i].points) {
      if (std::isfinite(x) && std::isfinite(y)) o << px(x) << "," << py(y) << " ";
    }
    o << "\"/>\n<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (i + 1) << "\" fill=\"" << c << "\">"
      << series[i].name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

namespace detail {

inline std::vector<double> column_reals(const CsvTable& t, const std::string& name) {
  const int c = t.column(name);
  std::vector<double> v;
  for (const auto& r : t.rows) {
    const auto& cell = r.at(static_cast<std::size_t>(c));
    v.push_back(cell == "nan" || cell == "-nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(cell));
  }
  return v;
}

inline Series series_of(const CsvTable& t, const std::string& x, const std::string& y, const std::string& name,
                        double x_shift = 0.0) {
  const auto xs = column_reals(t, x), ys = column_reals(t, y);
  Series s{name, {}};
  for (std::size_t i = 0; i < xs.size(); ++i) s.points.emplace_back(xs[i] + x_shift, ys[i]);
  return s;
}

}  // namespace detail

/// Reads logs and eval CSVs and writes plots plus summary.csv into report/.
/// Nothing outside report/ is touched.
inline fs::path cmd_report(const RunConfig& cfg) {
  const RunPaths p = run_paths(cfg);
  detail::require(p.config());
  if (detail::snapshot_hash(p.config()) != config_hash(cfg)) {
    throw InvalidConfig({{"run_dir", p.root.string() + " holds a different config"}});
  }
  const fs::path out = p.report();
  fs::create_directories(out);
  long phase1_len = 0;
  std::vector<Series> losses;
  for (const char* phase : {"sft_phase1", "sft_phase2"}) {
    if (!fs::exists(p.log(phase))) continue;
    const auto t = parse_csv(read_file(p.log(phase)));
    const double shift = std::string(phase) == "sft_phase2" ? static_cast<double>(phase1_len) : 0.0;
    for (const char* col : {"ce", "l_wm", "l_3d"}) {
      losses.push_back(detail::series_of(t, "step", col, std::string(phase) + " " + col, shift));
    }
    if (std::string(phase) == "sft_phase1") phase1_len = static_cast<long>(t.rows.size());
  }
  if (!losses.empty()) write_file_atomic(out / "sft_losses.svg", svg_line_chart("SFT losses", "step", "loss", losses));
  if (fs::exists(p.log("rl"))) {
    const auto t = parse_csv(read_file(p.log("rl")));
    write_file_atomic(out / "rl_reward.svg",
                      svg_line_chart("GRPO reward", "iteration", "reward",
                                     {detail::series_of(t, "iter", "mean_reward", "batch mean"),
                                      detail::series_of(t, "iter", "probe_reward", "probe")}));
  }
  const std::vector<std::string> metric_cols{"fallback", "nc", "dac", "ttc", "cf", "ep", "ddc", "tlc", "lk",
                                             "hc", "ec", "pdms", "epdms", "l2_avg", "col_avg"};
  std::vector<std::string> cols{"stage"};
  cols.insert(cols.end(), metric_cols.begin(), metric_cols.end());
  CsvLog summary(kSummaryFormat, config_hash(cfg), cols);
  for (const auto& stage : checkpoint_stages()) {
    if (!fs::exists(p.eval(stage))) continue;
    const auto t = parse_csv(read_file(p.eval(stage)));
    if (t.rows.empty() || t.rows.back().at(0) != "summary") continue;
    std::vector<std::string> row{stage};
    for (const auto& c : metric_cols) row.push_back(t.rows.back().at(static_cast<std::size_t>(t.column(c))));
    summary.row(row);
  }
  write_file_atomic(out / "summary.csv", summary.str());
  return out;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct Arm {
  std::string name;
  std::vector<std::pair<std::string, std::string>> settings;
};

enum class AblationAxis { supervision, reasoning, mask, token_counts };

inline AblationAxis ablation_axis_from_string(const std::string& s) {
  if (s == "supervision") return AblationAxis::supervision;
  if (s == "reasoning") return AblationAxis::reasoning;
  if (s == "mask") return AblationAxis::mask;
  if (s == "token_counts") return AblationAxis::token_counts;
  throw InvalidConfig({{"axis", "must be supervision, reasoning, mask or token_counts; got '" + s + "'"}});
}

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::supervision: return "supervision";
    case AblationAxis::reasoning: return "reasoning";
    case AblationAxis::mask: return "mask";
    case AblationAxis::token_counts: return "token_counts";
  }
  return "?";
}

/// k_wm counts tokens per WM horizon group (three groups).
inline std::vector<Arm> ablation_arms(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::supervision:
      return {{"with sup.", {{"mode.latent_supervision", "on"}}}, {"w/o sup.", {{"mode.latent_supervision", "off"}}}};
    case AblationAxis::reasoning:
      return {{"latent", {{"mode.reasoning", "latent"}}},
              {"none", {{"mode.reasoning", "none"}, {"mode.latent_supervision", "off"}}}};
    case AblationAxis::mask:
      return {{"structured", {{"mode.mask", "structured"}}}, {"standard", {{"mode.mask", "standard"}}}};
    case AblationAxis::token_counts: {
      std::vector<Arm> arms;
      for (auto [wm, geo] : {std::pair{12, 6}, {12, 24}, {6, 12}, {24, 12}, {12, 12}}) {
        arms.push_back({"WM 3*" + std::to_string(wm) + " / 3D " + std::to_string(geo),
                        {{"model.k_wm", std::to_string(wm)}, {"model.k_3d", std::to_string(geo)}}});
      }
      return arms;
    }
  }
  return {};
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<DatasetScore> score;
  std::string error;  // empty on success
  std::string run_dir;
};

struct ArmOutcome {
  Arm arm;
  std::vector<SeedOutcome> seeds;

  std::optional<double> median(const std::function<double(const DatasetScore&)>& f) const {
    std::vector<double> v;
    for (const auto& s : seeds) {
      if (s.score) v.push_back(f(*s.score));
    }
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  bool failed() const {
    return std::any_of(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return !s.error.empty(); });
  }
};

struct AblationReport {
  std::vector<ArmOutcome> arms;
  std::string csv;
};

/// gen-data, sft, rl, then eval of the RL checkpoint.
inline DatasetScore run_pipeline(const RunConfig& cfg) {
  cmd_gen_data(cfg);
  cmd_sft(cfg);
  cmd_rl(cfg);
  const auto rows = cmd_eval(cfg, "rl");
  if (rows.empty()) throw ConfigError("pipeline: empty eval split");
  return summarize(rows);
}

using PipelineFn = std::function<DatasetScore(const RunConfig&)>;

inline std::string ablation_csv(const std::vector<ArmOutcome>& arms, const std::string& base_hash) {
  using Metric = std::pair<const char*, double DatasetScore::*>;
  static const std::vector<Metric> metrics{{"pdms", &DatasetScore::pdms}, {"epdms", &DatasetScore::epdms},
                                           {"nc", &DatasetScore::nc},     {"dac", &DatasetScore::dac},
                                           {"ttc", &DatasetScore::ttc},   {"cf", &DatasetScore::cf},
                                           {"ep", &DatasetScore::ep},     {"fallback_rate", &DatasetScore::fallback_rate}};
  std::vector<std::string> cols{"arm", "seed", "status"};
  for (const auto& [n, _] : metrics) cols.emplace_back(n);
  cols.emplace_back("run_dir");
  CsvLog log(kAblationFormat, base_hash, cols, {{"metrics", "micro-world proxies; median rows over successful seeds"}});
  auto quoted = [](std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  for (const auto& a : arms) {
    for (const auto& s : a.seeds) {
      std::vector<std::string> row{a.arm.name, std::to_string(s.seed), s.error.empty() ? "ok" : "failed: " + quoted(s.error)};
      for (const auto& [_, m] : metrics) row.push_back(s.score ? fmt_real((*s.score).*m) : "");
      row.push_back(s.run_dir);
      log.row(row);
    }
    std::vector<std::string> row{a.arm.name, "median", a.failed() ? "partial" : "ok"};
    for (const auto& [_, m] : metrics) {
      const auto v = a.median([m = m](const DatasetScore& d) { return d.*m; });
      row.push_back(v ? fmt_real(*v) : "");
      static_cast<void>(_);
    }
    row.emplace_back("");
    log.row(row);
  }
  return log.str();
}

/// Runs every arm for every seed. A failing arm-seed is recorded and the
/// rest still run.
inline AblationReport run_arms(const std::vector<Arm>& arms, const RunConfig& base,
                               const std::vector<std::uint64_t>& seeds, const PipelineFn& pipeline = run_pipeline) {
  AblationReport rep;
  for (const auto& arm : arms) {
    ArmOutcome out{arm, {}};
    for (std::uint64_t seed : seeds) {
      SeedOutcome so;
      so.seed = seed;
      try {
        auto kv = arm.settings;
        kv.emplace_back("seed", std::to_string(seed));
        RunConfig cfg = apply_settings(base, kv);
        cfg.run_dir = (run_root() / config_hash(cfg)).string();
        so.run_dir = cfg.run_dir;
        so.score = pipeline(cfg);
      } catch (const std::exception& e) {
        so.error = e.what();
      }
      out.seeds.push_back(std::move(so));
    }
    rep.arms.push_back(std::move(out));
  }
  rep.csv = ablation_csv(rep.arms, config_hash(base));
  return rep;
}

/// Comparison report written to <run root>/ablation/<axis>-<base hash>.csv.
inline AblationReport run_ablation(AblationAxis axis, const RunConfig& base,
                                   const std::vector<std::uint64_t>& seeds = {0, 1, 2},
                                   const PipelineFn& pipeline = run_pipeline) {
  validate(base);
  auto rep = run_arms(ablation_arms(axis), base, seeds, pipeline);
  write_file_atomic(run_root() / "ablation" / (std::string(to_string(axis)) + "-" + config_hash(base) + ".csv"),
                    rep.csv);
  return rep;
}

}  // namespace lastlab
