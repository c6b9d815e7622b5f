// lastlab: gen-data, sft, rl, eval, report and ablate over a run directory.
//
// Exit codes: 0 ok, 1 runtime failure, 2 invalid config or usage, 3 missing
// artifact. Failures print one JSON record on stderr.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lastlab.hpp"

namespace {

using namespace lastlab;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.sets, "override one key, e.g. --set rl.iterations=10 (repeatable)");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--run-dir", o.run_dir, "run directory (default $LASTLAB_RUN_ROOT/<config hash>)");
}

RunConfig load_config(const CommonOptions& o) {
  std::vector<std::pair<std::string, std::string>> kv;
  if (!o.config_path.empty()) kv = parse_settings(read_file(o.config_path));
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidConfig({{"--set", "expected key=value, got '" + s + "'"}});
    kv.emplace_back(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
  if (o.seed) kv.emplace_back("seed", std::to_string(*o.seed));
  if (!o.run_dir.empty()) kv.emplace_back("run_dir", o.run_dir);
  return apply_settings(RunConfig{}, kv);
}

int fail(const std::string& kind, const std::string& message, int code, const Json& fields = Json()) {
  Json j{{"error", kind}, {"message", message}, {"exit_code", code}};
  if (!fields.is_null()) j["fields"] = fields;
  std::cerr << j.dump() << "\n";
  return code;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& part : split(s, ',')) {
    try {
      out.push_back(detail::parse_integer<std::uint64_t>(detail::trim(part)));
    } catch (const std::invalid_argument&) {
      throw InvalidConfig({{"--seeds", "expected comma-separated integers, got '" + s + "'"}});
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent spatio-temporal planning in a 2-D micro-world"};
  app.require_subcommand(1);
  CommonOptions o;
  std::string stage = "rl", checkpoint, axis, seeds = "0,1,2";

  auto* gen = app.add_subcommand("gen-data", "write train_hard, train_easy and eval scene datasets");
  auto* sft = app.add_subcommand("sft", "phase I then phase II supervised fine-tuning");
  auto* rl = app.add_subcommand("rl", "GRPO from the SFT checkpoint");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the held-out split");
  auto* report = app.add_subcommand("report", "render plots and a summary CSV (read-only)");
  auto* ablate = app.add_subcommand("ablate", "run every arm of an ablation axis over several seeds");
  for (auto* c : {gen, sft, rl, eval, report, ablate}) add_common(c, o);
  eval->add_option("--stage", stage, "init, sft1, sft or rl")->capture_default_str();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file instead of the stage's own");
  ablate->add_option("--axis", axis, "supervision, reasoning, mask or token_counts")->required();
  ablate->add_option("--seeds", seeds, "comma-separated seeds")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return fail("usage", e.what(), 2);
  }

  try {
    const RunConfig cfg = load_config(o);
    if (gen->parsed()) {
      std::cout << cmd_gen_data(cfg).root.string() << "\n";
    } else if (sft->parsed()) {
      std::cout << cmd_sft(cfg).root.string() << "\n";
    } else if (rl->parsed()) {
      const auto r = cmd_rl(cfg);
      std::cout << "probe reward " << fmt_real(r.initial_probe()) << " -> best " << fmt_real(r.best_probe()) << "\n";
    } else if (eval->parsed()) {
      std::optional<std::filesystem::path> ck;
      if (!checkpoint.empty()) ck = checkpoint;
      const auto rows = cmd_eval(cfg, stage, ck);
      if (rows.empty()) {
        std::cout << "no eval scenes\n";
      } else {
        const auto d = summarize(rows);
        std::cout << "pdms " << fmt_real(d.pdms) << " epdms " << fmt_real(d.epdms) << " fallback_rate "
                  << fmt_real(d.fallback_rate) << (d.fallback_rate > 0.5 ? " (HIGH)" : "") << "\n";
      }
    } else if (report->parsed()) {
      std::cout << cmd_report(cfg).string() << "\n";
    } else if (ablate->parsed()) {
      const auto rep = run_ablation(ablation_axis_from_string(axis), cfg, parse_seeds(seeds));
      std::cout << rep.csv;
      for (const auto& a : rep.arms) {
        if (a.failed()) return fail("arm_failed", "arm '" + a.arm.name + "' failed; partial report written", 1);
      }
    }
  } catch (const InvalidConfig& e) {
    Json fields = Json::array();
    for (const auto& [k, m] : e.fields()) fields.push_back({{"key", k}, {"message", m}});
    return fail("invalid_config", e.what(), 2, fields);
  } catch (const ConfigError& e) {
    return fail("invalid_config", e.what(), 2);
  } catch (const MissingArtifact& e) {
    return fail("missing_artifact", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
