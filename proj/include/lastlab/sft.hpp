#pragma once

// Two-phase supervised fine-tuning: teacher-forced action CE plus the
// latent alignment losses, weighted per phase.

#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lastlab/io.hpp"
#include "lastlab/model.hpp"
#include "lastlab/optim.hpp"

namespace lastlab {

struct PhaseWeights {
  double action = 1.0;
  double wm = 0.0;
  double geo = 0.0;
};

inline PhaseWeights phase_weights(int phase) {
  if (phase == 1) return {0.01, 1.0, 1.0};
  if (phase == 2) return {1.0, 0.01, 0.01};
  throw ConfigError("phase must be 1 or 2");
}

inline double total_loss(double ce, double l_wm, double l_3d, const PhaseWeights& w) {
  return w.action * ce + w.wm * l_wm + w.geo * l_3d;
}

inline MaskPhase mask_phase(int phase) { return phase == 1 ? MaskPhase::phase1 : MaskPhase::phase2_and_rl; }

struct SftConfig {
  int phase = 1;
  int epochs = 1;
  long steps = -1;  // overrides epochs when >= 0
  double learning_rate = 3e-4;
  int batch_size = 2;
  int grad_accum = 4;
  double grad_clip = 1.0;
  double mask_ratio = 0.5;
  bool latent_supervision = true;
  MaskMode mask = MaskMode::structured;
  std::uint64_t seed = 0;

  void validate() const {
    if (phase != 1 && phase != 2) throw ConfigError("sft.phase must be 1 or 2");
    if (epochs < 0) throw ConfigError("sft.epochs must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("sft.learning_rate must be >= 0");
    if (batch_size < 1 || grad_accum < 1) throw ConfigError("sft.batch_size and sft.grad_accum must be positive");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("sft.mask_ratio must lie in [0, 1)");
  }

  PhaseWeights weights() const {
    PhaseWeights w = phase_weights(phase);
    if (!latent_supervision) w.wm = w.geo = 0.0;
    return w;
  }

  MaskRule rule() const { return {mask_phase(phase), mask}; }
  int examples_per_step() const { return batch_size * grad_accum; }
};

/// Everything a teacher-forced pass needs, precomputed once per scene.
struct TrainingExample {
  std::int64_t scene_id = 0;
  SceneInputs inputs;
  TokenSequence sequence;
  std::vector<int> ce_rows;     // positions whose next token is supervised
  std::vector<int> ce_targets;
  TeacherFeatures teacher;
};

inline TrainingExample make_example(const SceneRecord& scene, const ModelConfig& cfg) {
  TrainingExample ex;
  ex.scene_id = scene.scene_id;
  ex.inputs = scene_inputs(scene);
  ex.sequence = build_sequence(ex.inputs.prompt, serialize_trajectory(scene.gt_trajectory), cfg.policy.layout);
  for (int i = ex.sequence.layout.act_begin; i + 1 < ex.sequence.size(); ++i) {
    ex.ce_rows.push_back(i);
    ex.ce_targets.push_back(ex.sequence.tokens[static_cast<std::size_t>(i + 1)]);
  }
  if (cfg.policy.layout.latent) ex.teacher = teacher_features(scene, cfg.oracle());
  return ex;
}

inline std::vector<TrainingExample> make_examples(std::span<const SceneRecord> scenes, const ModelConfig& cfg) {
  std::vector<TrainingExample> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(make_example(s, cfg));
  return out;
}

struct LossBreakdown {
  double ce = 0.0;
  double l_wm = 0.0;
  double l_3d = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

template <typename T>
struct ExampleLoss {
  Var<T> ce;
  std::optional<Var<T>> l_wm, l_3d;
};

/// Records one example's losses on the tape. Adapters only run when the
/// layout has latent blocks.
template <typename T>
ExampleLoss<T> example_losses(Tape<T>& tape, Model<T>& model, const TrainingExample& ex, const MaskRule& rule,
                              double mask_ratio, Rng& mask_rng) {
  auto out = forward(tape, model.policy, ex.inputs, ex.sequence, rule);
  std::vector<int> local(ex.ce_rows.size());
  for (std::size_t i = 0; i < local.size(); ++i) local[i] = static_cast<int>(i);
  ExampleLoss<T> r{cross_entropy(out.logits(ex.ce_rows), local, ex.ce_targets), {}, {}};
  if (out.h_dyn && out.h_geo) {
    const Var<T> e = visual_mask(out.e_img, mask_ratio, mask_rng);
    const Var<T> p_geo = geometry_adapter(tape, *out.h_geo, e, model.adapters);
    const Var<T> p_dyn = dynamics_adapter(tape, *out.h_dyn, e, model.adapters, model.policy.cfg.layout.wm_groups);
    const auto al = alignment_losses(p_geo, p_dyn, ex.teacher);
    r.l_wm = al.l_wm;
    r.l_3d = al.l_3d;
  }
  return r;
}

inline std::string describe(const LossBreakdown& b) {
  std::ostringstream s;
  s << "ce=" << b.ce << " l_wm=" << b.l_wm << " l_3d=" << b.l_3d << " total=" << b.total
    << " grad_norm=" << b.grad_norm;
  return s.str();
}

/// Accumulates gradients of the mean weighted loss over `batch` into the
/// model, without stepping. Returns the averaged breakdown.
template <typename T>
LossBreakdown accumulate_gradients(Model<T>& model, std::span<const TrainingExample* const> batch,
                                   const SftConfig& cfg, Rng& mask_rng, const PhaseWeights& w) {
  if (batch.empty()) throw ConfigError("sft: empty batch");
  const T inv_n = T(1) / static_cast<T>(batch.size());
  LossBreakdown acc;
  for (const TrainingExample* ex : batch) {
    Tape<T> tape;
    const auto l = example_losses(tape, model, *ex, cfg.rule(), cfg.mask_ratio, mask_rng);
    std::vector<Var<T>> terms{l.ce};
    std::vector<T> weights{static_cast<T>(w.action) * inv_n};
    if (l.l_wm) {
      terms.push_back(*l.l_wm);
      terms.push_back(*l.l_3d);
      weights.push_back(static_cast<T>(w.wm) * inv_n);
      weights.push_back(static_cast<T>(w.geo) * inv_n);
    }
    const Var<T> loss = weighted_sum<T>(terms, weights);
    const double ce = l.ce.scalar(), lw = l.l_wm ? l.l_wm->scalar() : 0.0, lg = l.l_3d ? l.l_3d->scalar() : 0.0;
    const double tot = total_loss(ce, lw, lg, w);
    if (!std::isfinite(tot)) {
      throw NumericError("sft: non-finite loss on scene " + std::to_string(ex->scene_id) + " (" +
                         describe({ce, lw, lg, tot, 0.0}) + ")");
    }
    tape.backward(loss);
    acc.ce += ce;
    acc.l_wm += lw;
    acc.l_3d += lg;
    acc.total += tot;
  }
  const double n = static_cast<double>(batch.size());
  acc.ce /= n;
  acc.l_wm /= n;
  acc.l_3d /= n;
  acc.total /= n;
  return acc;
}

template <typename T>
LossBreakdown accumulate_gradients(Model<T>& model, std::span<const TrainingExample* const> batch,
                                   const SftConfig& cfg, Rng& mask_rng) {
  return accumulate_gradients(model, batch, cfg, mask_rng, cfg.weights());
}

/// One optimizer update over batch_size x grad_accum examples.
template <typename T>
LossBreakdown sft_step(Model<T>& model, Adam<T>& opt, std::span<const TrainingExample* const> batch,
                       const SftConfig& cfg, Rng& mask_rng) {
  opt.zero_grad();
  LossBreakdown b = accumulate_gradients(model, batch, cfg, mask_rng);
  b.grad_norm = clip_grad_norm(opt.params(), cfg.grad_clip);
  if (!std::isfinite(b.grad_norm)) throw NumericError("sft: non-finite gradient (" + describe(b) + ")");
  opt.step();
  return b;
}

/// Mean losses without updates. The visual mask is a training-time device,
/// so evaluation sees every patch.
template <typename T>
LossBreakdown evaluate_losses(Model<T>& model, std::span<const TrainingExample> data, const SftConfig& cfg) {
  Rng unused(0);
  const PhaseWeights w = cfg.weights();
  LossBreakdown acc;
  for (const auto& ex : data) {
    Tape<T> tape(false);
    const auto l = example_losses(tape, model, ex, cfg.rule(), 0.0, unused);
    acc.ce += l.ce.scalar();
    if (l.l_wm) {
      acc.l_wm += l.l_wm->scalar();
      acc.l_3d += l.l_3d->scalar();
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
  acc.ce /= n;
  acc.l_wm /= n;
  acc.l_3d /= n;
  acc.total = total_loss(acc.ce, acc.l_wm, acc.l_3d, w);
  return acc;
}

inline long sft_total_steps(const SftConfig& cfg, std::size_t n_examples) {
  if (cfg.steps >= 0) return cfg.steps;
  const auto per = static_cast<std::size_t>(cfg.examples_per_step());
  return static_cast<long>(cfg.epochs) * static_cast<long>((n_examples + per - 1) / per);
}

inline const std::vector<std::string>& sft_log_columns() {
  static const std::vector<std::string> c{"step", "phase", "ce", "l_wm", "l_3d", "total", "grad_norm"};
  return c;
}

struct SftResult {
  std::vector<LossBreakdown> history;
  std::string log_csv;
};

/// Runs one phase. Batches stream through seeded per-epoch permutations.
template <typename T>
SftResult run_sft(Model<T>& model, std::span<const TrainingExample> data, const SftConfig& cfg,
                  const std::string& config_hash = "") {
  cfg.validate();
  if (data.empty()) throw ConfigError("sft: dataset is empty");
  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  Adam<T> opt(model.all_parameters(), ac);
  Rng order = Rng::derive(cfg.seed, 0x6f72646572ULL + static_cast<std::uint64_t>(cfg.phase));
  Rng mask_rng = Rng::derive(cfg.seed, 0x6d61736bULL + static_cast<std::uint64_t>(cfg.phase));
  CsvLog log("lastlab-sft-log-v1", config_hash, sft_log_columns());
  SftResult result;
  std::vector<std::size_t> perm = permutation(data.size(), order);
  std::size_t cursor = 0;
  const long steps = sft_total_steps(cfg, data.size());
  std::vector<const TrainingExample*> batch;
  for (long step = 0; step < steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < cfg.examples_per_step()) {
      if (cursor == perm.size()) {
        perm = permutation(data.size(), order);
        cursor = 0;
      }
      batch.push_back(&data[perm[cursor++]]);
    }
    const LossBreakdown b = sft_step(model, opt, std::span<const TrainingExample* const>(batch), cfg, mask_rng);
    result.history.push_back(b);
    log.row({std::to_string(step), std::to_string(cfg.phase), fmt_real(b.ce), fmt_real(b.l_wm), fmt_real(b.l_3d),
             fmt_real(b.total), fmt_real(b.grad_norm)});
  }
  result.log_csv = log.str();
  return result;
}

}  // namespace lastlab
