#include <gtest/gtest.h>

#include <set>

#include "lastlab/optim.hpp"
#include "lastlab/policy.hpp"

using namespace lastlab;

namespace {

PolicyConfig small_config(LatentInput mode = LatentInput::slots) {
  PolicyConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.mlp_ratio = 2;
  c.latent_input = mode;
  return c;
}

const MaskRule kPhase1{MaskPhase::phase1, MaskMode::structured};
const MaskRule kPhase2{MaskPhase::phase2_and_rl, MaskMode::structured};

SceneInputs inputs_for(std::uint64_t seed, Difficulty d = Difficulty::hard) { return scene_inputs(generate_scene(seed, d)); }

TokenSequence teacher_sequence(const SceneRecord& s, const LayoutConfig& cfg) {
  return build_sequence(prompt_tokens(s), serialize_trajectory(s.gt_trajectory), cfg);
}

template <typename T>
Matrix<T> all_logits(PolicyParams<T>& p, const SceneInputs& in, const TokenSequence& seq, const MaskRule& rule,
                     const ForwardOptions<T>& opt = {}) {
  Tape<T> tape(false);
  auto out = forward(tape, p, in, seq, rule, opt);
  std::vector<int> rows(static_cast<std::size_t>(seq.size()));
  for (int i = 0; i < seq.size(); ++i) rows[static_cast<std::size_t>(i)] = i;
  return out.logits(rows).value();
}

}  // namespace

TEST(Mask, Phase1BlocksVisualPathAndMutualLatents) {
  const auto in = inputs_for(1);
  const auto seq = sequence_prefix(in.prompt, LayoutConfig{});
  const auto& l = seq.layout;
  const BoolMatrix m = build_mask(l, l.max_length(), kPhase1);
  for (int q = 0; q < m.rows(); ++q) {
    for (int k = 0; k < m.cols(); ++k) {
      const Segment sq = l.segment_at(q), sk = l.segment_at(k);
      bool expect = k <= q;
      if ((sq == Segment::wm && sk == Segment::geo) || (sq == Segment::geo && sk == Segment::wm)) expect = false;
      if (sq == Segment::act && sk == Segment::img) expect = false;
      ASSERT_EQ(m(q, k), expect) << q << "," << k;
    }
  }
}

TEST(Mask, Phase2ReopensImageForActions) {
  const auto in = inputs_for(2);
  const auto l = sequence_prefix(in.prompt, LayoutConfig{}).layout;
  const BoolMatrix m = build_mask(l, l.max_length(), kPhase2);
  for (int q = l.act_begin; q < m.rows(); ++q) {
    for (int k = l.img_begin; k < l.img_begin + l.img_len; ++k) EXPECT_TRUE(m(q, k));
  }
  for (int q = l.wm_begin; q < l.geo_begin; ++q) {
    for (int k = l.geo_begin; k < l.act_begin; ++k) EXPECT_FALSE(m(q, k));
  }
  for (int q = l.geo_begin; q < l.act_begin; ++q) {
    for (int k = l.wm_begin; k < l.geo_begin; ++k) EXPECT_FALSE(m(q, k));
  }
}

TEST(Mask, StandardAndNoLatentAreCausal) {
  const auto in = inputs_for(3);
  LayoutConfig none;
  none.latent = false;
  for (const auto& [cfg, rule] : {std::pair{LayoutConfig{}, MaskRule{MaskPhase::phase1, MaskMode::standard}},
                                  std::pair{none, kPhase1}}) {
    const auto l = sequence_prefix(in.prompt, cfg).layout;
    const BoolMatrix m = build_mask(l, l.max_length(), rule);
    for (int q = 0; q < m.rows(); ++q) {
      for (int k = 0; k < m.cols(); ++k) ASSERT_EQ(m(q, k), k <= q);
    }
  }
}

TEST(Layout, SegmentsAndSlots) {
  const auto in = inputs_for(4);
  const auto seq = sequence_prefix(in.prompt, LayoutConfig{});
  const auto& l = seq.layout;
  EXPECT_EQ(l.img_begin, static_cast<int>(in.prompt.size()));
  EXPECT_EQ(seq.tokens[static_cast<std::size_t>(l.wm_begin)], tok::wm_start);
  EXPECT_EQ(seq.tokens[static_cast<std::size_t>(l.geo_begin - 1)], tok::wm_end);
  EXPECT_EQ(seq.tokens[static_cast<std::size_t>(l.geo_begin)], tok::geo_start);
  EXPECT_EQ(seq.tokens[static_cast<std::size_t>(l.act_begin - 1)], tok::geo_end);
  EXPECT_EQ(seq.tokens.back(), tok::answer_start);
  EXPECT_EQ(l.n_wm_slots(), 36);
  EXPECT_EQ(l.n_geo_slots(), 12);
  std::set<int> idx;
  for (int p = 0; p < seq.size(); ++p) {
    if (l.is_slot(p)) {
      EXPECT_EQ(seq.tokens[static_cast<std::size_t>(p)], tok::latent);
      idx.insert(l.slot_index(p));
    }
  }
  EXPECT_EQ(idx.size(), 48u);
  EXPECT_EQ(*idx.rbegin(), 47);
  EXPECT_LE(l.max_position_ids(), PolicyConfig{}.max_positions);
  EXPECT_THROW(make_layout(0, LayoutConfig{}), ConfigError);
  EXPECT_THROW(make_layout(LayoutConfig{}.max_prompt + 1, LayoutConfig{}), ConfigError);
}

TEST(Layout, SegmentsAfterThePromptHaveFixedPositionIds) {
  const LayoutConfig cfg;
  const auto a = make_layout(10, cfg), b = make_layout(cfg.max_prompt, cfg);
  EXPECT_EQ(a.act_begin + a.pos_offset, b.act_begin + b.pos_offset);
  EXPECT_EQ(a.img_begin + a.pos_offset, cfg.max_prompt);
  EXPECT_EQ(b.pos_offset, 0);
}

TEST(Layout, WorstCasePromptFitsMaxPrompt) {
  auto s = generate_scene(3, Difficulty::easy);
  s.ego.position = {0.0, 0.0};
  s.ego.heading = 0.0;
  std::size_t longest = 0;
  for (const Vec2 far : {Vec2{100.0, 100.0}, Vec2{-100.0, 100.0}, Vec2{100.0, -100.0}, Vec2{-100.0, -100.0}}) {
    for (auto& h : s.history) h.position = far;  // clamped to -32.0 or 32.0
    longest = std::max(longest, prompt_tokens(s).size());
  }
  EXPECT_EQ(static_cast<int>(longest), LayoutConfig{}.max_prompt);
}

TEST(Policy, ZeroParamsGiveUniformLogits) {
  auto p = PolicyParams<double>::zeros(small_config());
  const auto s = generate_scene(5, Difficulty::easy);
  const auto seq = teacher_sequence(s, p.cfg.layout);
  const auto z = all_logits(p, scene_inputs(s), seq, kPhase2);
  for (int i = 0; i < z.rows(); ++i) EXPECT_EQ(z.row(i).maxCoeff(), z.row(i).minCoeff());
}

TEST(Policy, DuplicateScenesGiveIdenticalOutputs) {
  auto p = PolicyParams<float>::init(small_config(), 7);
  const auto s = generate_scene(6, Difficulty::hard);
  const auto in = scene_inputs(s);
  const auto seq = teacher_sequence(s, p.cfg.layout);
  EXPECT_EQ(all_logits(p, in, seq, kPhase1), all_logits(p, in, seq, kPhase1));
  const auto copy = scene_inputs(generate_scene(6, Difficulty::hard));
  EXPECT_EQ(all_logits(p, in, seq, kPhase2), all_logits(p, copy, seq, kPhase2));
}

TEST(Policy, ShapeMismatchIsConfigError) {
  auto p = PolicyParams<float>::init(small_config(), 1);
  auto in = inputs_for(8);
  const auto seq = sequence_prefix(in.prompt, p.cfg.layout);
  Tape<float> tape(false);
  SceneInputs bad = in;
  bad.patches = Eigen::MatrixXd::Zero(10, 192);
  EXPECT_THROW(forward(tape, p, bad, seq, kPhase1), ConfigError);
  LayoutConfig other;
  other.k_wm = 6;
  EXPECT_THROW(forward(tape, p, in, sequence_prefix(in.prompt, other), kPhase1), ConfigError);
}

// Perturbing one patch moves ACT logits in phase 1 only through the latent
// rows; pinning those rows makes the ACT logits bitwise invariant.
TEST(Policy, PinnedLatentsIsolateActionsFromPixelsInPhase1) {
  for (auto mode : {LatentInput::slots, LatentInput::feedback}) {
    auto p = PolicyParams<float>::init(small_config(mode), 11);
    const auto s = generate_scene(12, Difficulty::hard);
    const auto in = scene_inputs(s);
    const auto seq = teacher_sequence(s, p.cfg.layout);
    SceneInputs perturbed = in;
    perturbed.patches.row(20).array() += 0.75;
    const int a0 = seq.layout.act_begin;
    const int na = seq.size() - a0;

    ForwardTrace<float> trace;
    ForwardOptions<float> rec;
    rec.trace = &trace;
    const auto base = all_logits(p, in, seq, kPhase1, rec);
    const auto moved = all_logits(p, perturbed, seq, kPhase1);
    EXPECT_GT((base.bottomRows(na) - moved.bottomRows(na)).cwiseAbs().maxCoeff(), 0.0f);

    ForwardOptions<float> pin;
    pin.pin = &trace.layer_out;
    const auto pinned = all_logits(p, perturbed, seq, kPhase1, pin);
    EXPECT_TRUE(pinned.bottomRows(na) == base.bottomRows(na)) << to_string(mode);

    ForwardTrace<float> trace2;
    ForwardOptions<float> rec2;
    rec2.trace = &trace2;
    const auto base2 = all_logits(p, in, seq, kPhase2, rec2);
    ForwardOptions<float> pin2;
    pin2.pin = &trace2.layer_out;
    const auto pinned2 = all_logits(p, perturbed, seq, kPhase2, pin2);
    EXPECT_GT((pinned2.bottomRows(na) - base2.bottomRows(na)).cwiseAbs().maxCoeff(), 0.0f);
  }
}

TEST(Policy, Causality) {
  auto p = PolicyParams<float>::init(small_config(LatentInput::feedback), 13);
  const auto s = generate_scene(14, Difficulty::easy);
  const auto in = scene_inputs(s);
  const auto seq = teacher_sequence(s, p.cfg.layout);
  auto changed = seq;
  const int cut = seq.layout.act_begin + 5;
  for (int i = cut + 1; i < changed.size() - 1; ++i) changed.tokens[static_cast<std::size_t>(i)] = tok::digit0 + 7;
  const auto a = all_logits(p, in, seq, kPhase2);
  const auto b = all_logits(p, in, changed, kPhase2);
  EXPECT_TRUE(a.topRows(cut + 1) == b.topRows(cut + 1));
  EXPECT_FALSE(a.bottomRows(3) == b.bottomRows(3));
}

TEST(Policy, AttentionWeightsExactlyZeroWhereForbidden) {
  for (auto mode : {LatentInput::slots, LatentInput::feedback}) {
    auto p = PolicyParams<float>::init(small_config(mode), 15);
    p.for_each([](Parameter<float>& q) { q.value *= 20.0f; });
    const auto s = generate_scene(16, Difficulty::hard);
    const auto seq = teacher_sequence(s, p.cfg.layout);
    for (const auto& rule : {kPhase1, kPhase2}) {
      const BoolMatrix allow = build_mask(seq, rule);
      ForwardTrace<float> trace;
      ForwardOptions<float> opt;
      opt.trace = &trace;
      Tape<float> tape(false);
      forward(tape, p, scene_inputs(s), seq, rule, opt);
      std::set<int> layers;
      long checked = 0;
      for (const auto& rec : trace.attention) {
        layers.insert(rec.layer);
        ASSERT_EQ(rec.heads.size(), 4u);
        for (const auto& w : rec.heads) {
          for (int i = 0; i < w.rows(); ++i) {
            for (int j = 0; j < w.cols(); ++j) {
              if (!allow(rec.row0 + i, j)) {
                ASSERT_EQ(w(i, j), 0.0f);
                ++checked;
              }
            }
          }
        }
      }
      EXPECT_EQ(layers.size(), 2u);
      EXPECT_GT(checked, 0);
    }
  }
}

// The cached decoder and the tape forward compute the same function.
TEST(Decoder, MatchesTapeForward) {
  for (auto mode : {LatentInput::slots, LatentInput::feedback}) {
    auto p = PolicyParams<double>::init(small_config(mode), 17);
    const auto in = inputs_for(18);
    for (const auto& rule : {kPhase1, kPhase2}) {
      Rng rng(3);
      GenerateOptions opt;
      opt.temperature = 1.5;
      const auto g = generate(p, in, rule, opt, rng);
      ASSERT_FALSE(g.sampled_positions.empty());
      std::vector<int> rows;
      for (int pos : g.sampled_positions) rows.push_back(pos - 1);
      Tape<double> tape(false);
      auto out = forward(tape, p, in, g.sequence, rule);
      const auto lp = token_logprobs(out.logits(rows), [&] {
        std::vector<int> r(rows.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<int>(i);
        return r;
      }(), [&] {
        std::vector<int> ids;
        for (int pos : g.sampled_positions) ids.push_back(g.sequence.tokens[static_cast<std::size_t>(pos)]);
        return ids;
      }(), sampling_support(true), 1.5);
      for (std::size_t i = 0; i < g.logprobs.size(); ++i) {
        EXPECT_NEAR(lp.value()(static_cast<Eigen::Index>(i), 0), g.logprobs[i], 1e-10);
      }
      EXPECT_LT((out.h_dyn->value() - g.latent.h_dyn).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT((out.h_geo->value() - g.latent.h_geo).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Decoder, CopiedPrefillStateIsReusable) {
  auto p = PolicyParams<float>::init(small_config(), 19);
  const auto in = inputs_for(20);
  const auto prefix = sequence_prefix(in.prompt, p.cfg.layout);
  const Decoder<float> dec(p, kPhase2);
  const auto state = dec.prefill(in, prefix);
  GenerateOptions opt;
  opt.temperature = 2.0;
  Rng a(5), b(5);
  const auto g1 = generate_from(dec, state, prefix, opt, a);
  const auto g2 = generate_from(dec, state, prefix, opt, b);
  Rng c(5);
  const auto g3 = generate(p, in, kPhase2, opt, c);
  EXPECT_EQ(g1.sequence.tokens, g2.sequence.tokens);
  EXPECT_EQ(g1.sequence.tokens, g3.sequence.tokens);
  EXPECT_EQ(g1.logprobs, g3.logprobs);
}

TEST(Generate, LatentChainIndependentOfRngAndTemperature) {
  auto p = PolicyParams<float>::init(small_config(LatentInput::feedback), 21);
  const auto in = inputs_for(22);
  Rng r1(1), r2(999);
  GenerateOptions cold, hot;
  cold.temperature = 0.3;
  hot.temperature = 2.0;
  const auto g1 = generate(p, in, kPhase2, cold, r1);
  const auto g2 = generate(p, in, kPhase2, hot, r2);
  EXPECT_TRUE(g1.latent.h_dyn == g2.latent.h_dyn);
  EXPECT_TRUE(g1.latent.h_geo == g2.latent.h_geo);
  EXPECT_EQ(g1.latent.h_dyn.rows(), 36);
  EXPECT_EQ(g1.latent.h_geo.rows(), 12);
}

TEST(Generate, GreedyIsDeterministic) {
  auto p = PolicyParams<float>::init(small_config(), 23);
  const auto in = inputs_for(24);
  GenerateOptions opt;
  opt.greedy = true;
  Rng a(1), b(2);
  EXPECT_EQ(generate(p, in, kPhase2, opt, a).sequence.tokens, generate(p, in, kPhase2, opt, b).sequence.tokens);
}

TEST(Generate, GrammarForcingAlwaysGivesValidTags) {
  auto p = PolicyParams<float>::init(small_config(), 25);
  GenerateOptions opt;
  opt.temperature = 2.0;
  Rng rng(4);
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto g = generate(p, inputs_for(s), kPhase2, opt, rng);
    EXPECT_TRUE(validate_format(g.sequence.tokens).tags_ok);
    EXPECT_TRUE(g.closed);
    EXPECT_LE(static_cast<int>(g.sampled_positions.size()), 96);
    const auto alphabet = answer_alphabet();
    for (int pos : g.sampled_positions) {
      EXPECT_TRUE(alphabet[static_cast<std::size_t>(g.sequence.tokens[static_cast<std::size_t>(pos)])]);
    }
    for (double lp : g.logprobs) EXPECT_LE(lp, 0.0);
  }
}

TEST(Generate, RejectsNonPositiveTemperature) {
  auto p = PolicyParams<float>::init(small_config(), 26);
  GenerateOptions opt;
  opt.temperature = 0.0;
  Rng rng(1);
  EXPECT_THROW(generate(p, inputs_for(1), kPhase2, opt, rng), ConfigError);
}

TEST(Generate, HigherTemperatureHasHigherEntropy) {
  auto p = PolicyParams<float>::init(PolicyConfig{}, 27);
  double hot = 0.0, cold = 0.0;
  Rng rng(8);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto in = inputs_for(s, s % 2 ? Difficulty::hard : Difficulty::easy);
    GenerateOptions opt;
    opt.temperature = 2.0;
    hot += generate(p, in, kPhase2, opt, rng).mean_entropy();
    opt.temperature = 0.5;
    cold += generate(p, in, kPhase2, opt, rng).mean_entropy();
  }
  EXPECT_GT(hot, cold);
}

TEST(Plan, UntrainedPolicyFallsBack) {
  int fallbacks = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto p = PolicyParams<float>::init(small_config(), seed);
    const auto in = inputs_for(seed);
    const auto r = plan(p, in, kPhase2);
    if (r.fallback) {
      ++fallbacks;
      EXPECT_EQ(r.trajectory, fallback_trajectory(in.ego_speed));
    }
  }
  EXPECT_GE(fallbacks, 95);
}

TEST(Plan, OverfitOneSceneRecoversQuantizedGroundTruth) {
  auto p = PolicyParams<float>::init(small_config(), 29);
  const auto s = generate_scene(30, Difficulty::easy);
  const auto in = scene_inputs(s);
  const auto seq = teacher_sequence(s, p.cfg.layout);
  std::vector<int> rows, targets;
  for (int i = seq.layout.act_begin; i + 1 < seq.size(); ++i) {
    rows.push_back(i);
    targets.push_back(seq.tokens[static_cast<std::size_t>(i + 1)]);
  }
  std::vector<Parameter<float>*> params;
  p.for_each([&](Parameter<float>& q) { params.push_back(&q); });
  Adam<float> adam(params, AdamConfig{3e-3});
  for (int step = 0; step < 150; ++step) {
    adam.zero_grad();
    Tape<float> tape;
    auto out = forward(tape, p, in, seq, kPhase2);
    std::vector<int> local(rows.size());
    for (std::size_t i = 0; i < local.size(); ++i) local[i] = static_cast<int>(i);
    tape.backward(cross_entropy(out.logits(rows), local, targets));
    clip_grad_norm(params, 1.0);
    adam.step();
  }
  const auto r = plan(p, in, kPhase2);
  EXPECT_FALSE(r.fallback);
  EXPECT_EQ(r.trajectory, quantize(s.gt_trajectory));
}
