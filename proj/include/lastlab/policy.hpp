#pragma once

// Autoregressive policy: a pre-LN transformer over the interleaved
// TXT | IMG | WM | GEO | ACT sequence with a tied output head.
//
// Two execution paths share one parameter set:
//   forward()  - tape-recorded, used for training and log-prob evaluation;
//   Decoder    - plain matrices with a key/value cache, used for sampling.
// Both process the sequence in chunks. With slot inputs the whole sequence is
// one chunk; with feedback inputs every latent slot is its own chunk whose
// input adds the final hidden state of the preceding position.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lastlab/autograd.hpp"
#include "lastlab/layout.hpp"
#include "lastlab/microworld.hpp"
#include "lastlab/rng.hpp"
#include "lastlab/tokenizer.hpp"

namespace lastlab {

enum class LatentInput { slots, feedback };

inline const char* to_string(LatentInput l) { return l == LatentInput::slots ? "slots" : "feedback"; }

struct PolicyConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 4;
  int mlp_ratio = 4;
  int vocab = tok::kVocabSize;
  int patch_dim = 192;
  int max_positions = 272;
  double init_scale = 0.02;
  LatentInput latent_input = LatentInput::slots;
  LayoutConfig layout;

  int n_slots() const { return layout.latent ? layout.k_wm * layout.wm_groups + layout.k_3d : 0; }

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) throw ConfigError("policy: heads must divide d_model");
    if (n_layers < 1 || mlp_ratio < 1) throw ConfigError("policy: n_layers and mlp_ratio must be positive");
    if (vocab != tok::kVocabSize) throw ConfigError("policy: vocab size must match the tokenizer");
    if (max_positions < 1) throw ConfigError("policy: max_positions must be positive");
  }
};

template <typename T>
struct TransformerBlock {
  Parameter<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;

  template <typename F>
  void for_each(F&& f) {
    for (auto* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &w1, &b1, &w2, &b2}) f(*p);
  }
};

template <typename T>
struct PolicyParams {
  PolicyConfig cfg;
  Parameter<T> patch_w, patch_b, patch_pos, tok_emb, pos_emb, slot_emb, field_emb, lnf_g, lnf_b;
  std::vector<TransformerBlock<T>> blocks;

  template <typename F>
  void for_each(F&& f) {
    for (auto* p : {&patch_w, &patch_b, &patch_pos, &tok_emb, &pos_emb, &slot_emb, &field_emb}) f(*p);
    for (auto& b : blocks) b.for_each(f);
    f(lnf_g);
    f(lnf_b);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<PolicyParams*>(this)->for_each([&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const Parameter<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  void zero_grad() {
    for_each([](Parameter<T>& p) { p.zero_grad(); });
  }

  template <typename U>
  PolicyParams<U> cast() const {
    PolicyParams<U> out = PolicyParams<U>::zeros(cfg);
    std::vector<const Parameter<T>*> src;
    for_each([&](const Parameter<T>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.for_each([&](Parameter<U>& p) { p.value = src[i++]->value.template cast<U>(); });
    return out;
  }

  /// All-zero parameters with the configured shapes.
  static PolicyParams zeros(const PolicyConfig& cfg) {
    cfg.validate();
    PolicyParams p;
    p.cfg = cfg;
    const int d = cfg.d_model, h = cfg.d_model * cfg.mlp_ratio;
    auto make = [](const std::string& name, int r, int c) {
      Parameter<T> q;
      q.name = name;
      q.value = Matrix<T>::Zero(r, c);
      q.grad = Matrix<T>::Zero(r, c);
      return q;
    };
    p.patch_w = make("policy/patch_w", cfg.patch_dim, d);
    p.patch_b = make("policy/patch_b", 1, d);
    p.patch_pos = make("policy/patch_pos", cfg.layout.n_patches, d);
    p.tok_emb = make("policy/tok_emb", cfg.vocab, d);
    p.pos_emb = make("policy/pos_emb", cfg.max_positions, d);
    p.slot_emb = make("policy/slot_emb", std::max(cfg.n_slots(), 1), d);
    p.field_emb = make("policy/field_emb", kAnswerFields, d);
    p.lnf_g = make("policy/lnf_g", 1, d);
    p.lnf_b = make("policy/lnf_b", 1, d);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string b = "policy/block" + std::to_string(l) + "/";
      TransformerBlock<T> t{make(b + "ln1_g", 1, d), make(b + "ln1_b", 1, d), make(b + "wq", d, d), make(b + "bq", 1, d),
                            make(b + "wk", d, d),    make(b + "bk", 1, d),    make(b + "wv", d, d), make(b + "bv", 1, d),
                            make(b + "wo", d, d),    make(b + "bo", 1, d),    make(b + "ln2_g", 1, d),
                            make(b + "ln2_b", 1, d), make(b + "w1", d, h),    make(b + "b1", 1, h), make(b + "w2", h, d),
                            make(b + "b2", 1, d)};
      p.blocks.push_back(std::move(t));
    }
    return p;
  }

  /// Gaussian weights, unit LayerNorm gains, zero biases. Residual output
  /// projections are scaled down by sqrt(2 * n_layers).
  static PolicyParams init(const PolicyConfig& cfg, std::uint64_t seed) {
    PolicyParams p = zeros(cfg);
    Rng rng = Rng::derive(seed, 0x706f6c);
    const T s = static_cast<T>(cfg.init_scale);
    const T s_out = static_cast<T>(cfg.init_scale / std::sqrt(2.0 * cfg.n_layers));
    auto fill = [&](Parameter<T>& q, T scale) {
      for (Eigen::Index i = 0; i < q.value.size(); ++i) q.value.data()[i] = static_cast<T>(rng.normal()) * scale;
    };
    fill(p.patch_w, s);
    fill(p.patch_pos, s);
    fill(p.tok_emb, s);
    fill(p.pos_emb, s);
    fill(p.slot_emb, s);
    fill(p.field_emb, s);
    p.lnf_g.value.setOnes();
    for (auto& b : p.blocks) {
      fill(b.wq, s);
      fill(b.wk, s);
      fill(b.wv, s);
      fill(b.wo, s_out);
      fill(b.w1, s);
      fill(b.w2, s_out);
      b.ln1_g.value.setOnes();
      b.ln2_g.value.setOnes();
    }
    return p;
  }
};

/// Everything the policy observes about a scene.
struct SceneInputs {
  std::vector<int> prompt;
  Eigen::MatrixXd patches;  // n_patches x patch_dim
  double ego_speed = 0.0;
};

inline SceneInputs scene_inputs(const SceneRecord& scene) {
  return {prompt_tokens(scene), patchify(rasterize(scene, 0.0)), scene.ego.velocity};
}

template <typename T>
struct LatentChain {
  Matrix<T> h_dyn;  // (wm_groups * k_wm) x d, horizon-major
  Matrix<T> h_geo;  // k_3d x d
};

// ---------------------------------------------------------------------------
// Tape forward
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionRecord {
  int layer = 0;
  int row0 = 0;  // first query position of the chunk
  std::vector<Matrix<T>> heads;
};

template <typename T>
struct ForwardTrace {
  std::vector<Matrix<T>> layer_out;  // residual stream after each block
  std::vector<AttentionRecord<T>> attention;
};

template <typename T>
struct ForwardOptions {
  ForwardTrace<T>* trace = nullptr;
  /// Per-layer residual streams imposed at WM/GEO positions (tags included).
  const std::vector<Matrix<T>>* pin = nullptr;
  bool trainable = true;
};

template <typename T>
struct ForwardOutput {
  Var<T> hidden;   // L x d after the final LayerNorm
  Var<T> e_img;    // patch input embeddings including positions
  Var<T> tok_emb;  // tied output head
  std::optional<Var<T>> h_dyn;
  std::optional<Var<T>> h_geo;

  /// Next-token logits read from the listed positions.
  Var<T> logits(std::vector<int> rows) const { return matmul_nt(gather_rows(hidden, std::move(rows)), tok_emb); }
};

namespace detail {

inline void check_inputs(const PolicyConfig& cfg, const SceneInputs& in, const TokenSequence& seq) {
  const auto& l = seq.layout;
  if (in.patches.rows() != l.img_len || in.patches.cols() != cfg.patch_dim) {
    throw ConfigError("policy: patch matrix does not match the layout");
  }
  if (static_cast<int>(in.prompt.size()) != l.txt_len) throw ConfigError("policy: prompt does not match the layout");
  if (l.latent != cfg.layout.latent || (l.latent && (l.k_wm != cfg.layout.k_wm || l.k_3d != cfg.layout.k_3d ||
                                                     l.wm_groups != cfg.layout.wm_groups))) {
    throw ConfigError("policy: sequence layout does not match the configuration");
  }
  if (seq.size() + seq.layout.pos_offset > cfg.max_positions) {
    throw ConfigError("policy: sequence longer than max_positions");
  }
  if (seq.size() <= l.act_begin) throw ConfigError("policy: sequence ends before <answer>");
  for (int i = 0; i < l.txt_len; ++i) {
    if (seq.tokens[static_cast<std::size_t>(i)] != in.prompt[static_cast<std::size_t>(i)]) {
      throw ConfigError("policy: sequence prompt differs from scene inputs");
    }
  }
}

/// Chunk boundaries: every latent slot alone in feedback mode, one chunk otherwise.
inline std::vector<std::pair<int, int>> chunks(const SequenceLayout& l, int begin, int end, LatentInput mode) {
  std::vector<std::pair<int, int>> out;
  if (mode == LatentInput::slots) {
    if (end > begin) out.emplace_back(begin, end);
    return out;
  }
  int start = begin;
  for (int p = begin; p < end; ++p) {
    if (l.is_slot(p)) {
      if (p > start) out.emplace_back(start, p);
      out.emplace_back(p, p + 1);
      start = p + 1;
    }
  }
  if (end > start) out.emplace_back(start, end);
  return out;
}

}  // namespace detail

template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, PolicyParams<T>& params, const SceneInputs& in, const TokenSequence& seq,
                         const MaskRule& rule, const ForwardOptions<T>& opt = {}) {
  const PolicyConfig& cfg = params.cfg;
  detail::check_inputs(cfg, in, seq);
  const SequenceLayout& lay = seq.layout;
  const int L = seq.size();
  const int d = cfg.d_model;
  const BoolMatrix allow = build_mask(seq, rule);

  auto P = [&](Parameter<T>& p) { return tape.param(p, opt.trainable); };
  const Var<T> tok = P(params.tok_emb);
  const Var<T> pos = P(params.pos_emb);

  // Input embeddings, assembled segment by segment.
  std::vector<Var<T>> pieces;
  auto tokens_in = [&](int b, int e) {
    if (e > b) pieces.push_back(gather_rows(tok, std::vector<int>(seq.tokens.begin() + b, seq.tokens.begin() + e)));
  };
  tokens_in(0, lay.txt_len);
  const Var<T> patches = tape.constant(in.patches.cast<T>());
  pieces.push_back(add(linear(patches, P(params.patch_w), P(params.patch_b)), P(params.patch_pos)));
  if (lay.latent) {
    const Var<T> slots = P(params.slot_emb);
    std::vector<int> wm_ids(static_cast<std::size_t>(lay.n_wm_slots())), geo_ids(static_cast<std::size_t>(lay.n_geo_slots()));
    for (int i = 0; i < lay.n_wm_slots(); ++i) wm_ids[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < lay.n_geo_slots(); ++i) geo_ids[static_cast<std::size_t>(i)] = lay.n_wm_slots() + i;
    tokens_in(lay.wm_begin, lay.wm_begin + 1);
    pieces.push_back(gather_rows(slots, wm_ids));
    tokens_in(lay.wm_begin + lay.wm_len - 1, lay.geo_begin + 1);
    pieces.push_back(gather_rows(slots, geo_ids));
    tokens_in(lay.geo_begin + lay.geo_len - 1, lay.act_begin);
  }
  if (L > lay.act_begin) {
    std::vector<int> fields;
    int field = 0;
    for (int i = lay.act_begin; i < L; ++i) {
      field = next_answer_field(field, seq.tokens[static_cast<std::size_t>(i)]);
      fields.push_back(field);
    }
    pieces.push_back(add(gather_rows(tok, std::vector<int>(seq.tokens.begin() + lay.act_begin, seq.tokens.end())),
                         gather_rows(P(params.field_emb), fields)));
  }
  const Var<T> x_in = add(concat_rows<T>(pieces), slice_rows(pos, lay.pos_offset, L));
  const Var<T> e_img = slice_rows(x_in, lay.img_begin, lay.img_len);

  struct BoundBlock {
    Var<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<BoundBlock> bb;
  for (auto& b : params.blocks) {
    bb.push_back({P(b.ln1_g), P(b.ln1_b), P(b.wq), P(b.bq), P(b.wk), P(b.bk), P(b.wv), P(b.bv), P(b.wo), P(b.bo),
                  P(b.ln2_g), P(b.ln2_b), P(b.w1), P(b.b1), P(b.w2), P(b.b2)});
  }
  const Var<T> lnf_g = P(params.lnf_g), lnf_b = P(params.lnf_b);

  std::vector<int> pin_rows_all;
  if (opt.pin != nullptr) {
    if (static_cast<int>(opt.pin->size()) != cfg.n_layers) throw ConfigError("forward: pin needs one matrix per layer");
    for (int p = 0; p < L; ++p) {
      const Segment s = lay.segment_at(p);
      if (s == Segment::wm || s == Segment::geo) pin_rows_all.push_back(p);
    }
  }
  if (opt.trace != nullptr) {
    opt.trace->layer_out.assign(static_cast<std::size_t>(cfg.n_layers), Matrix<T>(L, d));
    opt.trace->attention.clear();
  }

  std::vector<std::optional<Var<T>>> kc(static_cast<std::size_t>(cfg.n_layers)), vc(kc.size());
  std::vector<Var<T>> outputs;
  for (const auto& [r0, r1] : detail::chunks(lay, 0, L, cfg.latent_input)) {
    const int n = r1 - r0;
    Var<T> x = slice_rows(x_in, r0, n);
    if (cfg.latent_input == LatentInput::feedback && lay.is_slot(r0) && !outputs.empty()) {
      const Var<T>& prev = outputs.back();
      x = add(x, slice_rows(prev, prev.rows() - 1, 1));
    }
    const BoolMatrix block = allow.block(r0, 0, n, r1);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const BoundBlock& b = bb[static_cast<std::size_t>(l)];
      const Var<T> h = layer_norm(x, b.ln1_g, b.ln1_b);
      const Var<T> q = linear(h, b.wq, b.bq);
      const Var<T> k = linear(h, b.wk, b.bk);
      const Var<T> v = linear(h, b.wv, b.bv);
      auto& K = kc[static_cast<std::size_t>(l)];
      auto& V = vc[static_cast<std::size_t>(l)];
      K = K ? concat_rows<T>({*K, k}) : k;
      V = V ? concat_rows<T>({*V, v}) : v;
      std::vector<Matrix<T>> weights;
      const Var<T> a = attention(q, *K, *V, cfg.n_heads, block, opt.trace ? &weights : nullptr);
      x = add(x, linear(a, b.wo, b.bo));
      const Var<T> h2 = layer_norm(x, b.ln2_g, b.ln2_b);
      x = add(x, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
      if (opt.pin != nullptr) {
        std::vector<int> rows;
        std::vector<int> src;
        for (int p : pin_rows_all) {
          if (p >= r0 && p < r1) {
            rows.push_back(p - r0);
            src.push_back(p);
          }
        }
        if (!rows.empty()) {
          const Matrix<T>& pin = (*opt.pin)[static_cast<std::size_t>(l)];
          Matrix<T> vals(static_cast<Eigen::Index>(rows.size()), d);
          for (std::size_t i = 0; i < rows.size(); ++i) vals.row(static_cast<Eigen::Index>(i)) = pin.row(src[i]);
          x = override_rows(x, rows, vals);
        }
      }
      if (opt.trace != nullptr) {
        opt.trace->layer_out[static_cast<std::size_t>(l)].middleRows(r0, n) = x.value();
        opt.trace->attention.push_back({l, r0, std::move(weights)});
      }
    }
    outputs.push_back(layer_norm(x, lnf_g, lnf_b));
  }

  ForwardOutput<T> out{outputs.size() == 1 ? outputs.front() : concat_rows<T>(outputs), e_img, tok, {}, {}};
  if (lay.latent) {
    out.h_dyn = slice_rows(out.hidden, lay.wm_slot_begin(), lay.n_wm_slots());
    out.h_geo = slice_rows(out.hidden, lay.geo_slot_begin(), lay.n_geo_slots());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cached decoder
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, T eps = T(1e-5)) {
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mean = x.row(i).mean();
    const auto c = (x.row(i).array() - mean).matrix();
    const T inv = T(1) / std::sqrt(c.squaredNorm() / T(x.cols()) + eps);
    out.row(i) = (c.array() * inv * g.row(0).array() + b.row(0).array()).matrix();
  }
  return out;
}

template <typename T>
Matrix<T> gelu_plain(const Matrix<T>& x) {
  constexpr T c = T(0.7978845608028654);
  constexpr T k = T(0.044715);
  return (T(0.5) * x.array() * (T(1) + (c * (x.array() + k * x.array().cube())).tanh())).matrix();
}

}  // namespace detail

/// Key/value-cached inference path over plain matrices.
template <typename T>
class Decoder {
 public:
  struct State {
    SequenceLayout layout;
    std::vector<Matrix<T>> k, v;  // per layer, max_positions x d
    std::vector<Segment> segments;
    int length = 0;
    int field = 0;  // answer field of the last position
    Matrix<T> last_hidden;  // 1 x d, final LayerNorm output at the last position
    Matrix<T> slot_hidden;  // n_slots x d
  };

  Decoder(const PolicyParams<T>& params, const MaskRule& rule) : p_(params), rule_(rule) {}

  /// Runs prompt, image, latent blocks and <answer>.
  State prefill(const SceneInputs& in, const TokenSequence& prefix) const {
    const PolicyConfig& cfg = p_.cfg;
    detail::check_inputs(cfg, in, prefix);
    State s;
    s.layout = prefix.layout;
    const SequenceLayout& layout_ = s.layout;
    const int d = cfg.d_model;
    s.k.assign(static_cast<std::size_t>(cfg.n_layers), Matrix<T>::Zero(cfg.max_positions, d));
    s.v = s.k;
    s.slot_hidden = Matrix<T>::Zero(std::max(cfg.n_slots(), 1), d);
    const int L = prefix.size();
    const Matrix<T> patch_emb =
        ((in.patches.cast<T>() * p_.patch_w.value).rowwise() + p_.patch_b.value.row(0)) + p_.patch_pos.value;
    Matrix<T> x(L, d);
    for (int pos = 0; pos < L; ++pos) {
      const Segment seg = layout_.segment_at(pos);
      if (seg == Segment::img) {
        x.row(pos) = patch_emb.row(pos - layout_.img_begin);
      } else if (layout_.is_slot(pos)) {
        x.row(pos) = p_.slot_emb.value.row(layout_.slot_index(pos));
      } else {
        x.row(pos) = p_.tok_emb.value.row(prefix.tokens[static_cast<std::size_t>(pos)]);
      }
      if (seg == Segment::act) {
        s.field = next_answer_field(s.field, prefix.tokens[static_cast<std::size_t>(pos)]);
        x.row(pos) += p_.field_emb.value.row(s.field);
      }
      x.row(pos) += p_.pos_emb.value.row(pos + layout_.pos_offset);
    }
    for (const auto& [r0, r1] : detail::chunks(layout_, 0, L, cfg.latent_input)) {
      Matrix<T> xc = x.middleRows(r0, r1 - r0);
      if (cfg.latent_input == LatentInput::feedback && layout_.is_slot(r0) && s.length > 0) xc.row(0) += s.last_hidden.row(0);
      const Matrix<T> h = feed(s, xc);
      for (int pos = r0; pos < r1; ++pos) {
        if (layout_.is_slot(pos)) s.slot_hidden.row(layout_.slot_index(pos)) = h.row(pos - r0);
      }
    }
    return s;
  }

  /// Appends one discrete token at the next position.
  void step(State& s, int token) const {
    if (s.length + s.layout.pos_offset >= p_.cfg.max_positions) {
      throw ConfigError("decoder: sequence longer than max_positions");
    }
    s.field = next_answer_field(s.field, token);
    Matrix<T> x = p_.tok_emb.value.row(token) + p_.field_emb.value.row(s.field) +
                  p_.pos_emb.value.row(s.length + s.layout.pos_offset);
    feed(s, x);
  }

  /// Next-token logits after the last position.
  Matrix<T> logits(const State& s) const { return s.last_hidden * p_.tok_emb.value.transpose(); }

  LatentChain<T> latent_chain(const State& s) const {
    const int nw = s.layout.n_wm_slots();
    return {s.slot_hidden.topRows(nw), s.slot_hidden.middleRows(nw, s.layout.n_geo_slots())};
  }

 private:
  /// Processes n new rows of input embeddings; returns their final hidden states.
  Matrix<T> feed(State& s, const Matrix<T>& x_in) const {
    const PolicyConfig& cfg = p_.cfg;
    const int n = static_cast<int>(x_in.rows());
    const int r0 = s.length;
    const int r1 = r0 + n;
    const int d = cfg.d_model, nh = cfg.n_heads, dh = d / nh;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    const SequenceLayout& layout_ = s.layout;
    for (int pos = r0; pos < r1; ++pos) s.segments.push_back(layout_.segment_at(pos));
    Matrix<T> x = x_in;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& b = p_.blocks[static_cast<std::size_t>(l)];
      const Matrix<T> h = detail::layer_norm_rows(x, b.ln1_g.value, b.ln1_b.value);
      const Matrix<T> q = (h * b.wq.value).rowwise() + b.bq.value.row(0);
      s.k[static_cast<std::size_t>(l)].middleRows(r0, n) = (h * b.wk.value).rowwise() + b.bk.value.row(0);
      s.v[static_cast<std::size_t>(l)].middleRows(r0, n) = (h * b.wv.value).rowwise() + b.bv.value.row(0);
      const auto K = s.k[static_cast<std::size_t>(l)].topRows(r1);
      const auto V = s.v[static_cast<std::size_t>(l)].topRows(r1);
      Matrix<T> a(n, d);
      for (int hd = 0; hd < nh; ++hd) {
        Matrix<T> sc = q.middleCols(hd * dh, dh) * K.middleCols(hd * dh, dh).transpose();
        sc *= inv_sqrt;
        for (int i = 0; i < n; ++i) {
          const Segment qs = s.segments[static_cast<std::size_t>(r0 + i)];
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j < r1; ++j) {
            const bool ok = j <= r0 + i && segment_visible(layout_, rule_, qs, s.segments[static_cast<std::size_t>(j)]);
            if (!ok) {
              sc(i, j) = -std::numeric_limits<T>::infinity();
            } else {
              mx = std::max(mx, sc(i, j));
            }
          }
          sc.row(i) = (sc.row(i).array() - mx).exp().matrix();
          sc.row(i) /= sc.row(i).sum();
        }
        a.middleCols(hd * dh, dh).noalias() = sc * V.middleCols(hd * dh, dh);
      }
      x += (a * b.wo.value).rowwise() + b.bo.value.row(0);
      const Matrix<T> h2 = detail::layer_norm_rows(x, b.ln2_g.value, b.ln2_b.value);
      const Matrix<T> m = detail::gelu_plain<T>((h2 * b.w1.value).rowwise() + b.b1.value.row(0));
      x += (m * b.w2.value).rowwise() + b.b2.value.row(0);
    }
    const Matrix<T> out = detail::layer_norm_rows(x, p_.lnf_g.value, p_.lnf_b.value);
    s.last_hidden = out.bottomRows(1);
    s.length = r1;
    return out;
  }

  const PolicyParams<T>& p_;
  MaskRule rule_;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerateOptions {
  double temperature = 1.0;
  bool greedy = false;
  bool grammar_forcing = true;  // answer alphabet only; </answer> forced at the length cap
};

template <typename T>
struct Generation {
  TokenSequence sequence;
  std::vector<int> sampled_positions;  // sequence positions of sampled tokens
  std::vector<double> logprobs;        // under the tempered sampling distribution
  std::vector<double> entropies;
  bool closed = false;                 // </answer> was emitted or forced
  bool forced_close = false;
  LatentChain<T> latent;

  double mean_entropy() const {
    if (entropies.empty()) return 0.0;
    double s = 0.0;
    for (double e : entropies) s += e;
    return s / static_cast<double>(entropies.size());
  }
};

/// Vocabulary mask for sampled answer positions.
inline std::vector<bool> sampling_support(bool grammar_forcing) {
  return grammar_forcing ? answer_alphabet() : std::vector<bool>(tok::kVocabSize, true);
}

/// Continues a prefilled decoder state (consumed) through the answer segment.
template <typename T>
Generation<T> generate_from(const Decoder<T>& dec, typename Decoder<T>::State state, const TokenSequence& prefix,
                            const GenerateOptions& opt, Rng& rng) {
  if (!(opt.temperature > 0.0)) throw ConfigError("generate: temperature must be positive");
  Generation<T> g;
  g.sequence = prefix;
  g.latent = dec.latent_chain(state);
  const std::vector<bool> support = sampling_support(opt.grammar_forcing);
  const int cap = prefix.layout.max_answer;
  std::vector<double> z(tok::kVocabSize), p(tok::kVocabSize);
  for (int n = 0;; ++n) {
    if (n == cap) {
      if (opt.grammar_forcing) {
        g.sequence.tokens.push_back(tok::answer_end);
        g.closed = g.forced_close = true;
      }
      break;
    }
    const Matrix<T> lg = dec.logits(state);
    double mx = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < tok::kVocabSize; ++v) {
      z[static_cast<std::size_t>(v)] = static_cast<double>(lg(0, v)) / opt.temperature;
      if (support[static_cast<std::size_t>(v)]) mx = std::max(mx, z[static_cast<std::size_t>(v)]);
    }
    double sum = 0.0;
    for (int v = 0; v < tok::kVocabSize; ++v) {
      p[static_cast<std::size_t>(v)] = support[static_cast<std::size_t>(v)] ? std::exp(z[static_cast<std::size_t>(v)] - mx) : 0.0;
      sum += p[static_cast<std::size_t>(v)];
    }
    double entropy = 0.0;
    for (auto& pv : p) {
      pv /= sum;
      if (pv > 0.0) entropy -= pv * std::log(pv);
    }
    int chosen = -1;
    if (opt.greedy) {
      double best = -1.0;
      for (int v = 0; v < tok::kVocabSize; ++v) {
        if (support[static_cast<std::size_t>(v)] && p[static_cast<std::size_t>(v)] > best) {
          best = p[static_cast<std::size_t>(v)];
          chosen = v;
        }
      }
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      for (int v = 0; v < tok::kVocabSize; ++v) {
        if (!support[static_cast<std::size_t>(v)]) continue;
        acc += p[static_cast<std::size_t>(v)];
        chosen = v;
        if (u < acc) break;
      }
    }
    g.sampled_positions.push_back(g.sequence.size());
    g.sequence.tokens.push_back(chosen);
    g.logprobs.push_back(z[static_cast<std::size_t>(chosen)] - mx - std::log(sum));
    g.entropies.push_back(entropy);
    if (chosen == tok::answer_end) {
      g.closed = true;
      break;
    }
    dec.step(state, chosen);
  }
  return g;
}

template <typename T>
Generation<T> generate(const PolicyParams<T>& params, const SceneInputs& in, const MaskRule& rule,
                       const GenerateOptions& opt, Rng& rng) {
  const TokenSequence prefix = sequence_prefix(in.prompt, params.cfg.layout);
  const Decoder<T> dec(params, rule);
  auto state = dec.prefill(in, prefix);
  return generate_from(dec, std::move(state), prefix, opt, rng);
}

/// Constant-velocity straight-ahead trajectory used when decoding fails.
inline Trajectory fallback_trajectory(double speed) {
  Trajectory t;
  for (int k = 0; k < kHorizonSteps; ++k) {
    t.waypoints[static_cast<std::size_t>(k)] = {0.0, std::min(speed * kWaypointDt * (k + 1), kTrajectoryLimit)};
  }
  return t;
}

struct PlanResult {
  Trajectory trajectory;
  bool fallback = false;
  std::vector<int> answer;
};

/// Greedy decode then parse; unparseable output falls back to constant velocity.
template <typename T>
PlanResult plan(const PolicyParams<T>& params, const SceneInputs& in, const MaskRule& rule) {
  Rng unused(0);
  GenerateOptions opt;
  opt.greedy = true;
  const auto g = generate(params, in, rule, opt, unused);
  PlanResult r;
  const auto answer = g.sequence.answer();
  r.answer.assign(answer.begin(), answer.end());
  const auto parsed = try_parse_trajectory(answer);
  if (parsed.ok()) {
    r.trajectory = parsed.trajectory;
  } else {
    r.trajectory = fallback_trajectory(in.ego_speed);
    r.fallback = true;
  }
  return r;
}

}  // namespace lastlab
