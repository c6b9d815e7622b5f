#pragma once

// Dynamics and geometry adapters: one cross-attention block from latent
// states (queries) to masked visual embeddings (keys/values), then a 2-layer
// MLP into teacher-feature space. Training-only.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lastlab/autograd.hpp"
#include "lastlab/microworld.hpp"
#include "lastlab/rng.hpp"

namespace lastlab {

struct AdapterConfig {
  int d_model = 128;
  int n_heads = 4;
  int hidden = 128;
  int d_t = 32;
  double init_scale = 0.02;

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) throw ConfigError("adapter: heads must divide d_model");
    if (hidden < 1 || d_t < 1) throw ConfigError("adapter: hidden and d_t must be positive");
  }
};

template <typename T>
struct Adapter {
  Parameter<T> ln_g, ln_b, lnkv_g, lnkv_b, wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;

  template <typename F>
  void for_each(F&& f) {
    for (auto* p : {&ln_g, &ln_b, &lnkv_g, &lnkv_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &w1, &b1, &w2, &b2}) f(*p);
  }
};

template <typename T>
struct AdapterParams {
  AdapterConfig cfg;
  Adapter<T> geo, dyn;

  template <typename F>
  void for_each(F&& f) {
    geo.for_each(f);
    dyn.for_each(f);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<AdapterParams*>(this)->for_each([&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
  }

  void zero_grad() {
    for_each([](Parameter<T>& p) { p.zero_grad(); });
  }

  template <typename U>
  AdapterParams<U> cast() const {
    AdapterParams<U> out = AdapterParams<U>::zeros(cfg);
    std::vector<const Parameter<T>*> src;
    for_each([&](const Parameter<T>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.for_each([&](Parameter<U>& p) { p.value = src[i++]->value.template cast<U>(); });
    return out;
  }

  static AdapterParams zeros(const AdapterConfig& cfg) {
    cfg.validate();
    AdapterParams a;
    a.cfg = cfg;
    auto make_one = [&](const std::string& ns) {
      const int d = cfg.d_model;
      auto make = [&](const char* name, int r, int c) {
        Parameter<T> q;
        q.name = "adapters/" + ns + "/" + name;
        q.value = Matrix<T>::Zero(r, c);
        q.grad = Matrix<T>::Zero(r, c);
        return q;
      };
      return Adapter<T>{make("ln_g", 1, d), make("ln_b", 1, d), make("lnkv_g", 1, d), make("lnkv_b", 1, d),
                        make("wq", d, d), make("bq", 1, d),
                        make("wk", d, d),   make("bk", 1, d),   make("wv", d, d), make("bv", 1, d),
                        make("wo", d, d),   make("bo", 1, d),   make("w1", d, cfg.hidden), make("b1", 1, cfg.hidden),
                        make("w2", cfg.hidden, cfg.d_t), make("b2", 1, cfg.d_t)};
    };
    a.geo = make_one("geo");
    a.dyn = make_one("dyn");
    return a;
  }

  /// Fan-in scaled hidden weights and a zero output projection, so the
  /// initial prediction is exactly zero and the initial loss is the
  /// teacher's mean square.
  static AdapterParams init(const AdapterConfig& cfg, std::uint64_t seed) {
    AdapterParams a = zeros(cfg);
    Rng rng = Rng::derive(seed, 0x616461);
    a.for_each([&](Parameter<T>& p) {
      const auto& n = p.name;
      if (n.ends_with("_g")) {
        p.value.setOnes();
      } else if (n.find("/w") != std::string::npos && !n.ends_with("/w2")) {
        const double s = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(rng.normal() * s);
      }
    });
    return a;
  }
};

/// Row-keep vector: each patch survives independently with probability 1 - ratio.
inline std::vector<bool> visual_keep_rows(int n_rows, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("visual_mask: ratio must lie in [0, 1)");
  std::vector<bool> keep(static_cast<std::size_t>(n_rows));
  for (int i = 0; i < n_rows; ++i) keep[static_cast<std::size_t>(i)] = !(ratio > 0.0 && rng.uniform() < ratio);
  return keep;
}

template <typename T>
Matrix<T> keep_matrix(const std::vector<bool>& keep, Eigen::Index cols) {
  Matrix<T> m(static_cast<Eigen::Index>(keep.size()), cols);
  for (std::size_t i = 0; i < keep.size(); ++i) m.row(static_cast<Eigen::Index>(i)).setConstant(keep[i] ? T(1) : T(0));
  return m;
}

/// Whole-row zeroing of patch embeddings; survivors are not rescaled.
template <typename T>
Var<T> visual_mask(const Var<T>& e_img, double ratio, Rng& rng) {
  const auto keep = visual_keep_rows(static_cast<int>(e_img.rows()), ratio, rng);
  return hadamard_const(e_img, keep_matrix<T>(keep, e_img.cols()));
}

template <typename T>
Matrix<T> visual_mask(const Matrix<T>& e_img, double ratio, Rng& rng) {
  const auto keep = visual_keep_rows(static_cast<int>(e_img.rows()), ratio, rng);
  return e_img.cwiseProduct(keep_matrix<T>(keep, e_img.cols()));
}

namespace detail {

template <typename T>
Var<T> apply_adapter(Tape<T>& tape, Adapter<T>& a, const AdapterConfig& cfg, const Var<T>& h, const Var<T>& e,
                     bool trainable) {
  if (h.cols() != cfg.d_model || e.cols() != cfg.d_model) throw ConfigError("adapter: input width differs from d_model");
  if (e.rows() < 1) throw ConfigError("adapter: no visual embeddings");
  auto P = [&](Parameter<T>& p) { return tape.param(p, trainable); };
  const Var<T> hq = layer_norm(h, P(a.ln_g), P(a.ln_b));
  const Var<T> q = linear(hq, P(a.wq), P(a.bq));
  const Var<T> ek = layer_norm(e, P(a.lnkv_g), P(a.lnkv_b));
  const Var<T> k = linear(ek, P(a.wk), P(a.bk));
  const Var<T> v = linear(ek, P(a.wv), P(a.bv));
  const Var<T> z = add(h, linear(attention(q, k, v, cfg.n_heads, BoolMatrix()), P(a.wo), P(a.bo)));
  return linear(gelu(linear(z, P(a.w1), P(a.b1))), P(a.w2), P(a.b2));
}

}  // namespace detail

/// Phi_geo: one output row per geometry slot.
template <typename T>
Var<T> geometry_adapter(Tape<T>& tape, const Var<T>& h_geo, const Var<T>& e_masked, AdapterParams<T>& params,
                        bool trainable = true) {
  return detail::apply_adapter(tape, params.geo, params.cfg, h_geo, e_masked, trainable);
}

/// Phi_dyn over all horizon groups at once. Cross-attention queries do not
/// interact, so this equals applying the shared block to each group.
template <typename T>
Var<T> dynamics_adapter(Tape<T>& tape, const Var<T>& h_dyn, const Var<T>& e_masked, AdapterParams<T>& params,
                        int groups = OracleConfig::kHorizons, bool trainable = true) {
  if (groups < 1 || h_dyn.rows() % groups != 0) throw ConfigError("dynamics_adapter: rows not divisible by groups");
  return detail::apply_adapter(tape, params.dyn, params.cfg, h_dyn, e_masked, trainable);
}

template <typename T>
struct AlignmentLosses {
  Var<T> l_3d;
  Var<T> l_wm;
};

/// Mean-squared error against the teacher features, averaged over elements.
template <typename T>
AlignmentLosses<T> alignment_losses(const Var<T>& p_geo, const Var<T>& p_dyn, const TeacherFeatures& teacher) {
  if (p_geo.rows() != teacher.f_geo.rows() || p_geo.cols() != teacher.f_geo.cols()) {
    throw ConfigError("alignment_losses: p_geo shape differs from teacher");
  }
  if (p_dyn.rows() != teacher.f_dyn.rows() || p_dyn.cols() != teacher.f_dyn.cols()) {
    throw ConfigError("alignment_losses: p_dyn shape differs from teacher");
  }
  return {mse(p_geo, Matrix<T>(teacher.f_geo.cast<T>())), mse(p_dyn, Matrix<T>(teacher.f_dyn.cast<T>()))};
}

}  // namespace lastlab
