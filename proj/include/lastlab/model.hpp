#pragma once

// Policy plus training-only adapters, sized consistently from one config.

#include <vector>

#include "lastlab/adapters.hpp"
#include "lastlab/policy.hpp"

namespace lastlab {

struct ModelConfig {
  PolicyConfig policy;
  int adapter_hidden = 128;
  int adapter_heads = 4;
  int feature_dim = 32;

  AdapterConfig adapter() const {
    AdapterConfig a;
    a.d_model = policy.d_model;
    a.n_heads = adapter_heads;
    a.hidden = adapter_hidden;
    a.d_t = feature_dim;
    a.init_scale = policy.init_scale;
    return a;
  }

  OracleConfig oracle() const {
    OracleConfig o;
    o.k_3d = policy.layout.k_3d;
    o.k_wm = policy.layout.k_wm;
    o.feature_dim = feature_dim;
    return o;
  }

  void validate() const {
    policy.validate();
    adapter().validate();
    if (policy.layout.latent && policy.layout.wm_groups != OracleConfig::kHorizons) {
      throw ConfigError("model: wm_groups must equal the number of oracle horizons");
    }
  }
};

template <typename T>
struct Model {
  ModelConfig cfg;
  PolicyParams<T> policy;
  AdapterParams<T> adapters;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    return {cfg, PolicyParams<T>::init(cfg.policy, seed), AdapterParams<T>::init(cfg.adapter(), seed)};
  }

  static Model zeros(const ModelConfig& cfg) {
    cfg.validate();
    return {cfg, PolicyParams<T>::zeros(cfg.policy), AdapterParams<T>::zeros(cfg.adapter())};
  }

  template <typename F>
  void for_each(F&& f) {
    policy.for_each(f);
    adapters.for_each(f);
  }
  template <typename F>
  void for_each(F&& f) const {
    policy.for_each(f);
    adapters.for_each(f);
  }

  std::vector<Parameter<T>*> policy_parameters() {
    std::vector<Parameter<T>*> out;
    policy.for_each([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::vector<Parameter<T>*> all_parameters() {
    std::vector<Parameter<T>*> out;
    for_each([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  template <typename U>
  Model<U> cast() const {
    return {cfg, policy.template cast<U>(), adapters.template cast<U>()};
  }
};

}  // namespace lastlab
