#pragma once

// Versioned JSON checkpoints: every policy and adapter tensor as base64
// float32 (column-major), with the run config echoed beside its hash.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lastlab/config.hpp"
#include "lastlab/io.hpp"
#include "lastlab/model.hpp"

namespace lastlab {

inline constexpr const char* kCheckpointFormat = "lastlab-ckpt-v1";

struct CheckpointInfo {
  std::string config_hash;
  std::string stage;  // init, sft1, sft2 or rl
  std::string config;  // canonical config text
};

inline std::string checkpoint_json(const Model<float>& model, const RunConfig& cfg, const std::string& stage) {
  Json tensors = Json::array();
  model.for_each([&](const Parameter<float>& p) {
    const std::vector<float> v(p.value.data(), p.value.data() + p.value.size());
    tensors.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"data", encode_floats(v)}});
  });
  const Json j{{"format", kCheckpointFormat},
               {"config_hash", config_hash(cfg)},
               {"stage", stage},
               {"config", canonical_config(cfg)},
               {"tensors", tensors}};
  return j.dump() + "\n";
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const RunConfig& cfg,
                            const std::string& stage) {
  write_file_atomic(path, checkpoint_json(model, cfg, stage));
}

/// Parses a checkpoint into a model shaped by `cfg`. Every tensor must be
/// present with the configured shape.
inline Model<float> parse_checkpoint(const std::string& text, const RunConfig& cfg, CheckpointInfo* info = nullptr) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception&) {
    throw FormatError("checkpoint: not JSON");
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat) throw FormatError("checkpoint: unsupported format tag");
  auto model = Model<float>::zeros(cfg.model_config());
  std::map<std::string, const Json*> by_name;
  const Json& tensors = j.at("tensors");
  for (const auto& t : tensors) by_name[t.at("name").get<std::string>()] = &t;
  if (by_name.size() != tensors.size()) throw FormatError("checkpoint: duplicate tensor names");
  std::size_t used = 0;
  model.for_each([&](Parameter<float>& p) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + p.name);
    const Json& t = *it->second;
    if (t.at("shape").at(0).get<Eigen::Index>() != p.value.rows() || t.at("shape").at(1).get<Eigen::Index>() != p.value.cols()) {
      throw FormatError("checkpoint: shape mismatch for " + p.name);
    }
    const auto v = decode_floats(t.at("data").get<std::string>());
    if (static_cast<Eigen::Index>(v.size()) != p.value.size()) throw FormatError("checkpoint: payload size for " + p.name);
    std::copy(v.begin(), v.end(), p.value.data());
    ++used;
  });
  if (used != by_name.size()) throw FormatError("checkpoint: unexpected extra tensors");
  if (info != nullptr) {
    *info = {j.value("config_hash", ""), j.value("stage", ""), j.value("config", "")};
  }
  return model;
}

inline Model<float> load_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                                    CheckpointInfo* info = nullptr) {
  if (!std::filesystem::exists(path)) throw MissingArtifact("checkpoint not found: " + path.string());
  return parse_checkpoint(read_file(path), cfg, info);
}

}  // namespace lastlab
