#pragma once

// Serialization helpers: base64 tensors, scene datasets (JSONL) and
// deterministic CSV logs.

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lastlab/errors.hpp"
#include "lastlab/microworld.hpp"
#include "lastlab/scene.hpp"

namespace lastlab {

using Json = nlohmann::json;

inline constexpr const char* kDatasetFormat = "lastlab-scene-v1";

// ---------------------------------------------------------------------------
// Base64
// ---------------------------------------------------------------------------

inline std::string base64_encode(const std::string& bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::string::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

inline std::string base64_decode(const std::string& text) {
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  if (text.size() % 4 != 0) throw FormatError("base64: length is not a multiple of 4");
  const std::size_t pad = text.size() >= 2 && text[text.size() - 1] == '=' ? (text[text.size() - 2] == '=' ? 2 : 1) : 0;
  std::string body = text;
  for (std::size_t i = body.size() - pad; i < body.size(); ++i) body[i] = 'A';
  try {
    std::string out(It(body.begin()), It(body.end()));
    out.resize(out.size() - pad);
    return out;
  } catch (const std::exception&) {
    throw FormatError("base64: invalid character");
  }
}

/// Little-endian float32 payload (the build targets little-endian hosts).
inline std::string encode_floats(const std::vector<float>& v) {
  std::string bytes(v.size() * sizeof(float), '\0');
  if (!v.empty()) std::memcpy(bytes.data(), v.data(), bytes.size());
  return base64_encode(bytes);
}

inline std::vector<float> decode_floats(const std::string& text) {
  const std::string bytes = base64_decode(text);
  if (bytes.size() % sizeof(float) != 0) throw FormatError("tensor payload is not a float32 array");
  std::vector<float> v(bytes.size() / sizeof(float));
  if (!v.empty()) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

// ---------------------------------------------------------------------------
// Numbers and files
// ---------------------------------------------------------------------------

/// Shortest fixed rendering used in every log so reruns compare bitwise.
inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Writes via a temporary sibling and renames, so readers never see a
/// partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f << content;
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// CSV with a `# format` line and a `# config_hash` line ahead of the column row.
class CsvLog {
 public:
  CsvLog(std::string format, std::string config_hash, std::vector<std::string> columns,
         const std::vector<std::pair<std::string, std::string>>& meta = {})
      : columns_(std::move(columns)) {
    out_ << "# format=" << format << "\n# config_hash=" << config_hash << "\n";
    for (const auto& [k, v] : meta) out_ << "# " << k << "=" << v << "\n";
    for (std::size_t i = 0; i < columns_.size(); ++i) out_ << (i ? "," : "") << columns_[i];
    out_ << "\n";
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size()) throw ConfigError("csv: row width differs from header");
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }

  std::string str() const { return out_.str(); }
  const std::vector<std::string>& columns() const { return columns_; }

 private:
  std::vector<std::string> columns_;
  std::ostringstream out_;
};

struct CsvTable {
  std::vector<std::string> meta;  // comment lines without the leading '#'
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return static_cast<int>(i);
    }
    throw FormatError("csv: no column " + name);
  }
};

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      t.meta.push_back(line.substr(line.size() > 1 && line[1] == ' ' ? 2 : 1));
    } else if (t.columns.empty()) {
      t.columns = split(line, ',');
    } else {
      t.rows.push_back(split(line, ','));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Scene records
// ---------------------------------------------------------------------------

inline Json to_json(Vec2 v) { return Json::array({v.x, v.y}); }
inline Vec2 vec2_from_json(const Json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline Json to_json(const SceneRecord& s) {
  Json j;
  j["scene_id"] = s.scene_id;
  j["seed"] = s.seed;
  j["difficulty"] = to_string(s.difficulty);
  Json cl = Json::array();
  for (const auto& p : s.corridor.centerline) cl.push_back(to_json(p));
  j["corridor"] = {{"centerline", cl}, {"half_width", s.corridor.half_width}};
  j["corridor"]["stop_line_s"] = s.corridor.stop_line_s ? Json(*s.corridor.stop_line_s) : Json(nullptr);
  Json agents = Json::array();
  for (const auto& a : s.agents) {
    Json pts = Json::array();
    for (const auto& p : a.points) pts.push_back(to_json(p));
    agents.push_back({{"radius", a.radius}, {"times", a.times}, {"points", pts}});
  }
  j["agents"] = agents;
  j["ego"] = {{"velocity", s.ego.velocity},
              {"acceleration", s.ego.acceleration},
              {"position", to_json(s.ego.position)},
              {"heading", s.ego.heading}};
  Json hist = Json::array();
  for (const auto& h : s.history) hist.push_back({{"position", to_json(h.position)}, {"heading", h.heading}});
  j["history"] = hist;
  j["instruction"] = to_string(s.instruction);
  Json gt = Json::array();
  for (const auto& w : s.gt_trajectory.waypoints) gt.push_back(to_json(w));
  j["gt_trajectory"] = gt;
  j["goal"] = to_json(s.goal);
  j["duration"] = s.duration;
  return j;
}

inline SceneRecord scene_from_json(const Json& j) {
  try {
    SceneRecord s;
    s.scene_id = j.at("scene_id").get<std::int64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.difficulty = difficulty_from_string(j.at("difficulty").get<std::string>());
    for (const auto& p : j.at("corridor").at("centerline")) s.corridor.centerline.push_back(vec2_from_json(p));
    s.corridor.half_width = j.at("corridor").at("half_width").get<double>();
    const auto& sl = j.at("corridor").at("stop_line_s");
    if (!sl.is_null()) s.corridor.stop_line_s = sl.get<double>();
    s.corridor.validate();
    for (const auto& a : j.at("agents")) {
      AgentTrack t;
      t.radius = a.at("radius").get<double>();
      t.times = a.at("times").get<std::vector<double>>();
      for (const auto& p : a.at("points")) t.points.push_back(vec2_from_json(p));
      t.validate();
      s.agents.push_back(std::move(t));
    }
    const auto& e = j.at("ego");
    s.ego.velocity = e.at("velocity").get<double>();
    s.ego.acceleration = e.at("acceleration").get<double>();
    s.ego.position = vec2_from_json(e.at("position"));
    s.ego.heading = e.at("heading").get<double>();
    const auto& hist = j.at("history");
    if (hist.size() != s.history.size()) throw FormatError("scene: history length");
    for (std::size_t i = 0; i < s.history.size(); ++i) {
      s.history[i].position = vec2_from_json(hist[i].at("position"));
      s.history[i].heading = hist[i].at("heading").get<double>();
    }
    s.instruction = instruction_from_string(j.at("instruction").get<std::string>());
    const auto& gt = j.at("gt_trajectory");
    if (gt.size() != s.gt_trajectory.waypoints.size()) throw FormatError("scene: trajectory length");
    for (std::size_t i = 0; i < gt.size(); ++i) s.gt_trajectory.waypoints[i] = vec2_from_json(gt[i]);
    s.goal = vec2_from_json(j.at("goal"));
    s.duration = j.at("duration").get<double>();
    return s;
  } catch (const Json::exception& ex) {
    throw FormatError(std::string("scene record: ") + ex.what());
  } catch (const ConfigError& ex) {
    throw FormatError(std::string("scene record: ") + ex.what());
  }
}

struct DatasetHeader {
  std::string split;
  std::string config_hash;
  std::size_t count = 0;
};

inline Json tensor_json(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXf f = m.cast<float>();
  return {{"shape", {f.rows(), f.cols()}}, {"data", encode_floats(std::vector<float>(f.data(), f.data() + f.size()))}};
}

/// Scene plus its derived inputs: the t=0 raster and the teacher features.
/// Readers recompute both from the scene, so they are informational.
inline Json to_json_with_derived(const SceneRecord& s, const OracleConfig& oracle) {
  Json j = to_json(s);
  const Raster r = rasterize(s, 0.0);
  const std::vector<float> px(r.values.begin(), r.values.end());
  j["raster"] = {{"shape", {Raster::kChannels, Raster::kSize, Raster::kSize}}, {"data", encode_floats(px)}};
  const TeacherFeatures t = teacher_features(s, oracle);
  j["teacher"] = {{"f_geo", tensor_json(t.f_geo)}, {"f_dyn", tensor_json(t.f_dyn)}};
  return j;
}

/// JSONL: one header object, then one scene per line.
inline std::string dataset_jsonl(const std::vector<SceneRecord>& scenes, const DatasetHeader& header,
                                 const OracleConfig& oracle = {}) {
  std::string out = Json{{"format", kDatasetFormat},
                         {"split", header.split},
                         {"config_hash", header.config_hash},
                         {"count", scenes.size()}}
                        .dump() +
                    "\n";
  for (const auto& s : scenes) out += to_json_with_derived(s, oracle).dump() + "\n";
  return out;
}

inline std::vector<SceneRecord> parse_dataset(const std::string& text, DatasetHeader* header = nullptr) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset: missing header");
  Json h;
  try {
    h = Json::parse(line);
  } catch (const Json::exception&) {
    throw FormatError("dataset: header is not JSON");
  }
  if (h.value("format", "") != kDatasetFormat) throw FormatError("dataset: unsupported format tag");
  std::vector<SceneRecord> scenes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      scenes.push_back(scene_from_json(Json::parse(line)));
    } catch (const Json::exception&) {
      throw FormatError("dataset: malformed scene line");
    }
  }
  const auto count = h.value("count", static_cast<std::size_t>(0));
  if (count != scenes.size()) throw FormatError("dataset: count mismatch");
  if (header != nullptr) *header = {h.value("split", ""), h.value("config_hash", ""), count};
  return scenes;
}

inline std::vector<SceneRecord> load_dataset(const std::filesystem::path& path, DatasetHeader* header = nullptr) {
  return parse_dataset(read_file(path), header);
}

}  // namespace lastlab
