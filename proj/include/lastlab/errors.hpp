#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lastlab {

/// Shapes, ranges or settings that do not fit the configured model.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config validation failure with one message per offending field.
class InvalidConfig : public ConfigError {
 public:
  explicit InvalidConfig(std::vector<std::pair<std::string, std::string>> fields)
      : ConfigError(summary(fields)), fields_(std::move(fields)) {}

  const std::vector<std::pair<std::string, std::string>>& fields() const { return fields_; }

 private:
  static std::string summary(const std::vector<std::pair<std::string, std::string>>& f) {
    std::string s = "invalid config:";
    for (const auto& [k, m] : f) s += " " + k + " (" + m + ");";
    return s;
  }
  std::vector<std::pair<std::string, std::string>> fields_;
};

/// A checkpoint or dataset the command depends on does not exist.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A query time outside the scene's simulated window.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Trajectory coordinates that cannot be rendered in the waypoint grammar.
class EncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Answer tags missing or misplaced.
class TagError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Answer tags present but the waypoint text is malformed.
class SyntaxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or mismatched on-disk artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a NaN/Inf loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lastlab
