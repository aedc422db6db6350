#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "asap/network.hpp"
#include "asap/synth.hpp"
#include "asap/trainer.hpp"

namespace asap {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Everything a run needs. Text form:
///
///   # comment
///   [model]
///   width = 32
///   attention = vertical
///
/// Keys are addressed as section.key on the command line.
struct RunConfig {
  NetworkConfig model;
  TrainConfig train;
  synth::SceneSpec data;
  std::size_t train_count = 400;
  std::size_t val_count = 100;

  /// Applies one assignment; unknown keys or bad values throw ConfigError.
  void set(const std::string& dotted_key, const std::string& value);
  /// Applies every assignment in a config file body.
  void merge_text(const std::string& text, const std::string& source = "<text>");
  void merge_file(const std::filesystem::path& path);
  /// Applies "section.key=value" overrides.
  void merge_overrides(const std::vector<std::string>& overrides);

  /// Canonical text form listing every key; parsing it reproduces this config.
  std::string to_text() const;
  std::vector<std::string> keys() const;
};

}  // namespace asap
