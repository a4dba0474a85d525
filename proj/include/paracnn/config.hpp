// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Run configuration: one JSON document with the sections model,
 *         twin, decode, train and paths, plus a top-level seed.
 *
 * Unknown keys anywhere are rejected. Overrides use dotted paths, e.g.
 * "twin.mode=l2" or "model.attention_layers=[2,4]"; the value is parsed as
 * JSON and falls back to a plain string.
 */
#pragma once

#include "paracnn/decode.hpp"
#include "paracnn/model.hpp"
#include "paracnn/training.hpp"

#include "json.hpp"

#include <filesystem>

namespace paracnn {

struct PathConfig {
  std::string train_manifest;
  std::string val_manifest;
  std::string checkpoint_dir = "checkpoints";
  std::string log = "metrics.jsonl";
};

struct RunConfig {
  ModelConfig model;
  TwinConfig twin;
  DecodeConfig decode;
  TrainConfig train;
  PathConfig paths;
  std::uint64_t seed = 0;
  std::size_t min_word_freq = 2;
  /// When false the log's wallclock field is null, so logs of identical
  /// runs compare byte for byte.
  bool log_wallclock = true;

  void validate() const;
};

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

nlohmann::ordered_json to_json(const RunConfig &config);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json &json);
RunConfig load_run_config(const std::filesystem::path &path);
/// Applies "section.key=value" overrides to a JSON document.
void apply_override(nlohmann::json &json, std::string_view assignment);

/// Reads `path` (or defaults when empty), applies overrides and the
/// PARACNN_SEED environment variable, and validates.
RunConfig resolve_run_config(const std::string &path,
                             const std::vector<std::string> &overrides);

} // namespace paracnn
