#pragma once

// JSON run configuration. Every key is optional except `dataset`; unknown
// keys are rejected and all violations are reported together.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsc/networks.hpp"
#include "mmsc/pipeline.hpp"
#include "mmsc/robustness.hpp"

namespace mmsc {

struct RunConfig {
  ModelConfig model;
  std::vector<Variant> variants;  // experiment variants; defaults to {model.variant}
  std::filesystem::path dataset;
  PipelineOptions options;
  std::vector<Scenario> scenarios;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;  // mirrors model.seed

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
// Reads a model object (checkpoint headers); throws ConfigError listing every problem.
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const PipelineOptions& o);
nlohmann::json to_json(const Scenario& s);
nlohmann::json to_json(const RunConfig& c);

/// Builds a RunConfig from parsed JSON. Relative paths resolve against
/// `base_dir`; the dataset must exist and agree with any declared shape.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

// Parses text; syntax errors report line and column.
nlohmann::json parse_json_text(const std::string& text, const std::string& source);

RunConfig load_config(const std::filesystem::path& file);
std::string dump_config(const RunConfig& config);

// Short stable hash (hex SHA-256 prefix) of a canonical JSON dump.
std::string json_fingerprint(const nlohmann::json& j);

}  // namespace mmsc
