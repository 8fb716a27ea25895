#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "iapo/evaluation.hpp"
#include "iapo/model.hpp"
#include "iapo/trainer.hpp"
#include "json.hpp"

namespace iapo {

struct DataConfig {
  int difficulty = 2;
  std::string train_path;  // JSONL; empty means the synthetic stream
  std::uint64_t train_seed = 1;
  std::size_t validation_tasks = 100;
  std::uint64_t validation_seed = 2;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig trainer;
  DataConfig data;
  EvalOptions eval;
  std::size_t eval_tasks = 100;
  std::uint64_t eval_task_seed = 3;
  std::string log_level = "info";
};

// Full document with every key at its default value. Doubles as the schema:
// a key is valid iff it appears here, with the same JSON type.
nlohmann::json default_config_json();

// Human-readable listing of every key, its type and default.
std::string config_schema_help();

// Overlays `patch` on the defaults. Unknown keys and type mismatches throw
// ConfigError naming the key.
nlohmann::json merge_config(const nlohmann::json& patch);

// Applies "dotted.key=value" overrides. The value is parsed as JSON, falling
// back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig run_config_from_json(const nlohmann::json& doc);
nlohmann::json run_config_to_json(const RunConfig& config);

// Reads `path` (may be empty for defaults) and applies overrides; validates
// the result.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          nlohmann::json* effective = nullptr);

}  // namespace iapo
