#pragma once

#include "hvl/detector.hpp"
#include "hvl/embedding_store.hpp"
#include "hvl/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hvl {

using Json = nlohmann::json;

// JSON forms of the configuration structs. Parsing starts from the defaults,
// so every key is optional; unknown keys are rejected with ConfigError.

Json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});

Json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec base = {});

/// FNV-1a of the compact dump (nlohmann orders object keys, so the dump is canonical).
std::string config_hash(const Json& j);

Json to_json(const EvalReport& report, const std::string& config_hash);
Json to_json(const EpochLog& log);

/// Per-item score dump, JSON-lines {id, label, predicted, msp}.
void write_scores(std::span<const ScoredItem> scores, const std::filesystem::path& path);
std::vector<ScoredItem> read_scores(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const Json& j, const std::filesystem::path& path);

}  // namespace hvl
