#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "loopeval/eval/evaluators.hpp"

namespace loopeval::eval {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Writes <stem>.json (architecture, config, tensor table, extra metadata) and <stem>.lsw (float32 blob).
void save_checkpoint(const AnyEvaluator& evaluator, const std::filesystem::path& stem,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  AnyEvaluator evaluator;
  nlohmann::json metadata;
};

/// Rebuilds the evaluator and checks every tensor name and shape against the stored table.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace loopeval::eval
