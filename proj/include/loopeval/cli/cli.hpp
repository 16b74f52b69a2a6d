#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

namespace loopeval::cli {

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2, kData = 3, kDegenerate = 4 };

inline constexpr const char* kToolVersion = "0.3.0";
inline constexpr const char* kOutputRootEnv = "LOOPEVAL_OUTPUT_ROOT";
inline constexpr const char* kRunManifestName = "run_manifest.json";

struct RunManifest {
  std::string subcommand;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::array();
  std::string output;
  std::uint64_t seed = 0;
  std::string tool_version = kToolVersion;
  std::string started_at;
  double elapsed_seconds = 0;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& dir);
RunManifest read_run_manifest(const std::filesystem::path& dir);

/// Entry point behind the `loopeval` binary. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace loopeval::cli
