#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "collabdqn/config.hpp"
#include "collabdqn/dataset.hpp"

namespace collabdqn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // bad flags or config
inline constexpr int kExitRuntime = 2;  // I/O, format, architecture, numeric

struct ManifestEntry {
  std::string id;
  std::string stem;  // relative to the manifest's directory
};

struct Manifest {
  std::vector<std::string> landmarks;  // names present in every volume
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
  std::string config_json;  // the generating config
};

Manifest read_manifest(const std::filesystem::path& data_dir);
/// Loads "train" or "test" and resolves the configured landmark names.
Dataset load_split(const RunConfig& config, const std::string& split);

/// Writes train + test volume triplets and manifest.json into config.data_dir.
/// A non-empty directory needs `force`; the parent must exist.
void cmd_generate(const RunConfig& config, bool force, std::ostream& out);
/// Trains on the train split; writes the log and checkpoint(s).
void cmd_train(const RunConfig& config, const std::optional<std::filesystem::path>& resume, std::ostream& out);
/// Evaluates the checkpoint on the test split; writes the report file(s).
void cmd_evaluate(const RunConfig& config, std::ostream& out);
/// Layer table, parameter counts and sharing ratio of a checkpoint.
void cmd_inspect(const std::filesystem::path& checkpoint, std::ostream& out);

/// Full command line: parses flags, runs a command, maps errors to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace collabdqn::cli
