#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "collabdqn/eval.hpp"
#include "collabdqn/synth.hpp"
#include "collabdqn/trainer.hpp"

namespace collabdqn {

/// Everything the command-line front end reads from its JSON config file.
/// Keys are dotted paths such as "train.gamma"; unknown keys are rejected.
struct RunConfig {
  // data
  std::string data_dir = "data";
  std::size_t train_volumes = 40;
  std::size_t test_volumes = 10;
  std::size_t template_landmarks = 5;  // landmarks drawn into each volume
  synth::SynthConfig synth;

  // agents
  std::size_t agents = 2;
  std::vector<std::string> landmarks{"inner_px", "inner_my"};

  // training
  std::string architecture = "desk";  // desk | uniform_k3
  trainer::TrainConfig train;
  std::string checkpoint = "run/model.ckpt";
  std::string log = "run/train.jsonl";
  std::int64_t checkpoint_every = 0;  // episodes between checkpoints, 0 = end only
  bool fixed_step = false;            // ladder {1} instead of the multi-scale ladder

  // evaluation
  std::string report = "run/report";  // stem: .txt and .csv are appended
  std::string report_format = "both";  // text | csv | both
  int max_frames = 500;

  bool deterministic = false;

  RunConfig();

  /// Throws ConfigError naming the first inconsistent field.
  void validate() const;
  /// Train config with the architecture name and mode flags applied.
  [[nodiscard]] trainer::TrainConfig train_config() const;
  [[nodiscard]] eval::EvalConfig eval_config() const;
  /// Synth config with template_landmarks applied.
  [[nodiscard]] synth::SynthConfig synth_config() const;
};

struct ConfigKey {
  std::string key;
  std::string default_json;
  std::string help;
};

/// Every accepted key with its default, in a fixed order.
std::vector<ConfigKey> config_keys();

/// Parses a JSON object (nested sections or dotted keys) over the defaults.
/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(std::string_view json_text);
/// Applies one "key=value" override; value is JSON, or a bare string.
void apply_override(RunConfig& config, std::string_view assignment);
/// Nested JSON with every key, pretty-printed.
std::string to_json_text(const RunConfig& config);

qmodel::Architecture architecture_by_name(const std::string& name);

}  // namespace collabdqn
