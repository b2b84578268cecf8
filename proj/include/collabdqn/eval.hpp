#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "collabdqn/dataset.hpp"
#include "collabdqn/qmodel.hpp"
#include "collabdqn/trainer.hpp"

namespace collabdqn::eval {

/// Population statistics (std divides by n).
struct Stats {
  double mean = 0.0;
  double std = 0.0;
  double median = 0.0;
  std::size_t n = 0;
  friend bool operator==(const Stats&, const Stats&) = default;
};

/// Throws ConfigError on an empty list.
Stats aggregate(std::span<const double> values);

struct Protocol {
  std::string policy = "greedy";
  std::size_t grid_points = 19;
  int max_frames = 500;
  std::vector<int> ladder = env::kDefaultLadder;
  int roi = 15;
  friend bool operator==(const Protocol&, const Protocol&) = default;
};

struct LandmarkSummary {
  Stats stats;                    // over all volumes x starts
  std::vector<double> per_volume; // mean over the starts of each volume
  friend bool operator==(const LandmarkSummary&, const LandmarkSummary&) = default;
};

struct EvalReport {
  Protocol protocol;
  std::vector<std::string> landmarks;
  std::vector<std::string> volume_ids;
  /// errors_mm[(landmark * volumes + volume) * grid_points + start]
  std::vector<double> errors_mm;
  std::vector<LandmarkSummary> summary;
  /// Agent results produced while evaluating (volumes x starts x K).
  std::size_t episodes = 0;

  [[nodiscard]] double error(std::size_t landmark, std::size_t volume, std::size_t start) const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalConfig {
  trainer::TestConfig test;
  int workers = 1;
};

/// Greedy test episodes from every grid start of every volume. Requires one
/// head per landmark of `data`. Results are merged in index order, so the
/// report does not depend on the worker count.
EvalReport evaluate(const qmodel::CollabQNet& net, const Dataset& data, const EvalConfig& config);
/// Same protocol with an arbitrary policy.
EvalReport evaluate(const trainer::Policy& policy, const Dataset& data, const EvalConfig& config,
                    const std::string& policy_name);
/// Baseline that stays at the start point.
EvalReport evaluate_never_move(const Dataset& data, const EvalConfig& config);

/// Fills `summary` from `errors_mm`.
void summarize(EvalReport& report);

/// Mean of the report's grand per-landmark means.
double overall_mean(const EvalReport& report);

/// Table with one "name  mean ± std" row per landmark, a protocol header and
/// the published clinical reference block.
std::string render_text(const EvalReport& report);
/// landmark,volume_id,start_index,error_mm with one row per episode.
std::string render_csv(const EvalReport& report);
/// Inverse of render_csv (protocol fields are not stored and stay default).
/// Throws FormatError on malformed input.
EvalReport parse_csv(std::string_view csv);

}  // namespace collabdqn::eval
