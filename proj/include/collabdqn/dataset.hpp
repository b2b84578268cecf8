#pragma once

#include <string>
#include <vector>

#include "collabdqn/env.hpp"
#include "collabdqn/synth.hpp"

namespace collabdqn {

/// Volumes ready for the agents: min-max normalized copies plus, per volume,
/// the target position of every agent in landmark-name order.
struct Dataset {
  std::vector<std::string> ids;
  std::vector<std::string> landmark_names;  // agent k seeks landmark_names[k]
  std::vector<env::Volume> volumes;
  std::vector<std::vector<env::Vec3d>> targets;  // [volume][agent]

  [[nodiscard]] std::size_t size() const { return volumes.size(); }
  [[nodiscard]] std::size_t agents() const { return landmark_names.size(); }
};

/// Normalizes each volume and resolves `names` in its landmark set. Throws
/// ConfigError naming the volume and landmark when one is missing.
Dataset make_dataset(std::vector<synth::Sample> samples, std::vector<std::string> ids,
                     std::vector<std::string> names);

/// The subset of agents/landmarks `which` (used for single-agent baselines).
Dataset select_landmarks(const Dataset& data, const std::vector<std::size_t>& which);

}  // namespace collabdqn
