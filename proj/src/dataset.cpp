#include "collabdqn/dataset.hpp"

#include "collabdqn/error.hpp"

namespace collabdqn {

Dataset make_dataset(std::vector<synth::Sample> samples, std::vector<std::string> ids,
                     std::vector<std::string> names) {
  if (samples.empty()) throw ConfigError("dataset is empty");
  if (names.empty()) throw ConfigError("no landmark names given");
  if (ids.size() != samples.size()) throw ConfigError("need one id per volume");
  Dataset d;
  d.ids = std::move(ids);
  d.landmark_names = std::move(names);
  for (std::size_t v = 0; v < samples.size(); ++v) {
    std::vector<env::Vec3d> row;
    for (const std::string& n : d.landmark_names) {
      const env::Landmark* l = samples[v].landmarks.find(n);
      if (!l) throw ConfigError("volume '" + d.ids[v] + "' has no landmark '" + n + "'");
      row.push_back(l->position);
    }
    env::normalize_minmax(samples[v].volume);
    d.volumes.push_back(std::move(samples[v].volume));
    d.targets.push_back(std::move(row));
  }
  return d;
}

Dataset select_landmarks(const Dataset& data, const std::vector<std::size_t>& which) {
  Dataset d;
  d.ids = data.ids;
  d.volumes = data.volumes;
  for (std::size_t k : which) d.landmark_names.push_back(data.landmark_names.at(k));
  for (const auto& row : data.targets) {
    std::vector<env::Vec3d> r;
    for (std::size_t k : which) r.push_back(row.at(k));
    d.targets.push_back(std::move(r));
  }
  return d;
}

}  // namespace collabdqn
