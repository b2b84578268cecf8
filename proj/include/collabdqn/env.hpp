#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "collabdqn/rng.hpp"
#include "collabdqn/tensor.hpp"

namespace collabdqn::env {

struct Vec3i {
  int x = 0, y = 0, z = 0;
  int& operator[](int axis) { return axis == 0 ? x : axis == 1 ? y : z; }
  int operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  friend auto operator<=>(const Vec3i&, const Vec3i&) = default;
};

struct Vec3d {
  double x = 0.0, y = 0.0, z = 0.0;
  double& operator[](int axis) { return axis == 0 ? x : axis == 1 ? y : z; }
  double operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  friend bool operator==(const Vec3d&, const Vec3d&) = default;
};

inline Vec3d to_vec3d(const Vec3i& v) { return {double(v.x), double(v.y), double(v.z)}; }

using Extent3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Scalar field on a voxel grid; index (x, y, z) -> (x * Y + y) * Z + z.
struct Volume {
  Extent3 shape{};
  Spacing3 spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::vector<float> intensities;

  Volume() = default;
  Volume(Extent3 shape, Spacing3 spacing, float fill = 0.0f);
  Volume(Extent3 shape, Spacing3 spacing, std::vector<float> data);

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;
  [[nodiscard]] std::size_t voxel_count() const { return shape[0] * shape[1] * shape[2]; }
  [[nodiscard]] bool contains(const Vec3i& p) const;
  [[nodiscard]] bool contains(const Vec3d& p) const;
  [[nodiscard]] std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(x) * shape[1] + static_cast<std::size_t>(y)) * shape[2] +
           static_cast<std::size_t>(z);
  }
  [[nodiscard]] float at(int x, int y, int z) const { return intensities[index(x, y, z)]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Per-volume min-max rescale to [0, 1]; a constant volume becomes all zeros.
void normalize_minmax(Volume& volume);

struct Landmark {
  std::string name;
  Vec3d position;  // continuous voxel coordinates
  friend bool operator==(const Landmark&, const Landmark&) = default;
};

struct LandmarkSet {
  std::vector<Landmark> entries;

  [[nodiscard]] const Landmark* find(const std::string& name) const;
  /// Names unique, every position inside `volume`.
  void validate(const Volume& volume) const;
  friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;
};

enum class Action : int { plus_x = 0, minus_x, plus_y, minus_y, plus_z, minus_z };
inline constexpr int kActionCount = 6;
inline constexpr int kHistoryLength = 4;
inline constexpr double kConvergenceRadiusMm = 1.0;

std::string action_name(Action a);

/// Default coarse-to-fine step ladder in voxels.
inline const std::vector<int> kDefaultLadder{3, 2, 1};

struct AgentPose {
  Vec3i position;
  std::vector<int> ladder{kDefaultLadder};
  std::size_t scale_index = 0;
  std::array<Vec3i, kHistoryLength> history{};  // oldest -> newest
  std::map<Vec3i, int> visit_counts;            // at the current scale
  bool frozen = false;

  [[nodiscard]] int step_scale() const { return ladder.at(scale_index); }
  [[nodiscard]] bool at_finest_scale() const { return scale_index + 1 >= ladder.size(); }
  [[nodiscard]] int max_visits() const;
  friend bool operator==(const AgentPose&, const AgentPose&) = default;
};

double mm_distance(const Vec3d& a, const Vec3d& b, const Spacing3& spacing);
inline double mm_distance(const Vec3i& a, const Vec3d& b, const Spacing3& spacing) {
  return mm_distance(to_vec3d(a), b, spacing);
}

/// Writes the [4, R, R, R] observation for a position history into `out`
/// (R^3 * 4 floats). Voxels outside the volume read as 0.
void observe_into(const Volume& volume, std::span<const Vec3i, kHistoryLength> history, int roi,
                  float* out);
Tensor observe(const Volume& volume, std::span<const Vec3i, kHistoryLength> history, int roi);

/// Cubic crop of extent `roi` centred on `center` (zero padded).
void crop_into(const Volume& volume, const Vec3i& center, int roi, float* out);

struct ResetResult {
  AgentPose pose;
  Tensor observation;  // [4, R, R, R]
};

/// Throws EnvError for a start outside the volume, ConfigError for an even
/// ROI, an ROI above 2 * min(shape), or an empty / non-positive ladder.
ResetResult reset(const Volume& volume, const Vec3i& start, int roi,
                  const std::vector<int>& ladder = kDefaultLadder);

struct MoveResult {
  double reward = 0.0;  // mm closer to the target
  bool terminal = false;  // within 1 mm of the target
};

/// Moves the pose one step (clamped at faces), shifts the history and bumps
/// the visit count. Throws EnvError if the pose is frozen.
MoveResult move(AgentPose& pose, Action action, const Volume& volume, const Vec3d& target);

struct StepResult {
  Tensor observation;
  double reward = 0.0;
  bool terminal = false;
};

StepResult step(AgentPose& pose, Action action, const Volume& volume, const Vec3d& target, int roi);

enum class Mode { train, test };
enum class Outcome { continue_episode, converged, oscillating, frame_budget_exhausted };
std::string outcome_name(Outcome o);

/// `distance_mm` is only consulted in train mode. In test mode an oscillation
/// at a coarse scale is reported as `oscillating`; the caller then reduces the
/// scale instead of ending the episode.
Outcome check_termination(const AgentPose& pose, Mode mode, int frames, int max_frames,
                          std::optional<double> distance_mm = std::nullopt);

/// Moves to the next finer scale and restarts visit counting. Returns false
/// when already at the finest scale.
bool reduce_scale(AgentPose& pose);

/// Uniform start in [ceil(0.1 n), ceil(0.9 n)) per axis.
Vec3i sample_train_start(const Extent3& shape, Philox& rng);
Vec3i sample_train_start(const Extent3& shape, std::uint64_t seed);

inline constexpr int kOscillationVisits = 3;

/// The 27 points at {25, 50, 75}% of each extent minus the 8 corners, in
/// lexicographic order.
std::vector<Vec3i> start_grid(const Extent3& shape);

}  // namespace collabdqn::env
