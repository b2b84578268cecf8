#include "collabdqn/env.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "collabdqn/error.hpp"

namespace collabdqn::env {

Volume::Volume(Extent3 s, Spacing3 sp, float fill) : shape(s), spacing(sp) {
  intensities.assign(voxel_count(), fill);
  validate();
}

Volume::Volume(Extent3 s, Spacing3 sp, std::vector<float> data)
    : shape(s), spacing(sp), intensities(std::move(data)) {
  validate();
}

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] == 0) throw ConfigError("volume extent on axis " + std::to_string(a) + " is zero");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw ConfigError("volume spacing on axis " + std::to_string(a) + " must be positive");
    }
  }
  if (intensities.size() != voxel_count()) {
    throw ConfigError("volume has " + std::to_string(intensities.size()) + " intensities, shape needs " +
                      std::to_string(voxel_count()));
  }
}

bool Volume::contains(const Vec3i& p) const {
  for (int a = 0; a < 3; ++a) {
    if (p[a] < 0 || static_cast<std::size_t>(p[a]) >= shape[a]) return false;
  }
  return true;
}

bool Volume::contains(const Vec3d& p) const {
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] >= 0.0) || p[a] > static_cast<double>(shape[a] - 1)) return false;
  }
  return true;
}

void normalize_minmax(Volume& volume) {
  if (volume.intensities.empty()) return;
  const auto [lo, hi] = std::minmax_element(volume.intensities.begin(), volume.intensities.end());
  const float min = *lo, range = *hi - *lo;
  for (float& v : volume.intensities) v = range > 0.0f ? std::clamp((v - min) / range, 0.0f, 1.0f) : 0.0f;
}

const Landmark* LandmarkSet::find(const std::string& name) const {
  for (const Landmark& l : entries) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

void LandmarkSet::validate(const Volume& volume) const {
  std::set<std::string> names;
  for (const Landmark& l : entries) {
    if (!names.insert(l.name).second) throw ConfigError("duplicate landmark name '" + l.name + "'");
    if (!volume.contains(l.position)) throw ConfigError("landmark '" + l.name + "' lies outside the volume");
  }
}

std::string action_name(Action a) {
  static constexpr const char* names[] = {"+x", "-x", "+y", "-y", "+z", "-z"};
  return names[static_cast<int>(a)];
}

int AgentPose::max_visits() const {
  int m = 0;
  for (const auto& [pos, count] : visit_counts) m = std::max(m, count);
  return m;
}

double mm_distance(const Vec3d& a, const Vec3d& b, const Spacing3& spacing) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = (a[i] - b[i]) * spacing[i];
    s += d * d;
  }
  return std::sqrt(s);
}

void crop_into(const Volume& volume, const Vec3i& center, int roi, float* out) {
  const int half = roi / 2;
  const int X = static_cast<int>(volume.shape[0]);
  const int Y = static_cast<int>(volume.shape[1]);
  const int Z = static_cast<int>(volume.shape[2]);
  const int z0 = center.z - half;
  // Valid z range inside the row, shared by every (x, y).
  const int zlo = std::max(0, -z0);
  const int zhi = std::min(roi, Z - z0);
  for (int i = 0; i < roi; ++i) {
    const int x = center.x - half + i;
    for (int j = 0; j < roi; ++j) {
      const int y = center.y - half + j;
      float* row = out + (static_cast<std::size_t>(i) * roi + j) * roi;
      if (x < 0 || x >= X || y < 0 || y >= Y || zlo >= zhi) {
        std::fill_n(row, roi, 0.0f);
        continue;
      }
      std::fill_n(row, zlo, 0.0f);
      const float* src = volume.intensities.data() + volume.index(x, y, z0 + zlo);
      std::copy(src, src + (zhi - zlo), row + zlo);
      std::fill(row + zhi, row + roi, 0.0f);
    }
  }
}

void observe_into(const Volume& volume, std::span<const Vec3i, kHistoryLength> history, int roi,
                  float* out) {
  const std::size_t frame = static_cast<std::size_t>(roi) * roi * roi;
  for (int f = 0; f < kHistoryLength; ++f) {
    // Repeated positions (e.g. right after reset) share one crop.
    if (f > 0 && history[f] == history[f - 1]) {
      std::copy_n(out + (f - 1) * frame, frame, out + f * frame);
    } else {
      crop_into(volume, history[f], roi, out + f * frame);
    }
  }
}

Tensor observe(const Volume& volume, std::span<const Vec3i, kHistoryLength> history, int roi) {
  const auto r = static_cast<std::size_t>(roi);
  Tensor t({static_cast<std::size_t>(kHistoryLength), r, r, r});
  observe_into(volume, history, roi, t.raw());
  return t;
}

namespace {

void check_roi(const Volume& volume, int roi) {
  if (roi < 1 || roi % 2 == 0) throw ConfigError("ROI extent must be a positive odd number, got " + std::to_string(roi));
  const std::size_t min_extent = *std::min_element(volume.shape.begin(), volume.shape.end());
  if (static_cast<std::size_t>(roi) > 2 * min_extent) {
    throw ConfigError("ROI extent " + std::to_string(roi) + " exceeds twice the smallest volume extent " +
                      std::to_string(min_extent));
  }
}

}  // namespace

ResetResult reset(const Volume& volume, const Vec3i& start, int roi, const std::vector<int>& ladder) {
  if (!volume.contains(start)) {
    throw EnvError("start (" + std::to_string(start.x) + "," + std::to_string(start.y) + "," +
                   std::to_string(start.z) + ") is outside the volume");
  }
  check_roi(volume, roi);
  if (ladder.empty()) throw ConfigError("step ladder is empty");
  for (int s : ladder) {
    if (s < 1) throw ConfigError("step ladder entries must be >= 1");
  }
  ResetResult r;
  r.pose.position = start;
  r.pose.ladder = ladder;
  r.pose.scale_index = 0;
  r.pose.history.fill(start);
  r.pose.visit_counts = {{start, 1}};
  r.pose.frozen = false;
  r.observation = observe(volume, r.pose.history, roi);
  return r;
}

MoveResult move(AgentPose& pose, Action action, const Volume& volume, const Vec3d& target) {
  if (pose.frozen) throw EnvError("cannot step a frozen agent");
  const int a = static_cast<int>(action);
  if (a < 0 || a >= kActionCount) throw EnvError("action index out of range");
  const double before = mm_distance(pose.position, target, volume.spacing);
  const int axis = a / 2;
  const int sign = a % 2 == 0 ? 1 : -1;
  Vec3i next = pose.position;
  next[axis] = std::clamp(next[axis] + sign * pose.step_scale(), 0, static_cast<int>(volume.shape[axis]) - 1);
  pose.position = next;
  std::rotate(pose.history.begin(), pose.history.begin() + 1, pose.history.end());
  pose.history.back() = next;
  pose.visit_counts[next] += 1;
  const double after = mm_distance(next, target, volume.spacing);
  return {before - after, after <= kConvergenceRadiusMm};
}

StepResult step(AgentPose& pose, Action action, const Volume& volume, const Vec3d& target, int roi) {
  check_roi(volume, roi);
  const MoveResult m = move(pose, action, volume, target);
  return {observe(volume, pose.history, roi), m.reward, m.terminal};
}

std::string outcome_name(Outcome o) {
  switch (o) {
    case Outcome::continue_episode: return "continue";
    case Outcome::converged: return "converged";
    case Outcome::oscillating: return "oscillating";
    case Outcome::frame_budget_exhausted: return "frame_budget_exhausted";
  }
  return "?";
}

Outcome check_termination(const AgentPose& pose, Mode mode, int frames, int max_frames,
                          std::optional<double> distance_mm) {
  if (mode == Mode::train && distance_mm && *distance_mm <= kConvergenceRadiusMm) return Outcome::converged;
  if (frames >= max_frames) return Outcome::frame_budget_exhausted;
  if (mode == Mode::test && pose.max_visits() >= kOscillationVisits) return Outcome::oscillating;
  return Outcome::continue_episode;
}

bool reduce_scale(AgentPose& pose) {
  if (pose.at_finest_scale()) return false;
  ++pose.scale_index;
  pose.visit_counts = {{pose.position, 1}};
  return true;
}

Vec3i sample_train_start(const Extent3& shape, Philox& rng) {
  Vec3i p;
  for (int a = 0; a < 3; ++a) {
    const auto n = static_cast<double>(shape[a]);
    const auto lo = static_cast<std::int64_t>(std::ceil(0.1 * n));
    auto hi = static_cast<std::int64_t>(std::ceil(0.9 * n));
    if (hi <= lo) hi = lo + 1;
    p[a] = static_cast<int>(lo + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo))));
  }
  return p;
}

Vec3i sample_train_start(const Extent3& shape, std::uint64_t seed) {
  Philox rng(seed);
  return sample_train_start(shape, rng);
}

std::vector<Vec3i> start_grid(const Extent3& shape) {
  static constexpr double fractions[] = {0.25, 0.5, 0.75};
  std::array<std::array<int, 3>, 3> coords{};
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < 3; ++i) {
      const double v = std::round(fractions[i] * static_cast<double>(shape[a]));
      coords[a][i] = std::clamp(static_cast<int>(v), 0, static_cast<int>(shape[a]) - 1);
    }
  }
  std::vector<Vec3i> out;
  out.reserve(19);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) {
        if (i != 1 && j != 1 && k != 1) continue;  // corner of the 3x3x3 grid
        out.push_back({coords[0][i], coords[1][j], coords[2][k]});
      }
  return out;
}

}  // namespace collabdqn::env
