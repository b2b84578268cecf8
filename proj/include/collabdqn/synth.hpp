#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "collabdqn/env.hpp"

namespace collabdqn::synth {

/// A named landmark in template coordinates (unit box [-1, 1]^3).
struct TemplateLandmark {
  std::string name;
  env::Vec3d offset;
  friend bool operator==(const TemplateLandmark&, const TemplateLandmark&) = default;
};

/// The built-in template: poles of the nested shells where they meet the
/// principal-axis rods. `count` in [1, 5].
std::vector<TemplateLandmark> default_template(std::size_t count = 2);

struct SynthConfig {
  env::Extent3 extent{64, 64, 64};
  env::Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<TemplateLandmark> landmarks = default_template(2);
  double template_unit = 0.25;      // voxels per template unit, as a fraction of the smallest extent
  double rotation_deg = 15.0;       // angle about a uniformly random axis, uniform in +-range
  double scale_min = 0.9;           // isotropic scale range
  double scale_max = 1.1;
  double translation_vox = 6.0;     // per-axis uniform shift in +-range
  double landmark_jitter_vox = 1.0; // independent per-landmark sigma
  double noise_sigma = 0.05;
  double contrast = 1.0;            // multiplies every structure amplitude
  std::uint64_t seed = 1;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct Sample {
  env::Volume volume;
  env::LandmarkSet landmarks;
};

/// Draws `n` samples. Sample i depends only on (config, i), so the result is
/// independent of the worker count.
std::vector<Sample> generate(const SynthConfig& config, std::size_t n, int workers = 1);

/// One sample with an explicit pose and no noise or jitter; the identity
/// pose gives the template rasterization.
struct Pose {
  double rotation[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  double scale = 1.0;
  env::Vec3d translation;
};
Sample rasterize(const SynthConfig& config, const Pose& pose);

// --- volume / landmark files ------------------------------------------------

inline constexpr int kVolumeFormatVersion = 1;

/// Writes <stem>.vol.json, <stem>.vol.raw and <stem>.landmarks.json.
void save_volume(const env::Volume& volume, const env::LandmarkSet& landmarks,
                 const std::filesystem::path& stem);

/// Reads the triplet back. Raw intensities are returned unnormalized.
/// Throws SizeMismatchError, DtypeError, VersionError or FormatError.
Sample load_volume(const std::filesystem::path& stem);

}  // namespace collabdqn::synth
