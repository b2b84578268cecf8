#include "collabdqn/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"

#include "collabdqn/error.hpp"
#include "collabdqn/parallel.hpp"
#include "collabdqn/rng.hpp"

namespace collabdqn::synth {

using env::Vec3d;
using json = nlohmann::json;

namespace {

// Nested shell semi-axes in template units, innermost first.
constexpr double kShellAxes[3][3] = {{0.65, 0.5, 0.55}, {0.9, 0.8, 0.85}, {1.2, 1.1, 1.15}};

constexpr double kBodyLevel = 0.2;
constexpr double kGuideLevel = 0.35;
constexpr double kShellLevel = 0.5;
constexpr double kRodLevel = 0.4;
constexpr double kShellWidthVox = 1.0;
constexpr double kRodRadiusVox = 1.2;
constexpr double kWarpRadiusVox = 3.0;

double ellipsoid_radius(const Vec3d& q, const double (&axes)[3]) {
  const double a = q.x / axes[0], b = q.y / axes[1], c = q.z / axes[2];
  return std::sqrt(a * a + b * b + c * c);
}

double gaussian(double d, double sigma) { return std::exp(-0.5 * (d / sigma) * (d / sigma)); }

// Structure intensity at template coordinate q; `unit` = voxels per template unit.
double structure(const Vec3d& q, double unit) {
  const double outer = ellipsoid_radius(q, kShellAxes[2]);
  double v = kGuideLevel * std::exp(-0.5 * outer * outer);
  v += kBodyLevel / (1.0 + std::exp(-(1.0 - outer) * unit));
  for (const auto& axes : kShellAxes) {
    const double mean_axis = std::cbrt(axes[0] * axes[1] * axes[2]);
    v += kShellLevel * gaussian((ellipsoid_radius(q, axes) - 1.0) * mean_axis * unit, kShellWidthVox);
  }
  // Principal-axis rods, confined to the body.
  const double inside = 1.0 / (1.0 + std::exp(-(1.0 - outer) * unit * 0.5));
  const double rx = std::hypot(q.y, q.z) * unit;
  const double ry = std::hypot(q.x, q.z) * unit;
  const double rz = std::hypot(q.x, q.y) * unit;
  v += kRodLevel * inside * (gaussian(rx, kRodRadiusVox) + gaussian(ry, kRodRadiusVox) + gaussian(rz, kRodRadiusVox));
  return v;
}

Vec3d apply(const double (&r)[3][3], const Vec3d& v) {
  return {r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z, r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
          r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z};
}

Vec3d apply_transpose(const double (&r)[3][3], const Vec3d& v) {
  return {r[0][0] * v.x + r[1][0] * v.y + r[2][0] * v.z, r[0][1] * v.x + r[1][1] * v.y + r[2][1] * v.z,
          r[0][2] * v.x + r[1][2] * v.y + r[2][2] * v.z};
}

Vec3d volume_center(const env::Extent3& e) {
  return {(static_cast<double>(e[0]) - 1.0) / 2.0, (static_cast<double>(e[1]) - 1.0) / 2.0,
          (static_cast<double>(e[2]) - 1.0) / 2.0};
}

double unit_voxels(const SynthConfig& c) {
  return c.template_unit * static_cast<double>(*std::min_element(c.extent.begin(), c.extent.end()));
}

// Template offset -> voxel position under a pose.
Vec3d place(const SynthConfig& c, const Pose& pose, const Vec3d& offset) {
  const Vec3d r = apply(pose.rotation, offset);
  const Vec3d center = volume_center(c.extent);
  const double u = unit_voxels(c) * pose.scale;
  return {center.x + pose.translation.x + u * r.x, center.y + pose.translation.y + u * r.y,
          center.z + pose.translation.z + u * r.z};
}

bool strictly_inside(const env::Extent3& e, const Vec3d& p) {
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] > 0.0 && p[a] < static_cast<double>(e[a]) - 1.0)) return false;
  }
  return true;
}

struct Displacement {
  Vec3d anchor;  // posed, unjittered landmark
  Vec3d shift;   // jitter
};

// Rasterizes the posed structure; each displacement drags the structure
// around its anchor so the jittered landmark stays on its shell pole.
env::Volume render(const SynthConfig& c, const Pose& pose, const std::vector<Displacement>& warps,
                   Philox* noise) {
  env::Volume vol(c.extent, c.spacing);
  const Vec3d center = volume_center(c.extent);
  const double unit = unit_voxels(c) * pose.scale;
  std::size_t idx = 0;
  for (std::size_t x = 0; x < c.extent[0]; ++x)
    for (std::size_t y = 0; y < c.extent[1]; ++y)
      for (std::size_t z = 0; z < c.extent[2]; ++z, ++idx) {
        Vec3d p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        for (const Displacement& w : warps) {
          const double d2 = (p.x - w.anchor.x) * (p.x - w.anchor.x) + (p.y - w.anchor.y) * (p.y - w.anchor.y) +
                            (p.z - w.anchor.z) * (p.z - w.anchor.z);
          const double g = std::exp(-0.5 * d2 / (kWarpRadiusVox * kWarpRadiusVox));
          p.x -= w.shift.x * g;
          p.y -= w.shift.y * g;
          p.z -= w.shift.z * g;
        }
        const Vec3d local{(p.x - center.x - pose.translation.x) / unit, (p.y - center.y - pose.translation.y) / unit,
                          (p.z - center.z - pose.translation.z) / unit};
        double v = c.contrast * structure(apply_transpose(pose.rotation, local), unit);
        if (noise && c.noise_sigma > 0.0) v += noise->normal(0.0, c.noise_sigma);
        vol.intensities[idx] = static_cast<float>(v);
      }
  return vol;
}

Pose draw_pose(const SynthConfig& c, Philox& rng) {
  Pose pose;
  Vec3d axis{rng.normal(), rng.normal(), rng.normal()};
  const double norm = std::sqrt(axis.x * axis.x + axis.y * axis.y + axis.z * axis.z);
  const double angle = rng.uniform(-1.0, 1.0) * c.rotation_deg * std::numbers::pi / 180.0;
  if (norm > 0.0) {
    axis = {axis.x / norm, axis.y / norm, axis.z / norm};
    // Rodrigues' formula.
    const double s = std::sin(angle), k = 1.0 - std::cos(angle);
    const double x = axis.x, y = axis.y, z = axis.z;
    const double r[3][3] = {{1 - k * (y * y + z * z), k * x * y - s * z, k * x * z + s * y},
                            {k * x * y + s * z, 1 - k * (x * x + z * z), k * y * z - s * x},
                            {k * x * z - s * y, k * y * z + s * x, 1 - k * (x * x + y * y)}};
    std::copy(&r[0][0], &r[0][0] + 9, &pose.rotation[0][0]);
  }
  pose.scale = rng.uniform(c.scale_min, c.scale_max);
  pose.translation = {rng.uniform(-1.0, 1.0) * c.translation_vox, rng.uniform(-1.0, 1.0) * c.translation_vox,
                      rng.uniform(-1.0, 1.0) * c.translation_vox};
  return pose;
}

Sample generate_one(const SynthConfig& c, std::size_t index) {
  Philox rng = Philox(c.seed).derive(index);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const Pose pose = draw_pose(c, rng);
    std::vector<Displacement> warps;
    env::LandmarkSet set;
    bool ok = true;
    for (const TemplateLandmark& t : c.landmarks) {
      const Vec3d anchor = place(c, pose, t.offset);
      const Vec3d shift{rng.normal(0.0, c.landmark_jitter_vox), rng.normal(0.0, c.landmark_jitter_vox),
                        rng.normal(0.0, c.landmark_jitter_vox)};
      const Vec3d pos{anchor.x + shift.x, anchor.y + shift.y, anchor.z + shift.z};
      ok = ok && strictly_inside(c.extent, pos);
      warps.push_back({anchor, shift});
      set.entries.push_back({t.name, pos});
    }
    if (!ok) continue;
    return {render(c, pose, warps, &rng), std::move(set)};
  }
  throw ConfigError("synthetic sample " + std::to_string(index) +
                    ": landmarks fell outside the volume in 100 pose draws");
}

}  // namespace

std::vector<TemplateLandmark> default_template(std::size_t count) {
  static const std::vector<TemplateLandmark> all = {
      {"inner_px", {kShellAxes[0][0], 0.0, 0.0}},   {"inner_my", {0.0, -kShellAxes[0][1], 0.0}},
      {"inner_pz", {0.0, 0.0, kShellAxes[0][2]}},   {"middle_mx", {-kShellAxes[1][0], 0.0, 0.0}},
      {"middle_mz", {0.0, 0.0, -kShellAxes[1][2]}},
  };
  if (count < 1 || count > all.size()) throw ConfigError("default template supports 1..5 landmarks");
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count)};
}

void SynthConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (extent[a] < 16) throw ConfigError("synthetic volume extents must be >= 16");
    if (!(spacing[a] > 0.0)) throw ConfigError("spacing must be positive");
  }
  if (landmarks.empty()) throw ConfigError("template needs at least one landmark");
  std::set<std::string> names;
  for (const auto& l : landmarks) {
    if (!names.insert(l.name).second) throw ConfigError("duplicate template landmark '" + l.name + "'");
    for (int a = 0; a < 3; ++a) {
      if (std::fabs(l.offset[a]) > 1.0) throw ConfigError("template offset of '" + l.name + "' leaves the unit box");
    }
  }
  if (!(scale_min > 0.5 && scale_max < 2.0 && scale_min <= scale_max)) {
    throw ConfigError("scale range must lie within (0.5, 2.0)");
  }
  if (rotation_deg < 0 || translation_vox < 0 || landmark_jitter_vox < 0 || noise_sigma < 0) {
    throw ConfigError("ranges and sigmas must be >= 0");
  }
  if (!(template_unit > 0.0)) throw ConfigError("template_unit must be positive");
}

std::vector<Sample> generate(const SynthConfig& config, std::size_t n, int workers) {
  config.validate();
  if (n < 1) throw ConfigError("generate needs n >= 1");
  std::vector<Sample> out(n);
  parallel_for(n, workers, [&](std::size_t i) { out[i] = generate_one(config, i); });
  return out;
}

Sample rasterize(const SynthConfig& config, const Pose& pose) {
  config.validate();
  env::LandmarkSet set;
  for (const TemplateLandmark& t : config.landmarks) set.entries.push_back({t.name, place(config, pose, t.offset)});
  return {render(config, pose, {}, nullptr), std::move(set)};
}

// --- file I/O ---------------------------------------------------------------

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw PathError("cannot write " + p.string());
  os << text;
  if (!os) throw PathError("write failed for " + p.string());
}

json read_json(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw PathError("cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace

void save_volume(const env::Volume& volume, const env::LandmarkSet& landmarks, const std::filesystem::path& stem) {
  volume.validate();
  json header = {{"format_version", kVolumeFormatVersion},
                 {"shape", volume.shape},
                 {"spacing_mm", volume.spacing},
                 {"dtype", "f32le"}};
  write_text(with_suffix(stem, ".vol.json"), header.dump(2) + "\n");

  std::vector<std::uint32_t> words(volume.intensities.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w = std::bit_cast<std::uint32_t>(volume.intensities[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  const auto raw_path = with_suffix(stem, ".vol.raw");
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  if (!raw) throw PathError("cannot write " + raw_path.string());
  raw.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!raw) throw PathError("write failed for " + raw_path.string());

  json list = json::array();
  for (const env::Landmark& l : landmarks.entries) {
    list.push_back({{"name", l.name}, {"voxel", {l.position.x, l.position.y, l.position.z}}});
  }
  write_text(with_suffix(stem, ".landmarks.json"), list.dump(2) + "\n");
}

Sample load_volume(const std::filesystem::path& stem) {
  const auto header_path = with_suffix(stem, ".vol.json");
  const json header = read_json(header_path);
  Sample s;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kVolumeFormatVersion) {
      throw VersionError(header_path.string() + ": format version " + std::to_string(version) +
                         ", expected " + std::to_string(kVolumeFormatVersion));
    }
    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype != "f32le") throw DtypeError(header_path.string() + ": unsupported dtype '" + dtype + "'");
    s.volume.shape = header.at("shape").get<env::Extent3>();
    s.volume.spacing = header.at("spacing_mm").get<env::Spacing3>();
  } catch (const json::exception& e) {
    throw FormatError(header_path.string() + ": " + e.what());
  }

  const auto raw_path = with_suffix(stem, ".vol.raw");
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(raw_path, ec);
  if (ec) throw PathError("cannot read " + raw_path.string());
  const std::size_t expected = s.volume.shape[0] * s.volume.shape[1] * s.volume.shape[2];
  if (bytes != expected * 4) {
    throw SizeMismatchError(raw_path.string() + ": expected " + std::to_string(expected) + " voxels (" +
                            std::to_string(expected * 4) + " bytes), found " + std::to_string(bytes) + " bytes");
  }
  std::vector<std::uint32_t> words(expected);
  std::ifstream raw(raw_path, std::ios::binary);
  raw.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  if (!raw) throw TruncatedError("short read from " + raw_path.string());
  s.volume.intensities.resize(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t w = words[i];
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    s.volume.intensities[i] = std::bit_cast<float>(w);
  }
  s.volume.validate();

  const auto lm_path = with_suffix(stem, ".landmarks.json");
  const json list = read_json(lm_path);
  try {
    for (const json& item : list) {
      const auto v = item.at("voxel").get<std::array<double, 3>>();
      s.landmarks.entries.push_back({item.at("name").get<std::string>(), {v[0], v[1], v[2]}});
    }
  } catch (const json::exception& e) {
    throw FormatError(lm_path.string() + ": " + e.what());
  }
  s.landmarks.validate(s.volume);
  return s;
}

}  // namespace collabdqn::synth
