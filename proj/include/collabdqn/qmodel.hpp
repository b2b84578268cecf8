#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "collabdqn/nn.hpp"
#include "collabdqn/rng.hpp"
#include "collabdqn/tensor.hpp"

namespace collabdqn::qmodel {

inline constexpr std::size_t kHistoryChannels = 4;
inline constexpr std::size_t kActions = 6;

/// One trunk stage: conv3d(channels, kernel) + ReLU, optionally + 2^3 max-pool.
struct ConvStage {
  std::size_t channels = 16;
  std::size_t kernel = 3;
  bool pool = true;
  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

struct Architecture {
  std::vector<ConvStage> trunk;
  std::vector<std::size_t> head_hidden;  // dense widths before the 6-wide output

  /// Default for R = 15: conv 16/32/32, kernels 3/3/2, pooling after the
  /// first two stages; heads 128 -> 64 -> 6.
  static Architecture desk();
  /// Three k=3 conv stages each followed by a pool (needs R >= 23).
  static Architecture uniform_k3();
  /// Smallest odd R the trunk accepts.
  [[nodiscard]] std::size_t min_roi() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

std::string describe(const Architecture& arch);

struct ParamCount {
  std::size_t trunk = 0;
  std::size_t per_head = 0;
  std::size_t total = 0;
};

/// 1 - total(shared) / (K * total(single)) = (K-1) * trunk / (K * (trunk + head)).
double reduction_ratio(std::size_t trunk, std::size_t head, std::size_t agents);

/// Shared conv trunk feeding K independent dense heads.
class CollabQNet {
 public:
  Architecture arch;
  std::size_t agents = 0;
  std::size_t roi = 0;
  nn::Sequential trunk;
  std::vector<nn::Sequential> heads;

  [[nodiscard]] std::size_t feature_width() const;
  [[nodiscard]] ParamCount param_count() const;
  [[nodiscard]] double reduction_ratio() const;

  /// Named parameter tensors: trunk first, then head 0, head 1, ...
  [[nodiscard]] std::vector<std::string> parameter_names() const;
  std::vector<Tensor*> parameters();
  [[nodiscard]] std::vector<const Tensor*> parameters() const;

  /// observations[k] is agent k's [4, R, R, R] state. Returns [K, 6].
  [[nodiscard]] Tensor forward(std::span<const Tensor> observations) const;
  /// Batched trunk features for [B, 4, R, R, R] -> [B, F].
  [[nodiscard]] Tensor features(const Tensor& batch) const;
  /// Q-values of head k for features [B, F] -> [B, 6].
  [[nodiscard]] Tensor head_forward(std::size_t agent, const Tensor& features) const;

  /// Same architecture, agent count and ROI.
  [[nodiscard]] bool same_structure(const CollabQNet& other) const;

  friend bool operator==(const CollabQNet&, const CollabQNet&) = default;
};

/// Trunk weights come from mix_seed(seed, 0); head k uses head_seeds[k] when
/// given, otherwise mix_seed(seed, k + 1).
/// Throws ArchitectureError naming the failing layer when R is too small.
CollabQNet build(std::size_t agents, std::size_t roi, const Architecture& arch, std::uint64_t seed,
                 std::span<const std::uint64_t> head_seeds = {});

/// Throws ArchitectureError unless `net` has exactly this shape.
void require_structure(const CollabQNet& net, std::size_t agents, std::size_t roi, const Architecture& arch);

/// Deep copy used as the frozen target network.
CollabQNet clone_target(const CollabQNet& net);
/// Copies all parameters bitwise; ArchitectureError on mismatch.
void sync_target(const CollabQNet& net, CollabQNet& target);

/// Adam state in K + 1 groups: the trunk, then one per head. Each group keeps
/// its own step count so a head skipped while frozen is left untouched.
std::vector<nn::GradientSet> make_optimizer(const CollabQNet& net);
/// Parameters of group g in the order used by make_optimizer.
std::vector<Tensor*> group_parameters(CollabQNet& net, std::size_t group);

// --- checkpoints -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[9] = "CLDQNCKP";

struct Checkpoint {
  CollabQNet net;
  std::optional<CollabQNet> target;
  /// Empty, or the K + 1 groups from make_optimizer.
  std::vector<nn::GradientSet> optimizer;
  std::int64_t train_step = 0;
  std::int64_t episode = 0;
  std::optional<Philox::State> rng;
  std::string metadata = "{}";  // free-form JSON object (configs, provenance)
};

/// Layout: magic, u32 version, u64 header length, JSON header (architecture
/// and tensor directory with offsets), then little-endian f32 payloads.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws FormatError (bad magic), VersionError, TruncatedError or
/// TensorCountError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace collabdqn::qmodel
