#pragma once

#include <array>
#include <cstdint>

namespace collabdqn {

/// Philox4x32-10 counter-based generator.
///
/// The output is a pure function of (seed, stream, counter), so datasets and
/// training runs are reproducible on any platform. All distributions below are
/// implemented here instead of using <random> distributions, whose algorithms
/// differ between standard library vendors.
class Philox {
 public:
  struct State {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t counter = 0;
    std::uint32_t index = 4;  // position inside the current 4-word block
  };

  explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0);

  /// Independent generator for a sub-task (sample i, head k, ...).
  [[nodiscard]] Philox derive(std::uint64_t stream) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be > 0. Unbiased (rejection).
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller (one variate per call).
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  [[nodiscard]] State state() const { return state_; }
  void set_state(const State& s);

  /// One raw Philox block; exposed for known-answer tests.
  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key);

 private:
  void refill();

  State state_;
  std::array<std::uint32_t, 4> buffer_{};
};

/// SplitMix64 finalizer, used to turn (seed, tag) pairs into seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace collabdqn
