#include "collabdqn/rng.hpp"

#include <cmath>
#include <numbers>

namespace collabdqn {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::array<std::uint32_t, 4> Philox::block(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

Philox::Philox(std::uint64_t seed, std::uint64_t stream) {
  state_.seed = seed;
  state_.stream = stream;
}

Philox Philox::derive(std::uint64_t stream) const {
  return Philox(mix_seed(state_.seed, state_.stream), stream);
}

void Philox::set_state(const State& s) {
  state_ = s;
  if (state_.index < 4) {
    // Regenerate the block the saved index points into.
    state_.counter -= 1;
    const std::uint32_t idx = state_.index;
    refill();
    state_.index = idx;
  }
}

void Philox::refill() {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(state_.counter), static_cast<std::uint32_t>(state_.counter >> 32),
      static_cast<std::uint32_t>(state_.stream), static_cast<std::uint32_t>(state_.stream >> 32)};
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(state_.seed),
                                            static_cast<std::uint32_t>(state_.seed >> 32)};
  buffer_ = block(ctr, key);
  state_.counter += 1;
  state_.index = 0;
}

std::uint32_t Philox::next_u32() {
  if (state_.index >= 4) refill();
  return buffer_[state_.index++];
}

std::uint64_t Philox::next_u64() {
  const std::uint64_t hi = next_u32();
  return (hi << 32) | next_u32();
}

double Philox::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Philox::uniform_int(std::uint64_t n) {
  // Reject the top partial bucket so every residue is equally likely.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Philox::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace collabdqn
