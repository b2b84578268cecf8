#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "collabdqn/dataset.hpp"
#include "collabdqn/env.hpp"
#include "collabdqn/nn.hpp"
#include "collabdqn/qmodel.hpp"
#include "collabdqn/rng.hpp"

namespace collabdqn::trainer {

struct TrainConfig {
  double gamma = 0.9;
  double eps_start = 1.0;
  double eps_end = 0.1;
  std::int64_t eps_decay_steps = 0;  // 0: 75% of total_steps
  std::int64_t target_sync = 500;    // gradient updates between target syncs
  std::size_t batch = 32;            // per agent
  std::size_t replay_capacity = 50000;  // per agent
  std::size_t warmup = 2000;         // transitions per agent before updates
  int max_episode_steps = 200;
  std::int64_t total_steps = 12000;  // environment steps, warmup included
  std::int64_t episodes = 0;         // optional episode cap, 0 = none
  int update_every = 4;              // environment steps per gradient update
  std::uint64_t seed = 1;
  std::vector<int> ladder = env::kDefaultLadder;
  std::size_t roi = 15;
  qmodel::Architecture arch = qmodel::Architecture::desk();
  nn::AdamConfig adam{5e-4f};

  /// Throws ConfigError naming the offending field.
  void validate() const;
  [[nodiscard]] std::int64_t decay_steps() const;
};

/// Linear from eps_start to eps_end over decay_steps(), then constant.
double epsilon_at(const TrainConfig& config, std::int64_t step);

/// With probability epsilon a uniform action, else the argmax (lowest index
/// on ties). Always draws one uniform for the coin, then one integer if
/// exploring.
int select_action(std::span<const float> q, double epsilon, Philox& rng);
int argmax_action(std::span<const float> q);

/// Compact transition: observations are rebuilt from the volume and the four
/// history positions when sampled.
struct Transition {
  std::uint32_t volume = 0;
  std::array<env::Vec3i, env::kHistoryLength> history{};
  std::uint8_t action = 0;
  float reward = 0.0f;
  std::array<env::Vec3i, env::kHistoryLength> next_history{};
  bool terminal = false;
  friend bool operator==(const Transition&, const Transition&) = default;
};

/// Fixed-capacity ring; the oldest transition is evicted first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1);

  void push(const Transition& t);
  [[nodiscard]] std::size_t size() const { return count_; }
  [[nodiscard]] std::size_t capacity() const { return ring_.size(); }
  [[nodiscard]] std::uint64_t inserted() const { return inserted_; }
  /// i-th oldest held transition.
  [[nodiscard]] const Transition& at(std::size_t i) const;
  /// n indices drawn uniformly with replacement (into at()).
  std::vector<std::size_t> sample_indices(std::size_t n, Philox& rng) const;

  friend bool operator==(const ReplayBuffer&, const ReplayBuffer&) = default;

 private:
  std::vector<Transition> ring_;
  std::size_t head_ = 0;  // next write slot
  std::size_t count_ = 0;
  std::uint64_t inserted_ = 0;
};

/// y_i = r_i if terminal, else r_i + gamma * max_a next_q[i, a].
std::vector<float> bellman_targets(std::span<const float> rewards, std::span<const std::uint8_t> terminal,
                                   const Tensor& next_q, float gamma);

/// Stacks the [4, R, R, R] observations of the given histories into
/// [n, 4, R, R, R].
Tensor stack_observations(const Dataset& data, std::span<const Transition* const> items, bool next, int roi);

/// One Adam update from explicit per-agent batches. batches[k] empty means
/// agent k is skipped: its head and its Adam group stay untouched. Trunk
/// gradients are summed over the agents present. Returns the TD loss per
/// agent (NaN when skipped). Does not touch the target network.
std::vector<float> update_on_batch(qmodel::CollabQNet& net, const qmodel::CollabQNet& target,
                                   std::vector<nn::GradientSet>& optimizer, const Dataset& data,
                                   const std::vector<std::vector<const Transition*>>& batches,
                                   float gamma, const nn::AdamConfig& adam);

struct EpisodeLog {
  std::int64_t episode = 0;
  std::size_t volume = 0;
  int steps = 0;
  std::int64_t env_steps = 0;    // cumulative
  std::int64_t train_step = 0;   // cumulative gradient updates
  double epsilon = 0.0;
  double mean_loss = 0.0;        // over updates in the episode, NaN if none
  std::vector<double> final_distance_mm;
  std::vector<bool> converged;
};

std::string to_json_line(const EpisodeLog& log);

/// Single writer of the network, target, optimizer and buffers.
class Trainer {
 public:
  /// Fresh network built from config.seed.
  Trainer(Dataset data, TrainConfig config);
  /// Resumes parameters, optimizer, counters and RNG from a checkpoint.
  /// Buffers restart empty and refill through warmup.
  Trainer(Dataset data, TrainConfig config, const qmodel::Checkpoint& resume);

  /// One update over the agents not in `frozen`. Returns the TD loss per
  /// agent (NaN for frozen agents). All frozen: no change, no step.
  std::vector<float> train_batch_step(const std::vector<bool>& frozen);

  /// Runs one training episode on a random volume from random starts.
  EpisodeLog run_episode();
  /// Same, with the volume and per-agent starts given.
  EpisodeLog run_episode(std::size_t volume, std::span<const env::Vec3i> starts);

  /// Episodes until the step budget (or episode cap) is reached.
  void train(const std::function<void(const EpisodeLog&)>& on_episode = {});

  [[nodiscard]] bool warmed_up() const;
  [[nodiscard]] bool budget_exhausted() const;
  [[nodiscard]] qmodel::Checkpoint checkpoint(const std::string& extra_metadata = "{}") const;

  [[nodiscard]] const qmodel::CollabQNet& net() const { return net_; }
  qmodel::CollabQNet& net() { return net_; }
  [[nodiscard]] const qmodel::CollabQNet& target() const { return target_; }
  [[nodiscard]] const std::vector<ReplayBuffer>& buffers() const { return buffers_; }
  std::vector<ReplayBuffer>& buffers() { return buffers_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const Dataset& data() const { return data_; }
  [[nodiscard]] std::int64_t train_step() const { return train_step_; }
  [[nodiscard]] std::int64_t env_steps() const { return env_steps_; }
  [[nodiscard]] std::int64_t episode() const { return episode_; }

 private:
  void check_config() const;

  Dataset data_;
  TrainConfig config_;
  qmodel::CollabQNet net_;
  qmodel::CollabQNet target_;
  std::vector<nn::GradientSet> optimizer_;
  std::vector<ReplayBuffer> buffers_;
  Philox rng_;
  std::int64_t train_step_ = 0;
  std::int64_t env_steps_ = 0;
  std::int64_t episode_ = 0;
};

// --- greedy test episodes ----------------------------------------------------

struct TestConfig {
  std::vector<int> ladder = env::kDefaultLadder;
  int max_frames = 500;
  int roi = 15;
};

/// Chooses an action for each listed agent from its observation.
using Policy = std::function<std::vector<int>(std::span<const Tensor> observations,
                                              std::span<const std::size_t> agents)>;

/// argmax of the network's Q-values.
Policy greedy_policy(const qmodel::CollabQNet& net);

struct AgentResult {
  env::Vec3i final_position;
  int frames = 0;
  env::Outcome outcome = env::Outcome::continue_episode;
  std::vector<int> reduced_from;  // step scale at each oscillation-triggered reduction
  std::size_t final_scale_index = 0;
};

/// All agents start at `start` and move together; each stops on its own when
/// it oscillates at the finest scale or spends max_frames moves. An
/// oscillation at a coarser scale reduces the scale instead.
std::vector<AgentResult> run_test_episode(const env::Volume& volume, std::size_t agents,
                                          const env::Vec3i& start, const TestConfig& config,
                                          const Policy& policy);

}  // namespace collabdqn::trainer
