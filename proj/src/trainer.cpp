#include "collabdqn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

#include "collabdqn/error.hpp"
#include "collabdqn/parallel.hpp"

namespace collabdqn::trainer {

using env::Vec3i;
using json = nlohmann::json;

void TrainConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must be in [0, 1]");
  if (!(eps_start >= 0.0 && eps_start <= 1.0)) fail("eps_start must be in [0, 1]");
  if (!(eps_end >= 0.0 && eps_end <= 1.0)) fail("eps_end must be in [0, 1]");
  if (eps_decay_steps < 0) fail("eps_decay_steps must be >= 0");
  if (target_sync < 1) fail("target_sync must be >= 1");
  if (batch < 1) fail("batch must be >= 1");
  if (replay_capacity < 1) fail("replay_capacity must be >= 1");
  if (warmup < 1 || warmup > replay_capacity) fail("warmup must be in [1, replay_capacity]");
  if (max_episode_steps < 1) fail("max_episode_steps must be >= 1");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (episodes < 0) fail("episodes must be >= 0");
  if (update_every < 1) fail("update_every must be >= 1");
  if (ladder.empty()) fail("ladder must not be empty");
  for (int s : ladder) {
    if (s < 1) fail("ladder steps must be >= 1");
  }
  if (roi < 1 || roi % 2 == 0) fail("roi must be odd");
  if (!(adam.lr > 0.0f)) fail("adam lr must be positive");
}

std::int64_t TrainConfig::decay_steps() const {
  return eps_decay_steps > 0 ? eps_decay_steps : std::max<std::int64_t>(1, total_steps * 3 / 4);
}

double epsilon_at(const TrainConfig& config, std::int64_t step) {
  const std::int64_t n = config.decay_steps();
  if (step >= n) return config.eps_end;
  if (step <= 0) return config.eps_start;
  const double f = static_cast<double>(step) / static_cast<double>(n);
  return config.eps_start + (config.eps_end - config.eps_start) * f;
}

int argmax_action(std::span<const float> q) {
  int best = 0;
  for (int a = 1; a < static_cast<int>(q.size()); ++a) {
    if (q[a] > q[best]) best = a;
  }
  return best;
}

int select_action(std::span<const float> q, double epsilon, Philox& rng) {
  if (q.size() != qmodel::kActions) throw ShapeError("select_action expects 6 Q-values");
  for (float v : q) {
    if (!std::isfinite(v)) throw NumericError("select_action: non-finite Q-value");
  }
  if (rng.uniform() < epsilon) return static_cast<int>(rng.uniform_int(qmodel::kActions));
  return argmax_action(q);
}

// --- replay ------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : ring_(capacity) {
  if (capacity < 1) throw ConfigError("replay capacity must be >= 1");
}

void ReplayBuffer::push(const Transition& t) {
  if (t.action >= qmodel::kActions) throw ConfigError("transition action out of range");
  if (!std::isfinite(t.reward)) throw NumericError("transition reward is not finite");
  ring_[head_] = t;
  head_ = (head_ + 1) % ring_.size();
  count_ = std::min(count_ + 1, ring_.size());
  ++inserted_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= count_) throw ReplayError("replay index out of range");
  const std::size_t oldest = (head_ + ring_.size() - count_) % ring_.size();
  return ring_[(oldest + i) % ring_.size()];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Philox& rng) const {
  if (count_ == 0) throw ReplayError("sampling from an empty replay buffer");
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = static_cast<std::size_t>(rng.uniform_int(count_));
  return out;
}

std::vector<float> bellman_targets(std::span<const float> rewards, std::span<const std::uint8_t> terminal,
                                   const Tensor& next_q, float gamma) {
  const std::size_t n = rewards.size();
  if (terminal.size() != n || next_q.rank() != 2 || next_q.dim(0) != n) {
    throw ShapeError("bellman_targets: batch sizes disagree");
  }
  const std::size_t a = next_q.dim(1);
  std::vector<float> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (terminal[i]) {
      y[i] = rewards[i];
      continue;
    }
    float best = next_q[i * a];
    for (std::size_t j = 1; j < a; ++j) best = std::max(best, next_q[i * a + j]);
    y[i] = rewards[i] + gamma * best;
  }
  return y;
}

Tensor stack_observations(const Dataset& data, std::span<const Transition* const> items, bool next, int roi) {
  const std::size_t r = static_cast<std::size_t>(roi);
  const std::size_t per = qmodel::kHistoryChannels * r * r * r;
  Tensor out({items.size(), qmodel::kHistoryChannels, r, r, r});
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Transition& t = *items[i];
    env::observe_into(data.volumes.at(t.volume), next ? t.next_history : t.history, roi, out.raw() + i * per);
  }
  return out;
}

std::string to_json_line(const EpisodeLog& log) {
  json j = {{"episode", log.episode},
            {"volume", log.volume},
            {"steps", log.steps},
            {"env_steps", log.env_steps},
            {"train_step", log.train_step},
            {"epsilon", log.epsilon},
            {"final_distance_mm", log.final_distance_mm},
            {"converged", log.converged}};
  j["mean_loss"] = std::isfinite(log.mean_loss) ? json(log.mean_loss) : json(nullptr);
  return j.dump();
}

// --- trainer -----------------------------------------------------------------

namespace {

Tensor rows(const Tensor& t, std::size_t begin, std::size_t count) {
  const std::size_t w = t.row_size();
  return Tensor({count, w}, std::vector<float>(t.raw() + begin * w, t.raw() + (begin + count) * w));
}

void load_grads(nn::GradientSet& set, const std::vector<nn::LayerGrads>& grads) {
  for (std::size_t j = 0; j < grads.size(); ++j) {
    set.grad(2 * j) = grads[j].weight;
    set.grad(2 * j + 1) = grads[j].bias;
  }
}

constexpr std::uint64_t kTrainerStream = 0x747261696e;  // "train"

}  // namespace

std::vector<float> update_on_batch(qmodel::CollabQNet& net, const qmodel::CollabQNet& target,
                                   std::vector<nn::GradientSet>& optimizer, const Dataset& data,
                                   const std::vector<std::vector<const Transition*>>& batches,
                                   float gamma, const nn::AdamConfig& adam) {
  const std::size_t K = net.agents;
  if (batches.size() != K) throw ConfigError("update_on_batch: need one batch slot per agent");
  if (optimizer.size() != K + 1) throw ConfigError("update_on_batch: optimizer groups do not match the network");
  std::vector<float> losses(K, std::numeric_limits<float>::quiet_NaN());
  std::vector<std::size_t> active, offset;
  std::vector<const Transition*> items;
  for (std::size_t k = 0; k < K; ++k) {
    if (batches[k].empty()) continue;
    active.push_back(k);
    offset.push_back(items.size());
    items.insert(items.end(), batches[k].begin(), batches[k].end());
  }
  if (active.empty()) return losses;
  const int roi = static_cast<int>(net.roi);
  const Tensor x = stack_observations(data, items, false, roi);
  const Tensor x_next = stack_observations(data, items, true, roi);

  // Targets come from the frozen network only.
  const Tensor f_next = target.features(x_next);
  std::vector<float> y(items.size());
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t n = batches[active[a]].size();
    const Tensor q_next = target.head_forward(active[a], rows(f_next, offset[a], n));
    std::vector<float> r(n);
    std::vector<std::uint8_t> term(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = items[offset[a] + i]->reward;
      term[i] = items[offset[a] + i]->terminal ? 1 : 0;
    }
    const std::vector<float> ya = bellman_targets(r, term, q_next, gamma);
    std::copy(ya.begin(), ya.end(), y.begin() + static_cast<std::ptrdiff_t>(offset[a]));
  }

  std::vector<Tensor> trunk_cache;
  const Tensor trunk_out = net.trunk.forward(x, trunk_cache);
  const Tensor feats = trunk_out.reshaped({items.size(), trunk_out.size() / items.size()});
  Tensor grad_feats(feats.shape(), 0.0f);
  const std::size_t F = feats.dim(1);

  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t k = active[a];
    const std::size_t n = batches[k].size();
    nn::Sequential& head = net.heads[k];
    std::vector<Tensor> cache;
    const Tensor q = head.forward(rows(feats, offset[a], n), cache);
    Tensor pred({n}), goal({n});
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = q[i * qmodel::kActions + items[offset[a] + i]->action];
      goal[i] = y[offset[a] + i];
    }
    const nn::LossResult loss = nn::td_squared_loss(pred, goal);
    losses[k] = loss.loss;
    Tensor grad_q(q.shape(), 0.0f);
    for (std::size_t i = 0; i < n; ++i) grad_q[i * qmodel::kActions + items[offset[a] + i]->action] = loss.grad[i];
    std::vector<nn::LayerGrads> grads = head.make_grads();
    const Tensor gf = head.backward(cache, grad_q, grads, true);
    std::copy(gf.raw(), gf.raw() + n * F, grad_feats.raw() + offset[a] * F);
    load_grads(optimizer[k + 1], grads);
  }

  // Trunk gradient is the sum of every active agent's contribution.
  std::vector<nn::LayerGrads> trunk_grads = net.trunk.make_grads();
  net.trunk.backward(trunk_cache, grad_feats.reshaped(trunk_out.shape()), trunk_grads, false);
  load_grads(optimizer[0], trunk_grads);

  nn::adam_step(qmodel::group_parameters(net, 0), optimizer[0], adam);
  for (std::size_t k : active) nn::adam_step(qmodel::group_parameters(net, k + 1), optimizer[k + 1], adam);
  return losses;
}

void Trainer::check_config() const {
  config_.validate();
  if (data_.size() == 0) throw ConfigError("training set is empty");
  if (data_.agents() == 0) throw ConfigError("no landmarks to train on");
  for (std::size_t v = 0; v < data_.size(); ++v) {
    if (data_.targets[v].size() != data_.agents()) {
      throw ConfigError("volume '" + data_.ids[v] + "' has the wrong number of targets");
    }
  }
}

Trainer::Trainer(Dataset data, TrainConfig config)
    : data_(std::move(data)), config_(std::move(config)), rng_(mix_seed(config_.seed, kTrainerStream)) {
  check_config();
  configure_allocator();
  net_ = qmodel::build(data_.agents(), config_.roi, config_.arch, config_.seed);
  target_ = qmodel::clone_target(net_);
  optimizer_ = qmodel::make_optimizer(net_);
  buffers_.assign(data_.agents(), ReplayBuffer(config_.replay_capacity));
}

Trainer::Trainer(Dataset data, TrainConfig config, const qmodel::Checkpoint& resume)
    : data_(std::move(data)), config_(std::move(config)), rng_(mix_seed(config_.seed, kTrainerStream)) {
  check_config();
  configure_allocator();
  qmodel::require_structure(resume.net, data_.agents(), config_.roi, config_.arch);
  net_ = resume.net;
  target_ = resume.target ? *resume.target : qmodel::clone_target(net_);
  optimizer_ = resume.optimizer.empty() ? qmodel::make_optimizer(net_) : resume.optimizer;
  buffers_.assign(data_.agents(), ReplayBuffer(config_.replay_capacity));
  train_step_ = resume.train_step;
  episode_ = resume.episode;
  if (resume.rng) rng_.set_state(*resume.rng);
  const json meta = json::parse(resume.metadata);
  env_steps_ = meta.value("env_steps", std::int64_t{0});
}

bool Trainer::warmed_up() const {
  return std::all_of(buffers_.begin(), buffers_.end(),
                     [&](const ReplayBuffer& b) { return b.size() >= config_.warmup; });
}

bool Trainer::budget_exhausted() const {
  return env_steps_ >= config_.total_steps || (config_.episodes > 0 && episode_ >= config_.episodes);
}

std::vector<float> Trainer::train_batch_step(const std::vector<bool>& frozen) {
  const std::size_t K = data_.agents();
  if (frozen.size() != K) throw ConfigError("frozen mask needs one entry per agent");
  std::vector<float> losses(K, std::numeric_limits<float>::quiet_NaN());
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < K; ++k) {
    if (!frozen[k]) active.push_back(k);
  }
  if (active.empty()) return losses;
  for (std::size_t k : active) {
    if (buffers_[k].size() < config_.warmup) {
      throw ReplayError("agent " + std::to_string(k) + " has " + std::to_string(buffers_[k].size()) +
                        " transitions, warmup needs " + std::to_string(config_.warmup));
    }
  }

  std::vector<std::vector<const Transition*>> batches(K);
  for (std::size_t k : active) {
    for (std::size_t i : buffers_[k].sample_indices(config_.batch, rng_)) batches[k].push_back(&buffers_[k].at(i));
  }
  losses = update_on_batch(net_, target_, optimizer_, data_, batches, static_cast<float>(config_.gamma), config_.adam);

  ++train_step_;
  if (train_step_ % config_.target_sync == 0) qmodel::sync_target(net_, target_);
  return losses;
}

EpisodeLog Trainer::run_episode() {
  const auto v = static_cast<std::size_t>(rng_.uniform_int(data_.size()));
  std::vector<Vec3i> starts(data_.agents());
  for (Vec3i& s : starts) s = env::sample_train_start(data_.volumes[v].shape, rng_);
  return run_episode(v, starts);
}

EpisodeLog Trainer::run_episode(std::size_t volume_index, std::span<const Vec3i> starts) {
  const std::size_t K = data_.agents();
  const int roi = static_cast<int>(config_.roi);
  if (volume_index >= data_.size()) throw ConfigError("volume index out of range");
  if (starts.size() != K) throw ConfigError("need one start per agent");
  EpisodeLog log;
  log.volume = volume_index;
  const env::Volume& volume = data_.volumes[log.volume];
  const auto& targets = data_.targets[log.volume];

  std::vector<env::AgentPose> poses(K);
  std::vector<bool> frozen(K, false);
  for (std::size_t k = 0; k < K; ++k) {
    poses[k] = env::reset(volume, starts[k], roi, config_.ladder).pose;
    if (env::mm_distance(starts[k], targets[k], volume.spacing) <= env::kConvergenceRadiusMm) frozen[k] = true;
  }

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  const std::size_t r = config_.roi;
  const std::size_t per = qmodel::kHistoryChannels * r * r * r;
  while (log.steps < config_.max_episode_steps && !budget_exhausted() &&
         std::find(frozen.begin(), frozen.end(), false) != frozen.end()) {
    const double eps = warmed_up() ? epsilon_at(config_, env_steps_) : 1.0;
    log.epsilon = eps;
    std::vector<int> actions(K, -1);
    std::vector<std::size_t> greedy;
    for (std::size_t k = 0; k < K; ++k) {
      if (frozen[k]) continue;
      if (rng_.uniform() < eps) {
        actions[k] = static_cast<int>(rng_.uniform_int(qmodel::kActions));
      } else {
        greedy.push_back(k);
      }
    }
    if (!greedy.empty()) {
      Tensor obs({greedy.size(), qmodel::kHistoryChannels, r, r, r});
      for (std::size_t g = 0; g < greedy.size(); ++g) {
        env::observe_into(volume, poses[greedy[g]].history, roi, obs.raw() + g * per);
      }
      const Tensor feats = net_.features(obs);
      for (std::size_t g = 0; g < greedy.size(); ++g) {
        const Tensor q = net_.head_forward(greedy[g], rows(feats, g, 1));
        actions[greedy[g]] = argmax_action(q.data());
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (frozen[k]) continue;
      Transition t;
      t.volume = static_cast<std::uint32_t>(log.volume);
      t.history = poses[k].history;
      t.action = static_cast<std::uint8_t>(actions[k]);
      const env::MoveResult m = env::move(poses[k], static_cast<env::Action>(actions[k]), volume, targets[k]);
      t.reward = static_cast<float>(m.reward);
      t.next_history = poses[k].history;
      t.terminal = m.terminal;
      buffers_[k].push(t);
      if (m.terminal) {
        frozen[k] = true;
        poses[k].frozen = true;
      } else if (poses[k].max_visits() >= env::kOscillationVisits && !poses[k].at_finest_scale()) {
        env::reduce_scale(poses[k]);
      }
    }
    ++env_steps_;
    ++log.steps;
    if (warmed_up() && env_steps_ % config_.update_every == 0) {
      for (float l : train_batch_step(frozen)) {
        if (std::isfinite(l)) {
          loss_sum += l;
          ++loss_count;
        }
      }
    }
  }

  ++episode_;
  log.episode = episode_;
  log.env_steps = env_steps_;
  log.train_step = train_step_;
  log.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k < K; ++k) {
    log.final_distance_mm.push_back(env::mm_distance(poses[k].position, targets[k], volume.spacing));
    log.converged.push_back(frozen[k]);
  }
  return log;
}

void Trainer::train(const std::function<void(const EpisodeLog&)>& on_episode) {
  while (!budget_exhausted()) {
    const EpisodeLog log = run_episode();
    if (on_episode) on_episode(log);
  }
}

qmodel::Checkpoint Trainer::checkpoint(const std::string& extra_metadata) const {
  qmodel::Checkpoint ck{net_};
  ck.target = target_;
  ck.optimizer = optimizer_;
  ck.train_step = train_step_;
  ck.episode = episode_;
  ck.rng = rng_.state();
  json meta = json::parse(extra_metadata);
  if (!meta.is_object()) throw ConfigError("checkpoint metadata must be a JSON object");
  meta["env_steps"] = env_steps_;
  ck.metadata = meta.dump();
  return ck;
}

// --- test episodes -----------------------------------------------------------

Policy greedy_policy(const qmodel::CollabQNet& net) {
  return [&net](std::span<const Tensor> observations, std::span<const std::size_t> agents) {
    const std::size_t n = observations.size();
    const Shape& s = observations.front().shape();
    const std::size_t per = shape_numel(s);
    std::vector<float> stacked;
    stacked.reserve(n * per);
    for (const Tensor& o : observations) stacked.insert(stacked.end(), o.data().begin(), o.data().end());
    const Tensor feats = net.features(Tensor({n, s[0], s[1], s[2], s[3]}, std::move(stacked)));
    std::vector<int> actions(n);
    for (std::size_t i = 0; i < n; ++i) {
      actions[i] = argmax_action(net.head_forward(agents[i], rows(feats, i, 1)).data());
    }
    return actions;
  };
}

std::vector<AgentResult> run_test_episode(const env::Volume& volume, std::size_t agents, const Vec3i& start,
                                          const TestConfig& config, const Policy& policy) {
  if (agents < 1) throw ConfigError("test episode needs at least one agent");
  const env::Vec3d dummy = env::to_vec3d(start);  // rewards are unused at test time
  std::vector<env::AgentPose> poses(agents, env::reset(volume, start, config.roi, config.ladder).pose);
  std::vector<AgentResult> results(agents);
  std::vector<bool> done(agents, false);
  for (;;) {
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < agents; ++k) {
      if (done[k]) continue;
      AgentResult& res = results[k];
      const env::Outcome o = env::check_termination(poses[k], env::Mode::test, res.frames, config.max_frames);
      if (o == env::Outcome::oscillating) {
        const int scale = poses[k].step_scale();
        if (env::reduce_scale(poses[k])) {
          res.reduced_from.push_back(scale);
        } else {
          res.outcome = o;
          done[k] = true;
        }
      } else if (o != env::Outcome::continue_episode) {
        res.outcome = o;
        done[k] = true;
      }
      if (!done[k]) active.push_back(k);
    }
    if (active.empty()) break;
    std::vector<Tensor> obs;
    obs.reserve(active.size());
    for (std::size_t k : active) obs.push_back(env::observe(volume, poses[k].history, config.roi));
    const std::vector<int> actions = policy(obs, active);
    if (actions.size() != active.size()) throw ConfigError("policy returned the wrong number of actions");
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t k = active[i];
      if (actions[i] < 0 || actions[i] >= static_cast<int>(qmodel::kActions)) {
        throw ConfigError("policy returned an invalid action");
      }
      env::move(poses[k], static_cast<env::Action>(actions[i]), volume, dummy);
      ++results[k].frames;
    }
  }
  for (std::size_t k = 0; k < agents; ++k) {
    results[k].final_position = poses[k].position;
    results[k].final_scale_index = poses[k].scale_index;
  }
  return results;
}

}  // namespace collabdqn::trainer
