#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "collabdqn/error.hpp"
#include "collabdqn/trainer.hpp"

using namespace collabdqn;
using namespace collabdqn::trainer;

namespace {

qmodel::Architecture tiny_arch() { return {{{4, 3, true}, {8, 3, true}, {8, 2, false}}, {16}}; }

Dataset tiny_data(std::size_t volumes, std::size_t agents, std::uint64_t seed = 3) {
  synth::SynthConfig sc;
  sc.extent = {24, 24, 24};
  sc.translation_vox = 2;
  sc.landmarks = synth::default_template(agents);
  sc.seed = seed;
  std::vector<std::string> ids, names;
  for (std::size_t i = 0; i < volumes; ++i) ids.push_back("v" + std::to_string(i));
  for (const auto& l : sc.landmarks) names.push_back(l.name);
  return make_dataset(synth::generate(sc, volumes), ids, names);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.arch = tiny_arch();
  c.batch = 8;
  c.warmup = 16;
  c.replay_capacity = 256;
  c.max_episode_steps = 20;
  c.total_steps = 200;
  c.target_sync = 10;
  c.seed = 11;
  return c;
}

void fill_buffers(Trainer& t) {
  while (!t.warmed_up()) t.run_episode();
}

std::vector<Tensor> snapshot(const nn::Sequential& s) {
  std::vector<Tensor> out;
  for (const Tensor* p : s.parameters()) out.push_back(*p);
  return out;
}

bool same(const nn::Sequential& s, const std::vector<Tensor>& snap) { return snapshot(s) == snap; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("select_action") {
  TEST_CASE("greedy and tie-break") {
    Philox rng(1);
    const float q1[] = {0, 3, 1, 1, 1, 1};
    CHECK(select_action(q1, 0.0, rng) == 1);
    const float q2[] = {2, 2, 0, 0, 0, 0};
    CHECK(select_action(q2, 0.0, rng) == 0);
  }

  TEST_CASE("epsilon 1 is uniform within 3 sigma") {
    Philox rng(42);
    const float q[] = {0, 9, 0, 0, 0, 0};
    std::array<int, 6> counts{};
    for (int i = 0; i < 60000; ++i) ++counts[select_action(q, 1.0, rng)];
    const double sigma = std::sqrt(60000.0 * (1.0 / 6.0) * (5.0 / 6.0));
    for (int c : counts) CHECK(std::fabs(c - 10000.0) < 3 * sigma);
  }

  TEST_CASE("non-finite Q is rejected") {
    Philox rng(1);
    const float q[] = {0, NAN, 0, 0, 0, 0};
    CHECK_THROWS_AS(select_action(q, 0.0, rng), NumericError);
  }
}

TEST_SUITE("epsilon schedule") {
  TEST_CASE("linear then clamped") {
    TrainConfig c;
    c.eps_decay_steps = 10000;
    CHECK(epsilon_at(c, 0) == 1.0);
    CHECK(epsilon_at(c, 5000) == doctest::Approx(0.55).epsilon(1e-12));
    CHECK(epsilon_at(c, 10000) == doctest::Approx(0.1));
    CHECK(epsilon_at(c, 50000) == doctest::Approx(0.1));
    double prev = 2.0;
    for (std::int64_t s = 0; s <= 12000; s += 37) {
      const double e = epsilon_at(c, s);
      CHECK(e <= prev);
      CHECK(e >= 0.1 - 1e-12);
      prev = e;
    }
  }

  TEST_CASE("default decay covers 75% of the budget") {
    TrainConfig c;
    c.total_steps = 20000;
    CHECK(c.decay_steps() == 15000);
  }
}

TEST_SUITE("bellman_targets") {
  TEST_CASE("examples") {
    const Tensor next({1, 6}, std::vector<float>{0, 2, 1, 0, 0, 0});
    const float r[] = {1.0f};
    const std::uint8_t term[] = {1};
    const std::uint8_t live[] = {0};
    CHECK(bellman_targets(r, term, next, 0.9f)[0] == 1.0f);
    CHECK(bellman_targets(r, live, next, 0.9f)[0] == doctest::Approx(2.8));
  }

  TEST_CASE("mixed batch matches a per-transition loop") {
    Philox rng(5);
    const std::size_t n = 8;
    Tensor next({n, 6});
    for (float& v : next.data()) v = static_cast<float>(rng.uniform(-3, 3));
    std::vector<float> r(n);
    std::vector<std::uint8_t> term(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = static_cast<float>(rng.uniform(-2, 2));
      term[i] = i % 3 == 0;
    }
    const auto y = bellman_targets(r, term, next, 0.9f);
    for (std::size_t i = 0; i < n; ++i) {
      float m = -INFINITY;
      for (int a = 0; a < 6; ++a) m = std::max(m, next[i * 6 + a]);
      const float oracle = term[i] ? r[i] : r[i] + 0.9f * m;
      CHECK(y[i] == oracle);
    }
  }
}

TEST_SUITE("replay") {
  TEST_CASE("ring keeps the last C in order") {
    ReplayBuffer b(5);
    for (int i = 0; i < 12; ++i) {
      Transition t;
      t.reward = static_cast<float>(i);
      b.push(t);
    }
    CHECK(b.size() == 5);
    CHECK(b.inserted() == 12);
    for (std::size_t i = 0; i < 5; ++i) CHECK(b.at(i).reward == static_cast<float>(7 + i));
    CHECK_THROWS_AS((void)b.at(5), ReplayError);
  }

  TEST_CASE("invalid transitions and empty sampling") {
    ReplayBuffer b(2);
    Philox rng(1);
    CHECK_THROWS_AS((void)b.sample_indices(1, rng), ReplayError);
    Transition t;
    t.action = 6;
    CHECK_THROWS_AS(b.push(t), ConfigError);
    t.action = 0;
    t.reward = NAN;
    CHECK_THROWS_AS(b.push(t), NumericError);
  }
}

TEST_SUITE("train_batch_step") {
  TEST_CASE("before warmup is an error") {
    Trainer t(tiny_data(2, 1), tiny_config());
    CHECK_THROWS_AS(t.train_batch_step({false}), ReplayError);
  }

  TEST_CASE("all frozen: nothing changes") {
    Trainer t(tiny_data(2, 2), tiny_config());
    fill_buffers(t);
    const auto before = t.net();
    const std::int64_t step = t.train_step();
    const auto losses = t.train_batch_step({true, true});
    CHECK(t.net() == before);
    CHECK(t.train_step() == step);
    CHECK(std::isnan(losses[0]));
  }

  TEST_CASE("frozen agent: head and buffer bitwise unchanged, others move") {
    Trainer t(tiny_data(2, 3), tiny_config());
    fill_buffers(t);
    const auto trunk = snapshot(t.net().trunk);
    const auto h0 = snapshot(t.net().heads[0]);
    const auto h1 = snapshot(t.net().heads[1]);
    const auto h2 = snapshot(t.net().heads[2]);
    const ReplayBuffer buf1 = t.buffers()[1];
    const std::int64_t step = t.train_step();
    const auto losses = t.train_batch_step({false, true, false});
    CHECK(same(t.net().heads[1], h1));
    CHECK(t.buffers()[1] == buf1);
    CHECK_FALSE(same(t.net().trunk, trunk));
    CHECK_FALSE(same(t.net().heads[0], h0));
    CHECK_FALSE(same(t.net().heads[2], h2));
    CHECK(std::isnan(losses[1]));
    CHECK(std::isfinite(losses[0]));
    CHECK(t.train_step() == step + 1);
  }

  TEST_CASE("target syncs every N updates and is stale in between") {
    TrainConfig c = tiny_config();
    c.target_sync = 3;
    Trainer t(tiny_data(2, 1), c);
    fill_buffers(t);
    while (t.train_step() % 3 != 0) t.train_batch_step({false});
    REQUIRE(t.target() == t.net());
    const auto initial = t.target();
    t.train_batch_step({false});
    t.train_batch_step({false});
    CHECK(t.target() == initial);
    CHECK_FALSE(t.net() == initial);
    t.train_batch_step({false});
    CHECK(t.target() == t.net());
  }

  TEST_CASE("overfitting one fixed batch drives the loss down") {
    const Dataset data = tiny_data(2, 1);
    TrainConfig c = tiny_config();
    Trainer t(data, c);
    fill_buffers(t);
    qmodel::CollabQNet net = t.net();
    const qmodel::CollabQNet target = qmodel::clone_target(net);
    auto opt = qmodel::make_optimizer(net);
    std::vector<std::vector<const Transition*>> batch(1);
    for (std::size_t i = 0; i < 8; ++i) batch[0].push_back(&t.buffers()[0].at(i));
    const float first = update_on_batch(net, target, opt, t.data(), batch, 0.9f, c.adam)[0];
    float last = first;
    int steps = 1;
    for (; steps < 500 && last >= 0.1f * first; ++steps) {
      last = update_on_batch(net, target, opt, t.data(), batch, 0.9f, c.adam)[0];
    }
    CAPTURE(first);
    CAPTURE(steps);
    CHECK(last < 0.1f * first);
  }

  TEST_CASE("trunk gradient is the sum over agents") {
    // Two identical heads fed identical batches must move the trunk exactly
    // as one head with the summed (doubled) gradient would; checked through
    // the Adam first moment, which is linear in the gradient.
    const Dataset one = tiny_data(2, 1);
    const Dataset two = select_landmarks(one, {0, 0});
    TrainConfig c = tiny_config();
    Trainer t(one, c);
    fill_buffers(t);
    std::vector<const Transition*> items;
    for (std::size_t i = 0; i < 8; ++i) items.push_back(&t.buffers()[0].at(i));

    const std::uint64_t seeds[] = {5, 5};
    qmodel::CollabQNet n2 = qmodel::build(2, 15, c.arch, 9, seeds);
    qmodel::CollabQNet n1 = qmodel::build(1, 15, c.arch, 9, std::span<const std::uint64_t>(seeds, 1));
    auto o1 = qmodel::make_optimizer(n1);
    auto o2 = qmodel::make_optimizer(n2);
    update_on_batch(n1, qmodel::clone_target(n1), o1, one, {items}, 0.9f, c.adam);
    update_on_batch(n2, qmodel::clone_target(n2), o2, two, {items, items}, 0.9f, c.adam);
    for (std::size_t i = 0; i < o1[0].size(); ++i) {
      const Tensor& m1 = o1[0].first_moment(i);
      const Tensor& m2 = o2[0].first_moment(i);
      for (std::size_t j = 0; j < m1.size(); ++j) CHECK(m2[j] == doctest::Approx(2 * m1[j]).epsilon(1e-4).scale(1e-6));
    }
    CHECK(n2.heads[0] == n2.heads[1]);
  }
}

TEST_SUITE("run_episode") {
  TEST_CASE("agent spawned on its target is frozen at step 0") {
    Trainer t(tiny_data(1, 2), tiny_config());
    const auto& tg = t.data().targets[0];
    const env::Vec3i on{static_cast<int>(std::lround(tg[0].x)), static_cast<int>(std::lround(tg[0].y)),
                        static_cast<int>(std::lround(tg[0].z))};
    REQUIRE(env::mm_distance(on, tg[0], {1, 1, 1}) <= 1.0);
    const env::Vec3i starts[] = {on, {12, 12, 12}};
    const EpisodeLog log = t.run_episode(0, starts);
    CHECK(t.buffers()[0].size() == 0);
    CHECK(t.buffers()[1].size() > 0);
    CHECK(log.converged[0]);
  }

  TEST_CASE("random policy ends at exactly max steps") {
    TrainConfig c = tiny_config();
    c.max_episode_steps = 200;
    c.warmup = 256;  // stays in warmup: epsilon 1, no updates
    c.total_steps = 100000;
    Trainer t(tiny_data(1, 1), c);
    // Far corner start; the target sits near the middle.
    const env::Vec3i starts[] = {{3, 3, 20}};
    const EpisodeLog log = t.run_episode(0, starts);
    CHECK_FALSE(log.converged[0]);
    CHECK(log.steps == 200);
    CHECK(t.buffers()[0].size() == 200);
    CHECK(t.train_step() == 0);
  }

  TEST_CASE("fixed seed gives identical trajectories") {
    Trainer a(tiny_data(2, 2), tiny_config());
    Trainer b(tiny_data(2, 2), tiny_config());
    for (int i = 0; i < 4; ++i) {
      const EpisodeLog la = a.run_episode();
      const EpisodeLog lb = b.run_episode();
      CHECK(to_json_line(la) == to_json_line(lb));
    }
    CHECK(a.buffers() == b.buffers());
    CHECK(a.net() == b.net());
  }

  TEST_CASE("frozen agents stop contributing transitions") {
    Trainer t(tiny_data(1, 1), tiny_config());
    const EpisodeLog log = t.run_episode();
    if (log.converged[0]) {
      CHECK(t.buffers()[0].at(t.buffers()[0].size() - 1).terminal);
    }
    CHECK(t.buffers()[0].size() == static_cast<std::size_t>(log.steps));
  }
}

TEST_SUITE("train") {
  TEST_CASE("budget, log lines and resume") {
    TrainConfig c = tiny_config();
    Trainer t(tiny_data(2, 2), c);
    std::vector<std::string> lines;
    t.train([&](const EpisodeLog& l) { lines.push_back(to_json_line(l)); });
    CHECK(t.env_steps() == c.total_steps);
    CHECK(static_cast<std::int64_t>(lines.size()) == t.episode());
    CHECK(t.train_step() > 0);

    const auto path = std::filesystem::temp_directory_path() / "collabdqn_trainer_resume.ckpt";
    qmodel::save_checkpoint(t.checkpoint(), path);
    TrainConfig more = c;
    more.total_steps = 300;
    Trainer r(tiny_data(2, 2), more, qmodel::load_checkpoint(path));
    CHECK(r.train_step() == t.train_step());
    CHECK(r.env_steps() == t.env_steps());
    CHECK(r.episode() == t.episode());
    r.train();
    CHECK(r.env_steps() == 300);
    CHECK(r.train_step() > t.train_step());
    CHECK(r.episode() > t.episode());
  }

  TEST_CASE("episode cap") {
    TrainConfig c = tiny_config();
    c.episodes = 3;
    c.total_steps = 100000;
    Trainer t(tiny_data(1, 1), c);
    int n = 0;
    t.train([&](const EpisodeLog&) { ++n; });
    CHECK(n == 3);
  }

  TEST_CASE("same seed, single thread: byte-identical checkpoints") {
    const auto dir = std::filesystem::temp_directory_path();
    for (int run = 0; run < 2; ++run) {
      Trainer t(tiny_data(2, 2), tiny_config());
      t.train();
      qmodel::save_checkpoint(t.checkpoint(), dir / ("collabdqn_det" + std::to_string(run) + ".ckpt"));
    }
    CHECK(slurp(dir / "collabdqn_det0.ckpt") == slurp(dir / "collabdqn_det1.ckpt"));
  }

  TEST_CASE("config validation and missing landmarks") {
    TrainConfig c;
    c.gamma = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.roi = 14;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.warmup = c.replay_capacity + 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    synth::SynthConfig sc;
    sc.extent = {16, 16, 16};
    sc.translation_vox = 0;
    sc.template_unit = 0.2;
    try {
      (void)make_dataset(synth::generate(sc, 1), {"vol0"}, {"inner_px", "nope"});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("vol0") != std::string::npos);
      CHECK(std::string(e.what()).find("nope") != std::string::npos);
    }
  }
}

TEST_SUITE("test episodes") {
  TEST_CASE("random policy always terminates within the budget") {
    const Dataset data = tiny_data(2, 1);
    Philox rng(77);
    const Policy random = [&](std::span<const Tensor>, std::span<const std::size_t> agents) {
      std::vector<int> a(agents.size());
      for (int& x : a) x = static_cast<int>(rng.uniform_int(6));
      return a;
    };
    TestConfig tc;
    tc.max_frames = 60;
    for (int e = 0; e < 50; ++e) {
      const auto& v = data.volumes[e % 2];
      const env::Vec3i start = env::sample_train_start(v.shape, rng);
      const auto res = run_test_episode(v, 2, start, tc, random);
      for (const AgentResult& r : res) {
        CHECK(r.frames <= tc.max_frames);
        CHECK(r.outcome != env::Outcome::continue_episode);
        if (r.outcome == env::Outcome::oscillating) {
          CHECK(r.final_scale_index == tc.ladder.size() - 1);
          CHECK(r.reduced_from.size() == r.final_scale_index);
        }
      }
    }
  }

  TEST_CASE("greedy policy matches the network argmax") {
    const qmodel::CollabQNet net = qmodel::build(2, 15, tiny_arch(), 4);
    const Policy p = greedy_policy(net);
    const Dataset data = tiny_data(1, 2);
    const std::array<env::Vec3i, 4> h{env::Vec3i{10, 11, 12}, {10, 11, 12}, {10, 11, 12}, {10, 11, 12}};
    const std::vector<Tensor> obs{env::observe(data.volumes[0], h, 15), env::observe(data.volumes[0], h, 15)};
    const std::size_t agents[] = {0, 1};
    const auto acts = p(obs, agents);
    const Tensor q = net.forward(obs);
    CHECK(acts[0] == argmax_action(std::span<const float>(q.raw(), 6)));
    CHECK(acts[1] == argmax_action(std::span<const float>(q.raw() + 6, 6)));
  }
}
