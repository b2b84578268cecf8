// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "collabdqn/cli.hpp"
#include "collabdqn/config.hpp"
#include "collabdqn/eval.hpp"
#include "collabdqn/nn.hpp"
#include "collabdqn/parallel.hpp"
#include "collabdqn/qmodel.hpp"
#include "collabdqn/synth.hpp"
#include "collabdqn/trainer.hpp"

using namespace collabdqn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> details;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// --- 1: gradient suite -------------------------------------------------------

nn::Sequential single_layer(nn::Layer layer) {
  nn::Sequential s;
  s.layers.push_back(std::move(layer));
  return s;
}

Tensor random_input(const Shape& shape, Philox& rng) {
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

void randomize_bias(nn::Sequential& s, Philox& rng) {
  for (auto& l : s.layers) {
    if (l.has_params()) {
      for (float& v : l.params.bias.data()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
  }
}


// Independent double-precision forward pass for batch-1 inputs, written from
// the layer definitions with plain loops. Records the ReLU masks and pooling
// argmaxes so kink crossings can be detected.
struct RefNet {
  struct L {
    nn::OpKind op;
    std::size_t in_ch = 0, out_ch = 0, k = 0, window = 2;
  };
  std::vector<L> layers;
  std::vector<std::vector<double>> params;  // weight, bias per parameterized layer
};

RefNet to_ref(const nn::Sequential& s) {
  RefNet r;
  for (const auto& l : s.layers) {
    RefNet::L x{l.op};
    if (l.op == nn::OpKind::conv3d) {
      x.out_ch = l.params.weight.dim(0);
      x.in_ch = l.params.weight.dim(1);
      x.k = l.params.weight.dim(2);
    } else if (l.op == nn::OpKind::dense) {
      x.out_ch = l.params.weight.dim(0);
      x.in_ch = l.params.weight.dim(1);
    } else if (l.op == nn::OpKind::maxpool3d) {
      x.window = l.window;
    }
    if (l.has_params()) {
      r.params.emplace_back(l.params.weight.data().begin(), l.params.weight.data().end());
      r.params.emplace_back(l.params.bias.data().begin(), l.params.bias.data().end());
    }
    r.layers.push_back(x);
  }
  return r;
}

// Returns sum(c_i * out_i); `kinks` receives one id per ReLU sign and pool
// argmax, in order.
double ref_loss(const RefNet& net, std::vector<double> x, std::array<std::size_t, 4> shape,
                const std::vector<double>& c, std::vector<std::uint32_t>& kinks) {
  kinks.clear();
  std::size_t pi = 0;
  bool flat = false;
  for (const auto& l : net.layers) {
    if (l.op == nn::OpKind::conv3d) {
      const auto& w = net.params[pi];
      const auto& b = net.params[pi + 1];
      pi += 2;
      const std::size_t D = shape[1], H = shape[2], W = shape[3], k = l.k;
      const std::size_t od = D - k + 1, oh = H - k + 1, ow = W - k + 1;
      std::vector<double> y(l.out_ch * od * oh * ow);
      for (std::size_t o = 0; o < l.out_ch; ++o)
        for (std::size_t z = 0; z < od; ++z)
          for (std::size_t yy = 0; yy < oh; ++yy)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              double acc = b[o];
              for (std::size_t i = 0; i < l.in_ch; ++i)
                for (std::size_t a = 0; a < k; ++a)
                  for (std::size_t bb = 0; bb < k; ++bb)
                    for (std::size_t cc = 0; cc < k; ++cc)
                      acc += w[(((o * l.in_ch + i) * k + a) * k + bb) * k + cc] *
                             x[((i * D + z + a) * H + yy + bb) * W + xx + cc];
              y[((o * od + z) * oh + yy) * ow + xx] = acc;
            }
      x = std::move(y);
      shape = {l.out_ch, od, oh, ow};
    } else if (l.op == nn::OpKind::relu) {
      for (double& v : x) {
        kinks.push_back(v > 0.0);
        v = std::max(v, 0.0);
      }
    } else if (l.op == nn::OpKind::maxpool3d) {
      const std::size_t n = l.window, D = shape[1] / n, H = shape[2] / n, W = shape[3] / n;
      std::vector<double> y(shape[0] * D * H * W);
      for (std::size_t ch = 0; ch < shape[0]; ++ch)
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t yy = 0; yy < H; ++yy)
            for (std::size_t xx = 0; xx < W; ++xx) {
              double best = -INFINITY;
              std::uint32_t arg = 0, idx = 0;
              for (std::size_t a = 0; a < n; ++a)
                for (std::size_t bb = 0; bb < n; ++bb)
                  for (std::size_t cc = 0; cc < n; ++cc, ++idx) {
                    const double v = x[((ch * shape[1] + z * n + a) * shape[2] + yy * n + bb) * shape[3] + xx * n + cc];
                    if (v > best) {
                      best = v;
                      arg = idx;
                    }
                  }
              kinks.push_back(arg);
              y[((ch * D + z) * H + yy) * W + xx] = best;
            }
      x = std::move(y);
      shape = {shape[0], D, H, W};
    } else {
      const auto& w = net.params[pi];
      const auto& b = net.params[pi + 1];
      pi += 2;
      (void)flat;
      flat = true;
      std::vector<double> y(l.out_ch);
      for (std::size_t o = 0; o < l.out_ch; ++o) {
        double acc = b[o];
        for (std::size_t i = 0; i < l.in_ch; ++i) acc += w[o * l.in_ch + i] * x[i];
        y[o] = acc;
      }
      x = std::move(y);
      shape = {l.out_ch, 1, 1, 1};
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) loss += c[i] * x[i];
  return loss;
}

// Float32 analytic gradients of the composed network against central
// differences of the double-precision oracle on a random sample of entries
// per tensor. Error metric as in nn::grad_check: |a - n| / max(|a|, |n|, max|a|
// over the tensor).
struct RefCheck {
  double max_rel = 0.0;
  std::size_t checked = 0, skipped = 0;
  std::vector<std::string> lines;
};

RefCheck composed_reference_check(const nn::Sequential& net, const Tensor& input, std::size_t per_tensor,
                                  Philox& rng) {
  std::vector<Tensor> inputs;
  const Tensor out = net.forward(input, inputs);
  std::vector<double> c(out.size());
  Tensor up(out.shape());
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = rng.uniform(-1, 1);
    up[i] = static_cast<float>(c[i]);
  }
  std::vector<nn::LayerGrads> grads = net.make_grads();
  const Tensor gin = net.backward(inputs, up, grads, true);

  RefNet ref = to_ref(net);
  std::vector<double> x(input.data().begin(), input.data().end());
  const std::array<std::size_t, 4> shape{input.dim(1), input.dim(2), input.dim(3), input.dim(4)};
  std::vector<std::uint32_t> base_kinks, kinks;
  (void)ref_loss(ref, x, shape, c, base_kinks);

  RefCheck rc;
  const double h = 1e-6;
  const auto check_tensor = [&](const std::string& name, std::span<const float> analytic,
                                const std::function<double&(std::size_t)>& slot) {
    double scale = 0.0;
    for (float a : analytic) scale = std::max(scale, static_cast<double>(std::fabs(a)));
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    const std::size_t n = std::min(per_tensor, analytic.size());
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t i = n == analytic.size() ? s : rng.uniform_int(analytic.size());
      double& v = slot(i);
      const double keep = v;
      v = keep + h;
      const double lp = ref_loss(ref, x, shape, c, kinks);
      const bool kp = kinks == base_kinks;
      v = keep - h;
      const double lm = ref_loss(ref, x, shape, c, kinks);
      const bool km = kinks == base_kinks;
      v = keep;
      if (!kp || !km) {
        ++skipped;
        continue;
      }
      const double num = (lp - lm) / (2 * h);
      const double a = analytic[i];
      worst = std::max(worst, std::fabs(a - num) / std::max({std::fabs(a), std::fabs(num), scale, 1e-30}));
      ++checked;
    }
    rc.max_rel = std::max(rc.max_rel, worst);
    rc.checked += checked;
    rc.skipped += skipped;
    rc.lines.push_back(fmt("  %-18s max rel error %.2e  checked %zu  skipped %zu", name.c_str(), worst, checked, skipped));
  };

  std::size_t pi = 0, gi = 0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (!net.layers[li].has_params()) continue;
    const std::string base = nn::layer_name(net.layers[li], li);
    std::vector<double>* w = &ref.params[pi];
    std::vector<double>* b = &ref.params[pi + 1];
    check_tensor(base + ".weight", grads[gi].weight.data(), [w](std::size_t i) -> double& { return (*w)[i]; });
    check_tensor(base + ".bias", grads[gi].bias.data(), [b](std::size_t i) -> double& { return (*b)[i]; });
    pi += 2;
    ++gi;
  }
  check_tensor("input", gin.data(), [&x](std::size_t i) -> double& { return x[i]; });
  return rc;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  Philox rng(101);
  Outcome o;
  o.pass = true;
  const auto check = [&](const std::string& name, nn::Sequential net, const Tensor& input) {
    randomize_bias(net, rng);
    const nn::GradCheckReport r = nn::grad_check(net, input);
    o.pass = o.pass && r.passed && r.max_rel_error < 1e-3;
    o.details.push_back(fmt("%-34s max rel error %.2e  skipped %.1f%%  %s", name.c_str(), r.max_rel_error,
                            100.0 * r.skipped_fraction, r.passed ? "ok" : "FAILED"));
  };

  nn::LayerParams conv = nn::make_conv3d(2, 3, 3);
  nn::he_uniform_init(conv, rng);
  check("conv3d 2->3 k3 on 6^3", single_layer({nn::OpKind::conv3d, conv}), random_input({2, 2, 6, 6, 6}, rng));
  nn::LayerParams conv2 = nn::make_conv3d(3, 2, 2);
  nn::he_uniform_init(conv2, rng);
  check("conv3d 3->2 k2 on 5^3", single_layer({nn::OpKind::conv3d, conv2}), random_input({1, 3, 5, 5, 5}, rng));
  check("maxpool3d w2 on 6^3", single_layer({nn::OpKind::maxpool3d, {}, 2}), random_input({2, 2, 6, 6, 6}, rng));
  check("relu", single_layer({nn::OpKind::relu}), random_input({3, 17}, rng));
  nn::LayerParams dense = nn::make_dense(12, 5);
  nn::he_uniform_init(dense, rng);
  check("dense 12->5", single_layer({nn::OpKind::dense, dense}), random_input({4, 12}, rng));

  // Reference network: the desk trunk followed by one head, on one R = 15
  // observation. Float32 central differences through eight layers are
  // dominated by rounding and kink crossings, so this one is checked against a
  // double-precision oracle.
  const qmodel::CollabQNet ref = qmodel::build(1, 15, qmodel::Architecture::desk(), 102);
  nn::Sequential composed = ref.trunk;
  for (const auto& l : ref.heads[0].layers) composed.layers.push_back(l);
  randomize_bias(composed, rng);
  const RefCheck rc = composed_reference_check(composed, random_input({1, 4, 15, 15, 15}, rng), 48, rng);
  const double skipped = static_cast<double>(rc.skipped) / static_cast<double>(rc.checked + rc.skipped);
  const bool ref_ok = rc.max_rel < 1e-3 && skipped <= 0.1;
  o.pass = o.pass && ref_ok;
  o.details.push_back(fmt("%-34s max rel error %.2e  skipped %.1f%%  %s", "reference net (desk trunk + head)",
                          rc.max_rel, 100.0 * skipped, ref_ok ? "ok" : "FAILED"));
  for (const auto& line : rc.lines) o.details.push_back(line);

  const double elapsed = seconds_since(t0);
  o.pass = o.pass && elapsed < 60.0;
  o.summary = fmt("gradient suite: %zu checks, %.1f s (limit 60 s)", o.details.size(), elapsed);
  return o;
}

// --- 2: Bellman oracle -------------------------------------------------------

Outcome bellman_oracle() {
  Philox rng(202);
  std::size_t batches = 0, entries = 0, mismatches = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(64);
    Tensor next({n, 6});
    for (float& v : next.data()) v = static_cast<float>(rng.uniform(-5, 5));
    std::vector<float> r(n);
    std::vector<std::uint8_t> term(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = static_cast<float>(rng.uniform(-3, 3));
      term[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    const float gamma = static_cast<float>(rng.uniform(0, 1));
    const std::vector<float> y = trainer::bellman_targets(r, term, next, gamma);
    for (std::size_t i = 0; i < n; ++i) {
      float best = next[i * 6];
      for (std::size_t a = 1; a < 6; ++a) best = std::max(best, next[i * 6 + a]);
      const float oracle = term[i] ? r[i] : r[i] + gamma * best;
      mismatches += y[i] != oracle;
    }
    ++batches;
    entries += n;
  }
  Outcome o;
  o.pass = mismatches == 0;
  o.summary = fmt("Bellman oracle: %zu random batches (%zu targets), %zu bitwise mismatches", batches, entries,
                  mismatches);
  return o;
}

// --- 3: freezing isolation ---------------------------------------------------

std::vector<Tensor> snapshot(const nn::Sequential& s) {
  std::vector<Tensor> out;
  for (const Tensor* p : s.parameters()) out.push_back(*p);
  return out;
}

Outcome freezing_isolation() {
  synth::SynthConfig sc;
  sc.extent = {32, 32, 32};
  sc.landmarks = synth::default_template(3);
  sc.seed = 303;
  const auto samples = synth::generate(sc, 2);
  const Dataset data = make_dataset(samples, {"a", "b"}, {"inner_px", "inner_my", "inner_pz"});
  trainer::TrainConfig c;
  c.warmup = 64;
  c.replay_capacity = 1000;
  c.max_episode_steps = 50;
  c.seed = 304;
  trainer::Trainer t(data, c);
  while (!t.warmed_up()) t.run_episode();

  const auto trunk = snapshot(t.net().trunk);
  std::vector<std::vector<Tensor>> heads;
  for (const auto& h : t.net().heads) heads.push_back(snapshot(h));
  const trainer::ReplayBuffer buffer2 = t.buffers()[1];
  const auto adam2 = t.checkpoint().optimizer[2].step();
  t.train_batch_step({false, true, false});
  const qmodel::Checkpoint after = t.checkpoint();

  const bool head2 = snapshot(t.net().heads[1]) == heads[1];
  const bool buf2 = t.buffers()[1] == buffer2;
  const bool opt2 = after.optimizer[2].step() == adam2;
  const bool trunk_moved = snapshot(t.net().trunk) != trunk;
  const bool h1_moved = snapshot(t.net().heads[0]) != heads[0];
  const bool h3_moved = snapshot(t.net().heads[2]) != heads[2];
  Outcome o;
  o.pass = head2 && buf2 && opt2 && trunk_moved && h1_moved && h3_moved;
  o.summary = "freezing isolation: 3 agents, agent 2 frozen for one update";
  o.details.push_back(fmt("head 2 bitwise unchanged %s, buffer 2 unchanged %s, head-2 Adam state unchanged %s",
                          head2 ? "yes" : "NO", buf2 ? "yes" : "NO", opt2 ? "yes" : "NO"));
  o.details.push_back(fmt("trunk changed %s, head 1 changed %s, head 3 changed %s", trunk_moved ? "yes" : "NO",
                          h1_moved ? "yes" : "NO", h3_moved ? "yes" : "NO"));
  return o;
}

// --- 4: parameter-sharing arithmetic ----------------------------------------

// Counts from the architecture description alone.
std::pair<std::size_t, std::size_t> tally(const qmodel::Architecture& a, std::size_t roi) {
  std::size_t trunk = 0, ch = qmodel::kHistoryChannels, extent = roi;
  for (const auto& st : a.trunk) {
    trunk += st.channels * ch * st.kernel * st.kernel * st.kernel + st.channels;
    ch = st.channels;
    extent = extent - st.kernel + 1;
    if (st.pool) extent /= 2;
  }
  std::size_t head = 0, width = ch * extent * extent * extent;
  std::vector<std::size_t> widths = a.head_hidden;
  widths.push_back(qmodel::kActions);
  for (std::size_t w : widths) {
    head += w * width + w;
    width = w;
  }
  return {trunk, head};
}

Outcome parameter_sharing() {
  Outcome o;
  o.pass = true;
  const qmodel::Architecture arch = qmodel::Architecture::desk();
  const auto [trunk, head] = tally(arch, 15);
  double ratio2 = 0.0;
  for (std::size_t k : {1u, 2u, 3u, 5u}) {
    const qmodel::CollabQNet net = qmodel::build(k, 15, arch, 404);
    const qmodel::ParamCount c = net.param_count();
    const double closed = static_cast<double>(k - 1) * static_cast<double>(trunk) /
                          (static_cast<double>(k) * static_cast<double>(trunk + head));
    const bool ok = c.trunk == trunk && c.per_head == head && c.total == trunk + k * head &&
                    std::fabs(net.reduction_ratio() - closed) <= 1e-15;
    o.pass = o.pass && ok;
    if (k == 2) ratio2 = closed;
    o.details.push_back(fmt("K=%zu  total %zu vs %zu separate  ratio %.6f  closed form %.6f  %s", k, c.total,
                            k * (trunk + head), net.reduction_ratio(), closed, ok ? "ok" : "MISMATCH"));
  }
  o.details.push_back(fmt("desk net (trunk %zu, head %zu): K=2 uses %.2f%% fewer parameters than two separate nets; "
                          "a ~5%% ratio at K=2 would need heads about 9x the trunk size",
                          trunk, head, 100.0 * ratio2));
  o.summary = fmt("parameter sharing: closed form holds for K in {1,2,3,5}; K=2 ratio %.4f", ratio2);
  return o;
}

// --- 5 and 6: desk-scale learning and collaboration ---------------------------

struct DeskData {
  Dataset train, test;
  eval::EvalReport baseline;
};

DeskData desk_data() {
  const RunConfig rc;  // defaults: 64^3, 40 train / 10 test, inner_px + inner_my
  const synth::SynthConfig sc = rc.synth_config();
  auto samples = synth::generate(sc, rc.train_volumes + rc.test_volumes, worker_count());
  std::vector<synth::Sample> tr(samples.begin(), samples.begin() + static_cast<long>(rc.train_volumes));
  std::vector<synth::Sample> te(samples.begin() + static_cast<long>(rc.train_volumes), samples.end());
  std::vector<std::string> tr_ids, te_ids;
  for (std::size_t i = 0; i < tr.size(); ++i) tr_ids.push_back(fmt("train_%03zu", i));
  for (std::size_t i = 0; i < te.size(); ++i) te_ids.push_back(fmt("test_%03zu", i));
  DeskData d{make_dataset(std::move(tr), tr_ids, rc.landmarks), make_dataset(std::move(te), te_ids, rc.landmarks), {}};
  d.baseline = eval::evaluate_never_move(d.test, rc.eval_config());
  return d;
}

struct RunResult {
  std::vector<double> landmark_error;  // per agent, mean mm over test x 19
  double mean = 0.0;
  double seconds = 0.0;
  std::size_t params = 0;
  std::vector<double> curve;  // mean test error at 25/50/75/100% of the budget
};

RunResult train_and_eval(const Dataset& train, const Dataset& test, std::uint64_t seed, bool with_curve) {
  const RunConfig rc;
  trainer::TrainConfig tc = rc.train_config();
  tc.seed = seed;
  eval::EvalConfig ec = rc.eval_config();
  ec.workers = worker_count();
  RunResult r;
  const auto t0 = Clock::now();
  trainer::Trainer t(train, tc);
  double eval_seconds = 0.0;
  std::size_t next_mark = 1;
  t.train([&](const trainer::EpisodeLog& e) {
    if (!with_curve) return;
    while (next_mark <= 4 && e.env_steps >= static_cast<std::int64_t>(next_mark) * tc.total_steps / 4) {
      const auto e0 = Clock::now();
      r.curve.push_back(eval::overall_mean(eval::evaluate(t.net(), test, ec)));
      eval_seconds += seconds_since(e0);
      ++next_mark;
    }
  });
  r.seconds = seconds_since(t0) - eval_seconds;
  const eval::EvalReport rep = eval::evaluate(t.net(), test, ec);
  for (const auto& s : rep.summary) r.landmark_error.push_back(s.stats.mean);
  r.mean = eval::overall_mean(rep);
  r.params = t.net().param_count().total;
  return r;
}

struct Study {
  DeskData data;
  std::vector<RunResult> collab;
  std::vector<std::vector<RunResult>> single;  // [seed][landmark]
};

const std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

Study& study(bool need_single) {
  static Study s;
  static bool have_collab = false, have_single = false;
  if (!have_collab) {
    s.data = desk_data();
    for (std::uint64_t seed : kSeeds) {
      s.collab.push_back(train_and_eval(s.data.train, s.data.test, seed, true));
      const RunResult& r = s.collab.back();
      std::printf("  .. collab seed %llu: %.2f mm (%.0f s)\n", static_cast<unsigned long long>(seed), r.mean, r.seconds);
      std::fflush(stdout);
    }
    have_collab = true;
  }
  if (need_single && !have_single) {
    for (std::uint64_t seed : kSeeds) {
      std::vector<RunResult> per;
      for (std::size_t k = 0; k < s.data.train.agents(); ++k) {
        per.push_back(train_and_eval(select_landmarks(s.data.train, {k}), select_landmarks(s.data.test, {k}), seed,
                                     false));
        std::printf("  .. single seed %llu landmark %zu: %.2f mm (%.0f s)\n", static_cast<unsigned long long>(seed), k,
                    per.back().mean, per.back().seconds);
        std::fflush(stdout);
      }
      s.single.push_back(per);
    }
    have_single = true;
  }
  return s;
}

Outcome desk_learning() {
  const Study& s = study(false);
  const double base = eval::overall_mean(s.data.baseline);
  const double spacing = s.data.test.volumes[0].spacing[0];
  std::size_t good = 0, monotone = 0;
  bool time_ok = true;
  Outcome o;
  for (std::size_t i = 0; i < s.collab.size(); ++i) {
    const RunResult& r = s.collab[i];
    const double voxels = r.mean / spacing;
    const bool ok = voxels <= 4.0 && r.mean <= 0.25 * base;
    good += ok;
    time_ok = time_ok && r.seconds < 1800.0;
    bool mono = true;
    for (std::size_t j = 1; j < r.curve.size(); ++j) mono = mono && r.curve[j] <= r.curve[j - 1];
    monotone += mono;
    o.details.push_back(fmt("seed %llu: %.2f mm (%.2f vox; %s %.2f / %s %.2f), %.1f%% of baseline, train %.0f s  %s",
                            static_cast<unsigned long long>(kSeeds[i]), r.mean, voxels,
                            s.data.test.landmark_names[0].c_str(), r.landmark_error[0],
                            s.data.test.landmark_names[1].c_str(), r.landmark_error[1], 100.0 * r.mean / base,
                            r.seconds, ok ? "ok" : "miss"));
    o.details.push_back(fmt("  test error at 25/50/75/100%% of training: %.2f %.2f %.2f %.2f mm%s", r.curve[0],
                            r.curve[1], r.curve[2], r.curve[3], mono ? " (monotone)" : ""));
  }
  o.details.push_back(fmt("never-move baseline %.2f mm; monotone improvement in %zu of 5 seeds", base, monotone));
  o.pass = good >= 4 && time_ok;
  const RunConfig rc;
  o.summary = fmt("desk learning: %zu of 5 seeds <= 4 voxels and <= 25%% of baseline (%lld env steps each)", good,
                  static_cast<long long>(rc.train.total_steps));
  return o;
}

Outcome collaboration() {
  const Study& s = study(true);
  double collab = 0.0, single = 0.0;
  Outcome o;
  for (std::size_t i = 0; i < s.collab.size(); ++i) {
    double sm = 0.0;
    for (const RunResult& r : s.single[i]) sm += r.mean;
    sm /= static_cast<double>(s.single[i].size());
    collab += s.collab[i].mean;
    single += sm;
    o.details.push_back(fmt("seed %llu: shared %.2f mm, separate %.2f mm (%.2f / %.2f)",
                            static_cast<unsigned long long>(kSeeds[i]), s.collab[i].mean, sm, s.single[i][0].mean,
                            s.single[i][1].mean));
  }
  collab /= static_cast<double>(s.collab.size());
  single /= static_cast<double>(s.collab.size());
  const std::size_t shared_params = s.collab[0].params;
  const std::size_t separate_params = s.single[0][0].params + s.single[0][1].params;
  o.pass = collab <= 1.10 * single && shared_params < separate_params;
  o.details.push_back(fmt("parameters: shared %zu vs separate %zu", shared_params, separate_params));
  o.summary = fmt("collaboration: shared %.3f mm vs separate %.3f mm (ratio %.3f, limit 1.10)", collab, single,
                  collab / single);
  return o;
}

// --- 7: termination ----------------------------------------------------------

Outcome termination() {
  Philox rng(707);
  synth::SynthConfig sc;
  sc.extent = {32, 32, 32};
  sc.seed = 708;
  const auto samples = synth::generate(sc, 4);
  const Dataset data = make_dataset(samples, {"a", "b", "c", "d"}, {"inner_px", "inner_my"});
  const trainer::Policy random = [&](std::span<const Tensor>, std::span<const std::size_t> agents) {
    std::vector<int> a(agents.size());
    for (int& x : a) x = static_cast<int>(rng.uniform_int(6));
    return a;
  };
  std::size_t episodes = 0, violations = 0, oscillating = 0, reductions = 0;
  const std::vector<std::vector<int>> ladders{{3, 2, 1}, {1}, {4, 2, 1}, {2, 1}};
  for (int e = 0; e < 1000; ++e) {
    trainer::TestConfig tc;
    tc.ladder = ladders[e % ladders.size()];
    tc.max_frames = 20 + static_cast<int>(rng.uniform_int(200));
    const auto& v = data.volumes[e % data.size()];
    const env::Vec3i start = env::sample_train_start(v.shape, rng);
    for (const trainer::AgentResult& r : trainer::run_test_episode(v, 2, start, tc, random)) {
      ++episodes;
      bool ok = r.frames <= tc.max_frames && r.outcome != env::Outcome::continue_episode;
      if (r.outcome == env::Outcome::oscillating) {
        ++oscillating;
        // Terminal only at the finest scale, after one reduction per coarser scale.
        const std::size_t finest = tc.ladder.size() - 1;
        ok = ok && r.final_scale_index == finest && r.reduced_from.size() == finest;
        for (std::size_t i = 0; ok && i < r.reduced_from.size(); ++i) ok = r.reduced_from[i] == tc.ladder[i];
      }
      reductions += r.reduced_from.size();
      violations += !ok;
    }
  }
  Outcome o;
  o.pass = violations == 0;
  o.summary = fmt("termination: %zu fuzzed agent episodes, %zu violations", episodes, violations);
  o.details.push_back(fmt("%zu ended by oscillation at the finest scale, %zu scale reductions on the way", oscillating,
                          reductions));
  return o;
}

// --- 8: determinism ----------------------------------------------------------

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "collabdqn_acceptance_det";
  fs::remove_all(root);
  std::vector<std::string> ckpts, csvs, raws;
  // Same paths both times: the checkpoint metadata embeds the run config.
  const fs::path dir = root / "run";
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    RunConfig c;
    c.data_dir = (dir / "data").string();
    c.checkpoint = (dir / "model.ckpt").string();
    c.log = (dir / "train.jsonl").string();
    c.report = (dir / "report").string();
    c.train_volumes = 3;
    c.test_volumes = 2;
    c.synth.extent = {32, 32, 32};
    c.synth.seed = 808;
    c.train.total_steps = 600;
    c.train.warmup = 100;
    c.train.seed = 809;
    c.max_frames = 60;
    c.deterministic = true;
    std::ostringstream sink;
    cli::cmd_generate(c, false, sink);
    cli::cmd_train(c, std::nullopt, sink);
    cli::cmd_evaluate(c, sink);
    ckpts.push_back(slurp(c.checkpoint));
    csvs.push_back(slurp(c.report + ".csv"));
    raws.push_back(slurp(dir / "data" / "train" / "train_002.vol.raw"));
  }
  Outcome o;
  const bool ck = ckpts[0] == ckpts[1], csv = csvs[0] == csvs[1], raw = raws[0] == raws[1];
  o.pass = ck && csv && raw && !ckpts[0].empty() && !csvs[0].empty();
  o.summary = "determinism: two --deterministic generate -> train -> evaluate pipelines";
  o.details.push_back(fmt("checkpoint %zu bytes %s, CSV report %zu bytes %s, volume payload %s", ckpts[0].size(),
                          ck ? "identical" : "DIFFER", csvs[0].size(), csv ? "identical" : "DIFFER",
                          raw ? "identical" : "DIFFER"));
  fs::remove_all(root);
  return o;
}

// --- 9: evaluation protocol --------------------------------------------------

Outcome evaluation_protocol() {
  Philox rng(909);
  std::size_t bad_grids = 0;
  for (int i = 0; i < 100; ++i) {
    const env::Extent3 shape{16 + rng.uniform_int(113), 16 + rng.uniform_int(113), 16 + rng.uniform_int(113)};
    const auto grid = env::start_grid(shape);
    std::set<std::array<int, 3>> unique;
    bool inside = true;
    for (const auto& p : grid) {
      unique.insert({p.x, p.y, p.z});
      inside = inside && p.x >= 0 && p.y >= 0 && p.z >= 0 && p.x < static_cast<int>(shape[0]) &&
               p.y < static_cast<int>(shape[1]) && p.z < static_cast<int>(shape[2]);
    }
    bad_grids += !(grid.size() == 19 && unique.size() == 19 && inside);
  }
  synth::SynthConfig sc;
  sc.extent = {24, 24, 24};
  sc.translation_vox = 2;
  sc.landmarks = synth::default_template(3);
  sc.seed = 910;
  const Dataset data = make_dataset(synth::generate(sc, 3), {"a", "b", "c"}, {"inner_px", "inner_my", "inner_pz"});
  eval::EvalConfig ec;
  ec.test.max_frames = 40;
  const qmodel::CollabQNet net = qmodel::build(3, 15, qmodel::Architecture::desk(), 911);
  const eval::EvalReport r = eval::evaluate(net, data, ec);
  const std::size_t expected = 3 * 19 * 3;
  bool per_landmark = true;
  for (const auto& s : r.summary) per_landmark = per_landmark && s.stats.n == 3 * 19;
  Outcome o;
  o.pass = bad_grids == 0 && r.episodes == expected && r.errors_mm.size() == expected && per_landmark;
  o.summary = fmt("evaluation protocol: %d of 100 random shapes give 19 distinct in-bounds starts; %zu of %zu episodes",
                  100 - static_cast<int>(bad_grids), r.episodes, expected);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_suite}, {2, bellman_oracle},   {3, freezing_isolation}, {4, parameter_sharing}, {5, desk_learning},
      {6, collaboration},  {7, termination},      {8, determinism},        {9, evaluation_protocol}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("threw: ") + e.what();
    }
    std::printf("AC%d %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.summary.c_str());
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
