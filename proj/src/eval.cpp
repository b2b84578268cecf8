#include "collabdqn/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>

#include "collabdqn/error.hpp"
#include "collabdqn/parallel.hpp"

namespace collabdqn::eval {

Stats aggregate(std::span<const double> values) {
  if (values.empty()) throw ConfigError("aggregate: empty error list");
  Stats s;
  s.n = values.size();
  const double n = static_cast<double>(s.n);
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / n;
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / n);
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = s.n / 2;
  s.median = s.n % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return s;
}

double EvalReport::error(std::size_t landmark, std::size_t volume, std::size_t start) const {
  return errors_mm.at((landmark * volume_ids.size() + volume) * protocol.grid_points + start);
}

void summarize(EvalReport& report) {
  const std::size_t V = report.volume_ids.size();
  const std::size_t S = report.protocol.grid_points;
  report.summary.assign(report.landmarks.size(), {});
  for (std::size_t l = 0; l < report.landmarks.size(); ++l) {
    const std::span<const double> all(report.errors_mm.data() + l * V * S, V * S);
    LandmarkSummary& ls = report.summary[l];
    if (!all.empty()) ls.stats = aggregate(all);
    for (std::size_t v = 0; v < V; ++v) ls.per_volume.push_back(aggregate(all.subspan(v * S, S)).mean);
  }
}

double overall_mean(const EvalReport& report) {
  if (report.summary.empty()) throw ConfigError("overall_mean: report has no landmarks");
  double sum = 0.0;
  for (const LandmarkSummary& s : report.summary) sum += s.stats.mean;
  return sum / static_cast<double>(report.summary.size());
}

namespace {

EvalReport empty_report(const Dataset& data, const EvalConfig& config, const std::string& policy) {
  if (data.size() == 0) throw ConfigError("evaluate: no volumes");
  if (config.test.max_frames < 1) throw ConfigError("evaluate: max_frames must be >= 1");
  EvalReport r;
  r.protocol = {policy, 19, config.test.max_frames, config.test.ladder, config.test.roi};
  r.landmarks = data.landmark_names;
  r.volume_ids = data.ids;
  r.errors_mm.assign(r.landmarks.size() * r.volume_ids.size() * r.protocol.grid_points, 0.0);
  return r;
}

// Runs fn(volume, start_index, start) -> final positions for every pair and
// records the errors in index order.
template <typename Fn>
void run_grid(EvalReport& r, const Dataset& data, int workers, Fn fn) {
  const std::size_t V = data.size();
  const std::size_t S = r.protocol.grid_points;
  const std::size_t K = data.agents();
  std::vector<std::vector<env::Vec3i>> finals(V * S);
  std::vector<std::vector<env::Vec3i>> grids(V);
  for (std::size_t v = 0; v < V; ++v) {
    grids[v] = env::start_grid(data.volumes[v].shape);
    if (grids[v].size() != S) throw EnvError("start grid does not have 19 points");
  }
  parallel_for(V * S, workers, [&](std::size_t i) {
    const std::size_t v = i / S, s = i % S;
    finals[i] = fn(v, grids[v][s]);
  });
  for (std::size_t i = 0; i < V * S; ++i) {
    const std::size_t v = i / S, s = i % S;
    for (std::size_t k = 0; k < K; ++k) {
      r.errors_mm[(k * V + v) * S + s] =
          env::mm_distance(finals[i][k], data.targets[v][k], data.volumes[v].spacing);
      ++r.episodes;
    }
  }
  summarize(r);
}

}  // namespace

EvalReport evaluate(const trainer::Policy& policy, const Dataset& data, const EvalConfig& config,
                    const std::string& policy_name) {
  EvalReport r = empty_report(data, config, policy_name);
  run_grid(r, data, config.workers, [&](std::size_t v, const env::Vec3i& start) {
    const auto results = trainer::run_test_episode(data.volumes[v], data.agents(), start, config.test, policy);
    std::vector<env::Vec3i> out;
    for (const auto& a : results) out.push_back(a.final_position);
    return out;
  });
  return r;
}

EvalReport evaluate(const qmodel::CollabQNet& net, const Dataset& data, const EvalConfig& config) {
  if (net.agents != data.agents()) {
    throw ArchitectureError("evaluate: network has " + std::to_string(net.agents) + " heads but " +
                            std::to_string(data.agents()) + " landmarks were requested");
  }
  if (net.roi != static_cast<std::size_t>(config.test.roi)) {
    throw ArchitectureError("evaluate: network ROI " + std::to_string(net.roi) + " differs from test ROI " +
                            std::to_string(config.test.roi));
  }
  return evaluate(trainer::greedy_policy(net), data, config, "greedy");
}

EvalReport evaluate_never_move(const Dataset& data, const EvalConfig& config) {
  EvalReport r = empty_report(data, config, "never-move");
  run_grid(r, data, 1, [&](std::size_t, const env::Vec3i& start) {
    return std::vector<env::Vec3i>(data.agents(), start);
  });
  return r;
}

// --- rendering ---------------------------------------------------------------

namespace {

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_ladder(const std::vector<int>& ladder) {
  std::string s;
  for (std::size_t i = 0; i < ladder.size(); ++i) s += (i ? "/" : "") + std::to_string(ladder[i]);
  return s;
}

constexpr const char* kReference =
    "# Published clinical reference, mm (documentation only; these datasets are not\n"
    "# available here and the values are not reproduced by this build):\n"
    "#   brain MRI / fetal US, shared-trunk agents: AC 0.93 ± 0.18, PC 1.05 ± 0.25,\n"
    "#     RC 2.52 ± 2.25, LC 2.41 ± 1.52, CSP 3.78 ± 5.55\n"
    "#   brain MRI / fetal US, single-agent DQN: AC 2.46 ± 1.44, PC 2.05 ± 1.14,\n"
    "#     RC 3.37 ± 1.54, LC 3.25 ± 1.59, CSP 3.66 ± 2.11\n"
    "#   brain MRI, 3 agents: AC 0.94 ± 0.17, PC 0.96 ± 0.20, L3 1.45 ± 0.51\n"
    "#   brain MRI, 5 agents: AC 0.98 ± 0.25, PC 0.90 ± 0.18, L3 1.39 ± 0.45,\n"
    "#     L4 1.42 ± 0.90, L5 1.72 ± 0.61\n"
    "#   cardiac MRI, shared-trunk agents: AP 3.96 ± 5.07, MV 4.87 ± 0.26\n";

}  // namespace

std::string render_text(const EvalReport& r) {
  std::string out;
  out += "# policy " + r.protocol.policy + ", " + std::to_string(r.protocol.grid_points) +
         "-point start grid at 25/50/75% of each extent, frame budget " + std::to_string(r.protocol.max_frames) +
         ", scale ladder " + join_ladder(r.protocol.ladder) + ", ROI " + std::to_string(r.protocol.roi) + "\n";
  out += "# errors in mm: mean ± std (population, divides by n) over " + std::to_string(r.volume_ids.size()) +
         " volumes x " + std::to_string(r.protocol.grid_points) + " starts per landmark\n";
  out += kReference;
  std::size_t width = 0;
  for (const auto& n : r.landmarks) width = std::max(width, n.size());
  for (std::size_t l = 0; l < r.landmarks.size(); ++l) {
    const Stats& s = r.summary.at(l).stats;
    std::string name = r.landmarks[l];
    name.resize(width, ' ');
    out += name + "  " + fixed2(s.mean) + " ± " + fixed2(s.std) + "  median " + fixed2(s.median) + "  n " +
           std::to_string(s.n) + "\n";
  }
  return out;
}

std::string render_csv(const EvalReport& r) {
  for (const auto& names : {r.landmarks, r.volume_ids}) {
    for (const auto& n : names) {
      if (n.find_first_of(",\n") != std::string::npos) throw ConfigError("csv report: name '" + n + "' contains ',' or newline");
    }
  }
  std::string out = "landmark,volume_id,start_index,error_mm\n";
  for (std::size_t l = 0; l < r.landmarks.size(); ++l) {
    for (std::size_t v = 0; v < r.volume_ids.size(); ++v) {
      for (std::size_t s = 0; s < r.protocol.grid_points; ++s) {
        out += r.landmarks[l] + "," + r.volume_ids[v] + "," + std::to_string(s) + "," + exact(r.error(l, v, s)) + "\n";
      }
    }
  }
  return out;
}

EvalReport parse_csv(std::string_view csv) {
  const std::string_view header = "landmark,volume_id,start_index,error_mm";
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos < csv.size();) {
    std::size_t end = csv.find('\n', pos);
    if (end == std::string_view::npos) end = csv.size();
    if (end > pos) lines.push_back(csv.substr(pos, end - pos));
    pos = end + 1;
  }
  if (lines.empty() || lines[0] != header) throw FormatError("csv report: missing header '" + std::string(header) + "'");

  struct Row {
    std::size_t l, v, s;
    double e;
  };
  EvalReport r;
  std::map<std::string, std::size_t, std::less<>> lidx, vidx;
  std::vector<Row> rows;
  std::size_t starts = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::string_view f[4];
    std::string_view rest = lines[i];
    for (int c = 0; c < 4; ++c) {
      const std::size_t comma = c < 3 ? rest.find(',') : std::string_view::npos;
      if (c < 3 && comma == std::string_view::npos) {
        throw FormatError("csv report line " + std::to_string(i + 1) + ": expected 4 fields");
      }
      f[c] = rest.substr(0, comma);
      if (c < 3) rest = rest.substr(comma + 1);
    }
    Row row{};
    auto [pl, il] = lidx.try_emplace(std::string(f[0]), r.landmarks.size());
    if (il) r.landmarks.emplace_back(f[0]);
    auto [pv, iv] = vidx.try_emplace(std::string(f[1]), r.volume_ids.size());
    if (iv) r.volume_ids.emplace_back(f[1]);
    row.l = pl->second;
    row.v = pv->second;
    const auto s_end = f[2].data() + f[2].size();
    const auto e_end = f[3].data() + f[3].size();
    if (std::from_chars(f[2].data(), s_end, row.s).ptr != s_end ||
        std::from_chars(f[3].data(), e_end, row.e).ptr != e_end) {
      throw FormatError("csv report line " + std::to_string(i + 1) + ": bad number");
    }
    starts = std::max(starts, row.s + 1);
    rows.push_back(row);
  }
  r.protocol.grid_points = starts == 0 ? r.protocol.grid_points : starts;
  const std::size_t S = r.protocol.grid_points;
  if (rows.size() != r.landmarks.size() * r.volume_ids.size() * (rows.empty() ? 0 : S)) {
    throw FormatError("csv report: " + std::to_string(rows.size()) + " rows do not form a complete grid");
  }
  r.errors_mm.assign(rows.size(), 0.0);
  std::vector<bool> seen(rows.size(), false);
  for (const Row& row : rows) {
    const std::size_t i = (row.l * r.volume_ids.size() + row.v) * S + row.s;
    if (seen[i]) throw FormatError("csv report: duplicate row");
    seen[i] = true;
    r.errors_mm[i] = row.e;
  }
  r.episodes = rows.size();
  summarize(r);
  return r;
}

}  // namespace collabdqn::eval
