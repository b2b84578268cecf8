#include "collabdqn/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "collabdqn/error.hpp"
#include "collabdqn/eval.hpp"
#include "collabdqn/parallel.hpp"
#include "collabdqn/qmodel.hpp"
#include "collabdqn/synth.hpp"
#include "collabdqn/trainer.hpp"

namespace collabdqn::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PathError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw PathError("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw PathError("write failed for '" + path.string() + "'");
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string split_id(const std::string& split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03zu", split.c_str(), i);
  return buf;
}

}  // namespace

// --- data ---------------------------------------------------------------------

Manifest read_manifest(const fs::path& data_dir) {
  const fs::path path = data_dir / "manifest.json";
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  if (j.value("format_version", -1) != kManifestVersion) {
    throw VersionError("manifest '" + path.string() + "': unsupported format_version");
  }
  Manifest m;
  try {
    m.landmarks = j.at("landmarks").get<std::vector<std::string>>();
    for (const char* split : {"train", "test"}) {
      for (const json& e : j.at(split)) {
        (std::string(split) == "train" ? m.train : m.test).push_back({e.at("id"), e.at("stem")});
      }
    }
    m.config_json = j.at("config").dump();
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  return m;
}

Dataset load_split(const RunConfig& config, const std::string& split) {
  const fs::path dir = config.data_dir;
  const Manifest m = read_manifest(dir);
  const auto& entries = split == "train" ? m.train : m.test;
  if (entries.empty()) throw ConfigError("dataset '" + dir.string() + "' has no " + split + " volumes");
  std::vector<synth::Sample> samples;
  std::vector<std::string> ids;
  for (const ManifestEntry& e : entries) {
    samples.push_back(synth::load_volume(dir / e.stem));
    ids.push_back(e.id);
  }
  return make_dataset(std::move(samples), std::move(ids), config.landmarks);
}

void cmd_generate(const RunConfig& config, bool force, std::ostream& out) {
  config.validate();
  const fs::path dir = config.data_dir;
  if (dir.has_parent_path() && !fs::is_directory(dir.parent_path())) {
    throw PathError("parent of output directory '" + dir.string() + "' does not exist");
  }
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw PathError("'" + dir.string() + "' exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw ConfigError("output directory '" + dir.string() + "' is not empty (use --force)");
      for (const char* sub : {"train", "test"}) fs::remove_all(dir / sub);
      fs::remove(dir / "manifest.json");
    }
  }
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");

  const synth::SynthConfig sc = config.synth_config();
  const std::size_t n = config.train_volumes + config.test_volumes;
  const auto samples = synth::generate(sc, n, worker_count(config.deterministic));

  json manifest;
  manifest["format_version"] = kManifestVersion;
  json names = json::array();
  for (const auto& l : sc.landmarks) names.push_back(l.name);
  manifest["landmarks"] = names;
  manifest["train"] = json::array();
  manifest["test"] = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const bool train = i < config.train_volumes;
    const std::string split = train ? "train" : "test";
    const std::string id = split_id(split, train ? i : i - config.train_volumes);
    const std::string stem = split + "/" + id;
    synth::save_volume(samples[i].volume, samples[i].landmarks, dir / stem);
    manifest[split].push_back({{"id", id}, {"stem", stem}});
  }
  manifest["config"] = json::parse(to_json_text(config)).at("synth");
  manifest["config"]["template_landmarks"] = config.template_landmarks;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  out << "wrote " << config.train_volumes << " train + " << config.test_volumes << " test volumes to "
      << dir.string() << "\n";
}

// --- training ---------------------------------------------------------------

void cmd_train(const RunConfig& config, const std::optional<fs::path>& resume, std::ostream& out) {
  config.validate();
  Dataset data = load_split(config, "train");
  const trainer::TrainConfig tc = config.train_config();
  std::optional<trainer::Trainer> t;
  if (resume) {
    t.emplace(std::move(data), tc, qmodel::load_checkpoint(*resume));
  } else {
    t.emplace(std::move(data), tc);
  }

  const fs::path log_path = config.log;
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw PathError("cannot write training log '" + log_path.string() + "'");

  json meta;
  meta["landmarks"] = config.landmarks;
  meta["config"] = json::parse(to_json_text(config));
  const std::string metadata = meta.dump();
  const auto save = [&] { qmodel::save_checkpoint(t->checkpoint(metadata), config.checkpoint); };
  if (fs::path(config.checkpoint).has_parent_path()) fs::create_directories(fs::path(config.checkpoint).parent_path());

  t->train([&](const trainer::EpisodeLog& e) {
    log << trainer::to_json_line(e) << "\n";
    out << "episode " << e.episode << "  steps " << e.steps << "  env " << e.env_steps << "  updates "
        << e.train_step << "  eps " << fixed(e.epsilon, 3) << "  loss "
        << (std::isnan(e.mean_loss) ? std::string("-") : fixed(e.mean_loss, 4)) << "  dist_mm";
    for (double d : e.final_distance_mm) out << " " << fixed(d, 2);
    out << "\n";
    if (config.checkpoint_every > 0 && e.episode % config.checkpoint_every == 0) save();
  });
  log.flush();
  if (!log) throw PathError("write failed for '" + log_path.string() + "'");
  save();
  out << "checkpoint " << config.checkpoint << " (env steps " << t->env_steps() << ", updates " << t->train_step()
      << ", episodes " << t->episode() << ")\n";
}

// --- evaluation -------------------------------------------------------------

void cmd_evaluate(const RunConfig& config, std::ostream& out) {
  config.validate();
  const qmodel::Checkpoint ck = qmodel::load_checkpoint(config.checkpoint);
  const json meta = json::parse(ck.metadata, nullptr, false);
  if (meta.is_object() && meta.contains("landmarks")) {
    const auto trained = meta["landmarks"].get<std::vector<std::string>>();
    if (trained != config.landmarks) {
      throw ArchitectureError("checkpoint was trained on landmarks " + json(trained).dump() +
                              " but the config requests " + json(config.landmarks).dump());
    }
  }
  const Dataset data = load_split(config, "test");
  eval::EvalConfig ec = config.eval_config();
  ec.workers = worker_count(config.deterministic);
  const eval::EvalReport report = eval::evaluate(ck.net, data, ec);
  const std::string text = eval::render_text(report);
  if (config.report_format != "csv") write_text(config.report + ".txt", text);
  if (config.report_format != "text") write_text(config.report + ".csv", eval::render_csv(report));
  out << text;
}

// --- inspection -------------------------------------------------------------

void cmd_inspect(const fs::path& path, std::ostream& out) {
  const qmodel::Checkpoint ck = qmodel::load_checkpoint(path);
  const qmodel::CollabQNet& net = ck.net;
  out << "architecture  " << qmodel::describe(net.arch) << "\n";
  out << "agents " << net.agents << "  roi " << net.roi << "  train_step " << ck.train_step << "  episode "
      << ck.episode << "\n\n";

  const auto table = [&](const std::string& prefix, const nn::Sequential& s, Shape shape) {
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      nn::Sequential one;
      one.layers = {s.layers[i]};
      shape = one.output_shape(shape);
      std::string dims;
      for (std::size_t d = 1; d < shape.size(); ++d) dims += (d > 1 ? "x" : "") + std::to_string(shape[d]);
      const std::size_t params = one.param_count();
      out << std::left << std::setw(22) << (prefix + "." + nn::layer_name(s.layers[i], i)) << std::setw(16) << dims
          << std::right << std::setw(10) << params << "\n";
    }
  };
  out << std::left << std::setw(22) << "layer" << std::setw(16) << "output" << std::right << std::setw(10)
      << "params" << "\n";
  table("trunk", net.trunk, {1, qmodel::kHistoryChannels, net.roi, net.roi, net.roi});
  for (std::size_t k = 0; k < net.heads.size(); ++k) table("head" + std::to_string(k), net.heads[k], {1, net.feature_width()});

  const qmodel::ParamCount c = net.param_count();
  const std::size_t separate = net.agents * (c.trunk + c.per_head);
  out << "\ntrunk " << c.trunk << "  per head " << c.per_head << "  total " << c.total << "\n";
  out << net.agents << " separate single-agent nets: " << separate << "\n";
  out << "reduction_ratio " << fixed(net.reduction_ratio(), 6) << " (" << fixed(100.0 * net.reduction_ratio(), 2)
      << "% fewer parameters)\n";
}

// --- command line -----------------------------------------------------------

namespace {

std::string keys_footer() {
  std::ostringstream os;
  os << "Config keys (JSON file via --config, or --set key=value; default shown):\n";
  for (const ConfigKey& k : config_keys()) {
    os << "  " << std::left << std::setw(28) << k.key << std::setw(34) << k.default_json << k.help << "\n";
  }
  os << "Environment: COLLABDQN_THREADS caps the worker count (ignored with --deterministic).\n"
     << "Exit codes: 0 success, 1 usage or config error, 2 runtime error.";
  return os.str();
}

struct Shared {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool force = false;
  std::vector<std::string> sets;
  std::string data_dir, checkpoint, report;
};

void add_shared(CLI::App* sub, Shared& s) {
  sub->add_option("--config", s.config_path, "JSON config file");
  sub->add_option("--seed", s.seed, "seed (generate: synth.seed, train: train.seed)");
  sub->add_flag("--deterministic", s.deterministic, "single-threaded, bitwise-reproducible");
  sub->add_flag("--force", s.force, "overwrite a non-empty output directory");
  sub->add_option("--set", s.sets, "override a config key, key=value (repeatable)");
  sub->add_option("--data-dir", s.data_dir, "same as --set data.dir=DIR");
  sub->add_option("--checkpoint", s.checkpoint, "same as --set paths.checkpoint=PATH");
  sub->add_option("--report", s.report, "same as --set paths.report=STEM");
}

RunConfig resolve(const Shared& s, const std::string& command) {
  RunConfig c = s.config_path.empty() ? RunConfig{} : parse_run_config(read_text(s.config_path));
  for (const std::string& a : s.sets) apply_override(c, a);
  if (!s.data_dir.empty()) c.data_dir = s.data_dir;
  if (!s.checkpoint.empty()) c.checkpoint = s.checkpoint;
  if (!s.report.empty()) c.report = s.report;
  if (s.seed) (command == "generate" ? c.synth.seed : c.train.seed) = *s.seed;
  if (s.deterministic) c.deterministic = true;
  return c;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shared-trunk multi-agent DQN for landmark localization in 3D volumes", "collabdqn"};
  app.require_subcommand(1);
  app.footer(keys_footer());
  Shared shared;
  std::optional<std::string> resume;
  std::string format;
  std::string inspect_path;

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset and its manifest");
  CLI::App* train = app.add_subcommand("train", "train on the train split");
  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  CLI::App* inspect = app.add_subcommand("inspect", "print the layer table and parameter counts of a checkpoint");
  for (CLI::App* sub : {gen, train, evaluate, inspect}) add_shared(sub, shared);
  train->add_option("--resume", resume, "continue from a checkpoint");
  evaluate->add_option("--format", format, "text | csv | both")->check(CLI::IsMember({"text", "csv", "both"}));
  inspect->add_option("path", inspect_path, "checkpoint (default: paths.checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig config = resolve(shared, command);
    if (!format.empty()) config.report_format = format;
    if (command == "generate") {
      cmd_generate(config, shared.force, out);
    } else if (command == "train") {
      cmd_train(config, resume ? std::optional<fs::path>(*resume) : std::nullopt, out);
    } else if (command == "evaluate") {
      cmd_evaluate(config, out);
    } else {
      cmd_inspect(inspect_path.empty() ? fs::path(config.checkpoint) : fs::path(inspect_path), out);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace collabdqn::cli
