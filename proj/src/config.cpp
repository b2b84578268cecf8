#include "collabdqn/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>

#include "json.hpp"

#include "collabdqn/error.hpp"

namespace collabdqn {

using json = nlohmann::json;

namespace {

struct Field {
  std::string key;
  std::string help;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
T as(const json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (std::is_unsigned_v<T> ? !j.is_number_unsigned() : !j.is_number_integer()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ConfigError("");
    }
    return j.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected " +
                      (std::is_same_v<T, bool>            ? std::string("a boolean")
                       : std::is_unsigned_v<T>            ? std::string("a non-negative integer")
                       : std::is_integral_v<T>            ? std::string("an integer")
                       : std::is_floating_point_v<T>      ? std::string("a number")
                       : std::is_same_v<T, std::string>   ? std::string("a string")
                                                          : std::string("a list")) +
                      ", got " + j.dump());
  }
}

// Binds a key to a member reached through `ref`.
template <typename T, typename Ref>
Field bind(std::string key, std::string help, Ref ref) {
  Field f;
  f.key = key;
  f.help = std::move(help);
  f.get = [ref](const RunConfig& c) {
    const T& value = ref(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<T, float>) {
      // Shortest decimal that round-trips the float, so 1e-4f prints as 0.0001.
      char buf[32];
      const auto end = std::to_chars(buf, buf + sizeof buf, value).ptr;
      return json(std::stod(std::string(buf, end)));
    } else {
      return json(value);
    }
  };
  f.set = [ref, key](RunConfig& c, const json& j) { ref(c) = as<T>(j, key); };
  return f;
}

template <typename T, std::size_t N>
Field bind_array(std::string key, std::string help, std::function<std::array<T, N>&(RunConfig&)> ref) {
  Field f;
  f.key = key;
  f.help = std::move(help);
  f.get = [ref](const RunConfig& c) { return json(ref(const_cast<RunConfig&>(c))); };
  f.set = [ref, key](RunConfig& c, const json& j) {
    if (!j.is_array() || j.size() != N) throw ConfigError("config key '" + key + "': expected a list of " + std::to_string(N));
    for (std::size_t i = 0; i < N; ++i) ref(c)[i] = as<T>(j[i], key);
  };
  return f;
}

Field bind_ints(std::string key, std::string help, std::function<std::vector<int>&(RunConfig&)> ref) {
  Field f;
  f.key = key;
  f.help = std::move(help);
  f.get = [ref](const RunConfig& c) { return json(ref(const_cast<RunConfig&>(c))); };
  f.set = [ref, key](RunConfig& c, const json& j) {
    if (!j.is_array()) throw ConfigError("config key '" + key + "': expected a list of integers");
    std::vector<int> v;
    for (const json& e : j) v.push_back(as<int>(e, key));
    ref(c) = v;
  };
  return f;
}

#define REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(bind<std::string>("data.dir", "dataset directory (manifest.json inside)", REF(data_dir)));
    v.push_back(bind<std::size_t>("data.train_volumes", "training volumes to generate", REF(train_volumes)));
    v.push_back(bind<std::size_t>("data.test_volumes", "test volumes to generate", REF(test_volumes)));
    v.push_back(bind<std::size_t>("data.template_landmarks", "landmarks drawn into each volume (1-5)",
                                  REF(template_landmarks)));
    v.push_back(bind_array<std::size_t, 3>("synth.extent", "volume shape in voxels",
                                           [](RunConfig& c) -> auto& { return c.synth.extent; }));
    v.push_back(bind_array<double, 3>("synth.spacing_mm", "voxel spacing",
                                      [](RunConfig& c) -> auto& { return c.synth.spacing; }));
    v.push_back(bind<double>("synth.template_unit", "template unit as a fraction of the smallest extent",
                             REF(synth.template_unit)));
    v.push_back(bind<double>("synth.rotation_deg", "rotation range (+-, degrees)", REF(synth.rotation_deg)));
    v.push_back(bind<double>("synth.scale_min", "isotropic scale lower bound", REF(synth.scale_min)));
    v.push_back(bind<double>("synth.scale_max", "isotropic scale upper bound", REF(synth.scale_max)));
    v.push_back(bind<double>("synth.translation_vox", "translation range (+-, voxels)", REF(synth.translation_vox)));
    v.push_back(bind<double>("synth.landmark_jitter_vox", "independent landmark jitter sigma",
                             REF(synth.landmark_jitter_vox)));
    v.push_back(bind<double>("synth.noise_sigma", "Gaussian noise sigma", REF(synth.noise_sigma)));
    v.push_back(bind<double>("synth.contrast", "structure amplitude multiplier", REF(synth.contrast)));
    v.push_back(bind<std::uint64_t>("synth.seed", "dataset seed", REF(synth.seed)));
    v.push_back(bind<std::size_t>("agents.count", "number of agents K", REF(agents)));
    {
      Field f;
      f.key = "agents.landmarks";
      f.help = "landmark name per agent";
      f.get = [](const RunConfig& c) { return json(c.landmarks); };
      f.set = [](RunConfig& c, const json& j) {
        if (!j.is_array()) throw ConfigError("config key 'agents.landmarks': expected a list of names");
        c.landmarks.clear();
        for (const json& e : j) c.landmarks.push_back(as<std::string>(e, "agents.landmarks"));
      };
      v.push_back(f);
    }
    v.push_back(bind<std::string>("train.architecture", "desk | uniform_k3", REF(architecture)));
    v.push_back(bind<double>("train.gamma", "discount", REF(train.gamma)));
    v.push_back(bind<double>("train.eps_start", "initial epsilon", REF(train.eps_start)));
    v.push_back(bind<double>("train.eps_end", "final epsilon", REF(train.eps_end)));
    v.push_back(bind<std::int64_t>("train.eps_decay_steps", "linear decay length, 0 = 75% of total_steps",
                                   REF(train.eps_decay_steps)));
    v.push_back(bind<std::int64_t>("train.target_sync", "updates between target syncs", REF(train.target_sync)));
    v.push_back(bind<std::size_t>("train.batch", "batch per agent", REF(train.batch)));
    v.push_back(bind<std::size_t>("train.replay_capacity", "replay capacity per agent", REF(train.replay_capacity)));
    v.push_back(bind<std::size_t>("train.warmup", "transitions per agent before updates", REF(train.warmup)));
    v.push_back(bind<int>("train.max_episode_steps", "steps per training episode", REF(train.max_episode_steps)));
    v.push_back(bind<std::int64_t>("train.total_steps", "environment steps, warmup included", REF(train.total_steps)));
    v.push_back(bind<std::int64_t>("train.episodes", "episode cap, 0 = none", REF(train.episodes)));
    v.push_back(bind<int>("train.update_every", "environment steps per update", REF(train.update_every)));
    v.push_back(bind<std::uint64_t>("train.seed", "training seed", REF(train.seed)));
    v.push_back(bind_ints("train.ladder", "multi-scale step ladder (voxels)",
                          [](RunConfig& c) -> auto& { return c.train.ladder; }));
    v.push_back(bind<std::size_t>("train.roi", "ROI edge (odd)", REF(train.roi)));
    v.push_back(bind<float>("train.lr", "Adam learning rate", REF(train.adam.lr)));
    v.push_back(bind<float>("train.beta1", "Adam beta1", REF(train.adam.beta1)));
    v.push_back(bind<float>("train.beta2", "Adam beta2", REF(train.adam.beta2)));
    v.push_back(bind<float>("train.adam_eps", "Adam epsilon", REF(train.adam.eps)));
    v.push_back(bind<std::int64_t>("train.checkpoint_every", "episodes between checkpoints, 0 = end only",
                                   REF(checkpoint_every)));
    v.push_back(bind<bool>("train.fixed_step", "single 1-voxel step instead of the ladder", REF(fixed_step)));
    v.push_back(bind<std::string>("paths.checkpoint", "checkpoint file", REF(checkpoint)));
    v.push_back(bind<std::string>("paths.log", "training log (one JSON line per episode)", REF(log)));
    v.push_back(bind<std::string>("paths.report", "report stem (.txt / .csv appended)", REF(report)));
    v.push_back(bind<std::string>("evaluate.format", "text | csv | both", REF(report_format)));
    v.push_back(bind<int>("evaluate.max_frames", "test frame budget per agent", REF(max_frames)));
    v.push_back(bind<bool>("deterministic", "single-threaded, bitwise-reproducible", REF(deterministic)));
    return v;
  }();
  return f;
}

#undef REF

const Field& find_field(std::string_view key) {
  for (const Field& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_object(RunConfig& c, const json& obj, const std::string& prefix) {
  for (const auto& [k, v] : obj.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      apply_object(c, v, key);
    } else {
      find_field(key).set(c, v);
    }
  }
}

}  // namespace

RunConfig::RunConfig() { synth.landmarks = synth::default_template(template_landmarks); }

void RunConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("config: " + what); };
  if (train_volumes < 1) fail("data.train_volumes must be >= 1");
  if (template_landmarks < 1 || template_landmarks > 5) fail("data.template_landmarks must be in [1, 5]");
  if (agents < 1) fail("agents.count must be >= 1");
  if (landmarks.size() != agents) {
    fail("agents.count is " + std::to_string(agents) + " but agents.landmarks names " +
         std::to_string(landmarks.size()));
  }
  if (report_format != "text" && report_format != "csv" && report_format != "both") {
    fail("evaluate.format must be text, csv or both");
  }
  if (max_frames < 1) fail("evaluate.max_frames must be >= 1");
  if (checkpoint_every < 0) fail("train.checkpoint_every must be >= 0");
  (void)architecture_by_name(architecture);
  synth_config().validate();
  train_config().validate();
}

trainer::TrainConfig RunConfig::train_config() const {
  trainer::TrainConfig t = train;
  t.arch = architecture_by_name(architecture);
  if (fixed_step) t.ladder = {1};
  return t;
}

eval::EvalConfig RunConfig::eval_config() const {
  eval::EvalConfig e;
  e.test.max_frames = max_frames;
  e.test.ladder = fixed_step ? std::vector<int>{1} : train.ladder;
  e.test.roi = static_cast<int>(train.roi);
  return e;
}

synth::SynthConfig RunConfig::synth_config() const {
  synth::SynthConfig s = synth;
  s.landmarks = synth::default_template(std::clamp<std::size_t>(template_landmarks, 1, 5));
  return s;
}

qmodel::Architecture architecture_by_name(const std::string& name) {
  if (name == "desk") return qmodel::Architecture::desk();
  if (name == "uniform_k3") return qmodel::Architecture::uniform_k3();
  throw ConfigError("unknown architecture '" + name + "' (expected desk or uniform_k3)");
}

std::vector<ConfigKey> config_keys() {
  const RunConfig defaults;
  std::vector<ConfigKey> out;
  for (const Field& f : fields()) out.push_back({f.key, f.get(defaults).dump(), f.help});
  return out;
}

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  apply_object(c, j, "");
  return c;
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  const Field& f = find_field(key);
  json j = json::parse(value, nullptr, false);
  if (j.is_discarded()) j = value;
  f.set(config, j);
}

std::string to_json_text(const RunConfig& config) {
  json out = json::object();
  for (const Field& f : fields()) out[json::json_pointer("/" + [&] {
                                       std::string p = f.key;
                                       std::replace(p.begin(), p.end(), '.', '/');
                                       return p;
                                     }())] = f.get(config);
  return out.dump(2) + "\n";
}

}  // namespace collabdqn
