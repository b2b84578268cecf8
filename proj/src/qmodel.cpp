#include "collabdqn/qmodel.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "collabdqn/error.hpp"

namespace collabdqn::qmodel {

using json = nlohmann::json;

Architecture Architecture::desk() {
  return {{{16, 3, true}, {32, 3, true}, {32, 2, false}}, {128, 64}};
}

Architecture Architecture::uniform_k3() {
  return {{{16, 3, true}, {32, 3, true}, {32, 3, true}}, {128, 64}};
}

namespace {

nn::Sequential make_trunk(const Architecture& arch) {
  nn::Sequential s;
  std::size_t in = kHistoryChannels;
  for (const ConvStage& st : arch.trunk) {
    s.layers.push_back({nn::OpKind::conv3d, nn::make_conv3d(in, st.channels, st.kernel), 2});
    s.layers.push_back({nn::OpKind::relu, {}, 2});
    if (st.pool) s.layers.push_back({nn::OpKind::maxpool3d, {}, 2});
    in = st.channels;
  }
  return s;
}

nn::Sequential make_head(const Architecture& arch, std::size_t in) {
  nn::Sequential s;
  for (std::size_t w : arch.head_hidden) {
    s.layers.push_back({nn::OpKind::dense, nn::make_dense(in, w), 2});
    s.layers.push_back({nn::OpKind::relu, {}, 2});
    in = w;
  }
  s.layers.push_back({nn::OpKind::dense, nn::make_dense(in, kActions), 2});
  return s;
}

void validate_arch(const Architecture& arch) {
  if (arch.trunk.empty()) throw ArchitectureError("architecture needs at least one conv stage");
  for (const ConvStage& st : arch.trunk) {
    if (st.channels < 1 || st.kernel < 1) throw ArchitectureError("conv stages need channels >= 1 and kernel >= 1");
  }
  for (std::size_t w : arch.head_hidden) {
    if (w < 1) throw ArchitectureError("head widths must be >= 1");
  }
}

// Flattened trunk width for R; throws ArchitectureError naming the layer.
std::size_t trunk_width(const nn::Sequential& trunk, std::size_t roi) {
  try {
    const Shape out = trunk.output_shape({1, kHistoryChannels, roi, roi, roi});
    return shape_numel(out);
  } catch (const ShapeError& e) {
    throw ArchitectureError("ROI extent " + std::to_string(roi) + " too small for the trunk: " + e.what());
  }
}

void init(nn::Sequential& s, Philox rng) {
  for (nn::Layer& l : s.layers) {
    if (l.has_params()) nn::he_uniform_init(l.params, rng);
  }
}

void append_names(const nn::Sequential& s, const std::string& prefix, std::vector<std::string>& out) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    if (!s.layers[i].has_params()) continue;
    const std::string base = prefix + "." + nn::layer_name(s.layers[i], i);
    out.push_back(base + ".weight");
    out.push_back(base + ".bias");
  }
}

}  // namespace

std::size_t Architecture::min_roi() const {
  validate_arch(*this);
  const nn::Sequential t = make_trunk(*this);
  for (std::size_t r = 1; r < 4096; r += 2) {
    try {
      (void)t.output_shape({1, kHistoryChannels, r, r, r});
      return r;
    } catch (const ShapeError&) {
    }
  }
  throw ArchitectureError("no ROI extent fits this trunk");
}

std::string describe(const Architecture& arch) {
  std::ostringstream os;
  os << "trunk";
  for (const ConvStage& st : arch.trunk) os << " conv" << st.channels << "k" << st.kernel << (st.pool ? "+pool" : "");
  os << " | head";
  for (std::size_t w : arch.head_hidden) os << " " << w;
  os << " " << kActions;
  return os.str();
}

double reduction_ratio(std::size_t trunk, std::size_t head, std::size_t agents) {
  if (agents == 0 || trunk + head == 0) return 0.0;
  return static_cast<double>(agents - 1) * static_cast<double>(trunk) /
         (static_cast<double>(agents) * static_cast<double>(trunk + head));
}

std::size_t CollabQNet::feature_width() const { return heads.empty() ? 0 : heads.front().layers.front().params.in_width(); }

ParamCount CollabQNet::param_count() const {
  ParamCount c;
  c.trunk = trunk.param_count();
  c.per_head = heads.empty() ? 0 : heads.front().param_count();
  c.total = c.trunk;
  for (const auto& h : heads) c.total += h.param_count();
  return c;
}

double CollabQNet::reduction_ratio() const {
  const ParamCount c = param_count();
  return qmodel::reduction_ratio(c.trunk, c.per_head, agents);
}

std::vector<std::string> CollabQNet::parameter_names() const {
  std::vector<std::string> out;
  append_names(trunk, "trunk", out);
  for (std::size_t k = 0; k < heads.size(); ++k) append_names(heads[k], "head" + std::to_string(k), out);
  return out;
}

std::vector<Tensor*> CollabQNet::parameters() {
  std::vector<Tensor*> out = trunk.parameters();
  for (auto& h : heads) {
    const auto p = h.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<const Tensor*> CollabQNet::parameters() const {
  std::vector<const Tensor*> out = trunk.parameters();
  for (const auto& h : heads) {
    const auto p = h.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Tensor CollabQNet::features(const Tensor& batch) const {
  const Tensor f = trunk.forward(batch);
  return f.reshaped({f.dim(0), f.size() / f.dim(0)});
}

Tensor CollabQNet::head_forward(std::size_t agent, const Tensor& features) const {
  if (agent >= heads.size()) throw ShapeError("agent index " + std::to_string(agent) + " out of range");
  return heads[agent].forward(features);
}

Tensor CollabQNet::forward(std::span<const Tensor> observations) const {
  if (observations.size() != agents) {
    throw ShapeError("expected " + std::to_string(agents) + " observations, got " + std::to_string(observations.size()));
  }
  const Shape want{kHistoryChannels, roi, roi, roi};
  const std::size_t per = shape_numel(want);
  std::vector<float> stacked;
  stacked.reserve(per * agents);
  for (std::size_t k = 0; k < agents; ++k) {
    if (observations[k].shape() != want) {
      throw ShapeError("observation of agent " + std::to_string(k) + " has shape " +
                       shape_str(observations[k].shape()) + ", expected " + shape_str(want));
    }
    const auto d = observations[k].data();
    stacked.insert(stacked.end(), d.begin(), d.end());
  }
  const Tensor feats = features(Tensor({agents, kHistoryChannels, roi, roi, roi}, std::move(stacked)));
  const std::size_t f = feats.dim(1);
  Tensor q({agents, kActions});
  for (std::size_t k = 0; k < agents; ++k) {
    Tensor row({1, f}, std::vector<float>(feats.raw() + k * f, feats.raw() + (k + 1) * f));
    const Tensor qk = heads[k].forward(row);
    std::copy(qk.raw(), qk.raw() + kActions, q.raw() + k * kActions);
  }
  return q;
}

bool CollabQNet::same_structure(const CollabQNet& other) const {
  return arch == other.arch && agents == other.agents && roi == other.roi;
}

CollabQNet build(std::size_t agents, std::size_t roi, const Architecture& arch, std::uint64_t seed,
                 std::span<const std::uint64_t> head_seeds) {
  if (agents < 1) throw ArchitectureError("agent count must be >= 1");
  if (!head_seeds.empty() && head_seeds.size() != agents) {
    throw ArchitectureError("need one head seed per agent");
  }
  validate_arch(arch);
  CollabQNet net;
  net.arch = arch;
  net.agents = agents;
  net.roi = roi;
  net.trunk = make_trunk(arch);
  const std::size_t width = trunk_width(net.trunk, roi);
  init(net.trunk, Philox(mix_seed(seed, 0)));
  for (std::size_t k = 0; k < agents; ++k) {
    nn::Sequential h = make_head(arch, width);
    init(h, Philox(head_seeds.empty() ? mix_seed(seed, k + 1) : head_seeds[k]));
    net.heads.push_back(std::move(h));
  }
  return net;
}

void require_structure(const CollabQNet& net, std::size_t agents, std::size_t roi, const Architecture& arch) {
  if (net.agents != agents || net.roi != roi || !(net.arch == arch)) {
    throw ArchitectureError("architecture mismatch: have K=" + std::to_string(net.agents) + " R=" +
                            std::to_string(net.roi) + " [" + describe(net.arch) + "], requested K=" +
                            std::to_string(agents) + " R=" + std::to_string(roi) + " [" + describe(arch) + "]");
  }
}

CollabQNet clone_target(const CollabQNet& net) { return net; }

void sync_target(const CollabQNet& net, CollabQNet& target) {
  require_structure(target, net.agents, net.roi, net.arch);
  const auto src = net.parameters();
  const auto dst = target.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = *src[i];
}

std::vector<nn::GradientSet> make_optimizer(const CollabQNet& net) {
  std::vector<nn::GradientSet> out;
  std::vector<std::string> names;
  append_names(net.trunk, "trunk", names);
  const auto tp = net.trunk.parameters();
  out.emplace_back(std::span<const Tensor* const>(tp), names);
  for (std::size_t k = 0; k < net.heads.size(); ++k) {
    names.clear();
    append_names(net.heads[k], "head" + std::to_string(k), names);
    const auto hp = net.heads[k].parameters();
    out.emplace_back(std::span<const Tensor* const>(hp), names);
  }
  return out;
}

std::vector<Tensor*> group_parameters(CollabQNet& net, std::size_t group) {
  return group == 0 ? net.trunk.parameters() : net.heads.at(group - 1).parameters();
}

// --- checkpoints -------------------------------------------------------------

namespace {

json arch_json(const CollabQNet& net) {
  json trunk = json::array();
  for (const ConvStage& st : net.arch.trunk) {
    trunk.push_back({{"channels", st.channels}, {"kernel", st.kernel}, {"pool", st.pool}});
  }
  return {{"agents", net.agents}, {"roi", net.roi}, {"trunk", trunk}, {"head_hidden", net.arch.head_hidden},
          {"actions", kActions}, {"history", kHistoryChannels}};
}

struct Entry {
  std::string name;
  const Tensor* tensor;
};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const CollabQNet& net = ckpt.net;
  std::vector<Entry> entries;
  const auto names = net.parameter_names();
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) entries.push_back({names[i], params[i]});
  if (ckpt.target) {
    require_structure(*ckpt.target, net.agents, net.roi, net.arch);
    const auto tp = ckpt.target->parameters();
    for (std::size_t i = 0; i < tp.size(); ++i) entries.push_back({"target." + names[i], tp[i]});
  }
  json steps = json::array();
  if (!ckpt.optimizer.empty()) {
    if (ckpt.optimizer.size() != net.agents + 1) throw TensorCountError("optimizer state does not match the network");
    for (const nn::GradientSet& g : ckpt.optimizer) {
      for (std::size_t i = 0; i < g.size(); ++i) entries.push_back({"adam_m." + g.name(i), &g.first_moment(i)});
      for (std::size_t i = 0; i < g.size(); ++i) entries.push_back({"adam_v." + g.name(i), &g.second_moment(i)});
      steps.push_back(g.step());
    }
  }

  json dir = json::array();
  std::uint64_t offset = 0;
  for (const Entry& e : entries) {
    dir.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    offset += e.tensor->size() * 4;
  }
  json header = {{"architecture", arch_json(net)},
                 {"tensors", dir},
                 {"payload_bytes", offset},
                 {"train_step", ckpt.train_step},
                 {"episode", ckpt.episode},
                 {"has_target", ckpt.target.has_value()},
                 {"optimizer_steps", steps},
                 {"metadata", json::parse(ckpt.metadata)}};
  if (ckpt.rng) {
    header["rng"] = {{"seed", ckpt.rng->seed}, {"stream", ckpt.rng->stream}, {"counter", ckpt.rng->counter},
                     {"index", ckpt.rng->index}};
  }
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const Entry& e : entries) {
    for (float f : e.tensor->data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw PathError("cannot write checkpoint " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw PathError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PathError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(where + "not a checkpoint (bad magic)");
  }
  if (bytes.size() < 20) throw TruncatedError(where + "truncated preamble");
  const auto version = static_cast<std::uint32_t>(get_le(b + 8, 4));
  if (version != kCheckpointVersion) {
    throw VersionError(where + "checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const std::uint64_t hlen = get_le(b + 12, 8);
  if (hlen > bytes.size() - 20) throw TruncatedError(where + "truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(20, hlen));
  } catch (const json::exception& e) {
    throw FormatError(where + "bad header: " + e.what());
  }

  Checkpoint ck;
  std::vector<std::pair<std::string, Tensor*>> slots;
  try {
    const json& a = header.at("architecture");
    Architecture arch;
    for (const json& st : a.at("trunk")) {
      arch.trunk.push_back({st.at("channels").get<std::size_t>(), st.at("kernel").get<std::size_t>(),
                            st.at("pool").get<bool>()});
    }
    arch.head_hidden = a.at("head_hidden").get<std::vector<std::size_t>>();
    if (a.at("actions").get<std::size_t>() != kActions || a.at("history").get<std::size_t>() != kHistoryChannels) {
      throw ArchitectureError(where + "unsupported action or history width");
    }
    ck.net = build(a.at("agents").get<std::size_t>(), a.at("roi").get<std::size_t>(), arch, 0);
    ck.train_step = header.at("train_step").get<std::int64_t>();
    ck.episode = header.at("episode").get<std::int64_t>();
    ck.metadata = header.at("metadata").dump();
    if (header.contains("rng")) {
      const json& r = header["rng"];
      ck.rng = Philox::State{r.at("seed").get<std::uint64_t>(), r.at("stream").get<std::uint64_t>(),
                             r.at("counter").get<std::uint64_t>(), r.at("index").get<std::uint32_t>()};
    }

    const auto names = ck.net.parameter_names();
    for (std::size_t i = 0; i < names.size(); ++i) slots.emplace_back(names[i], ck.net.parameters()[i]);
    if (header.at("has_target").get<bool>()) {
      ck.target = ck.net;
      const auto tp = ck.target->parameters();
      for (std::size_t i = 0; i < names.size(); ++i) slots.emplace_back("target." + names[i], tp[i]);
    }
    const json& steps = header.at("optimizer_steps");
    if (!steps.empty()) {
      ck.optimizer = make_optimizer(ck.net);
      if (steps.size() != ck.optimizer.size()) {
        throw TensorCountError(where + "optimizer lists " + std::to_string(steps.size()) + " groups, expected " +
                               std::to_string(ck.optimizer.size()));
      }
      for (std::size_t g = 0; g < steps.size(); ++g) {
        nn::GradientSet& set = ck.optimizer[g];
        set.set_step(steps[g].get<std::int64_t>());
        for (std::size_t i = 0; i < set.size(); ++i) slots.emplace_back("adam_m." + set.name(i), &set.first_moment(i));
        for (std::size_t i = 0; i < set.size(); ++i) slots.emplace_back("adam_v." + set.name(i), &set.second_moment(i));
      }
    }

    const json& dir = header.at("tensors");
    if (dir.size() != slots.size()) {
      throw TensorCountError(where + "checkpoint lists " + std::to_string(dir.size()) + " tensors, architecture needs " +
                             std::to_string(slots.size()));
    }
    const std::uint64_t payload = header.at("payload_bytes").get<std::uint64_t>();
    const std::size_t base = 20 + hlen;
    if (bytes.size() - base < payload) {
      throw TruncatedError(where + "payload has " + std::to_string(bytes.size() - base) + " bytes, expected " +
                           std::to_string(payload));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const json& e = dir[i];
      Tensor& t = *slots[i].second;
      if (e.at("name").get<std::string>() != slots[i].first) {
        throw ArchitectureError(where + "tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                                "', expected '" + slots[i].first + "'");
      }
      if (e.at("shape").get<Shape>() != t.shape()) {
        throw ArchitectureError(where + "tensor '" + slots[i].first + "' has the wrong shape");
      }
      const std::uint64_t off = e.at("offset").get<std::uint64_t>();
      if (off + t.size() * 4 > payload) throw TruncatedError(where + "tensor '" + slots[i].first + "' overruns payload");
      const unsigned char* p = b + base + off;
      for (std::size_t j = 0; j < t.size(); ++j) {
        t[j] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + 4 * j, 4)));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(where + "bad header: " + e.what());
  }
  return ck;
}

}  // namespace collabdqn::qmodel
