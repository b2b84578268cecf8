#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "collabdqn/cli.hpp"
#include "collabdqn/config.hpp"
#include "collabdqn/error.hpp"
#include "collabdqn/eval.hpp"
#include "collabdqn/qmodel.hpp"
#include "collabdqn/synth.hpp"
#include "collabdqn/trainer.hpp"

namespace py = pybind11;
using namespace collabdqn;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

Tensor from_numpy(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> volume_array(const env::Volume& v) {
  py::array_t<float> a({v.shape[0], v.shape[1], v.shape[2]});
  std::copy(v.intensities.begin(), v.intensities.end(), a.mutable_data());
  return a;
}

py::dict landmark_dict(const env::LandmarkSet& set) {
  py::dict d;
  for (const auto& l : set.entries) d[py::str(l.name)] = py::make_tuple(l.position.x, l.position.y, l.position.z);
  return d;
}

py::dict sample_dict(const synth::Sample& s) {
  py::dict d;
  d["volume"] = volume_array(s.volume);
  d["spacing_mm"] = py::make_tuple(s.volume.spacing[0], s.volume.spacing[1], s.volume.spacing[2]);
  d["landmarks"] = landmark_dict(s.landmarks);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Shared-trunk multi-agent DQN for 3D landmark localization";

  py::register_exception<Error>(m, "Error");

  m.def(
      "generate",
      [](std::size_t n, std::uint64_t seed, std::array<std::size_t, 3> extent, std::size_t landmarks) {
        synth::SynthConfig c;
        c.seed = seed;
        c.extent = extent;
        c.landmarks = synth::default_template(landmarks);
        py::list out;
        for (const auto& s : synth::generate(c, n)) out.append(sample_dict(s));
        return out;
      },
      py::arg("n"), py::arg("seed") = 1, py::arg("extent") = std::array<std::size_t, 3>{64, 64, 64},
      py::arg("landmarks") = 2, "Synthetic volumes with shared-pose landmarks.");

  m.def(
      "load_volume", [](const std::string& stem) { return sample_dict(synth::load_volume(stem)); }, py::arg("stem"),
      "Reads a <stem>.vol.json / .vol.raw / .landmarks.json triplet.");

  m.def("start_grid", [](std::array<std::size_t, 3> shape) {
    std::vector<std::array<int, 3>> out;
    for (const auto& p : env::start_grid(shape)) out.push_back({p.x, p.y, p.z});
    return out;
  });

  m.def("reduction_ratio", py::overload_cast<std::size_t, std::size_t, std::size_t>(&qmodel::reduction_ratio),
        py::arg("trunk"), py::arg("head"), py::arg("agents"));

  m.def(
      "bellman_targets",
      [](std::vector<float> rewards, std::vector<std::uint8_t> terminal, const FloatArray& next_q, float gamma) {
        return trainer::bellman_targets(rewards, terminal, from_numpy(next_q), gamma);
      },
      py::arg("rewards"), py::arg("terminal"), py::arg("next_q"), py::arg("gamma"));

  m.def(
      "aggregate",
      [](std::vector<double> values) {
        const eval::Stats s = eval::aggregate(values);
        py::dict d;
        d["mean"] = s.mean;
        d["std"] = s.std;
        d["median"] = s.median;
        d["n"] = s.n;
        return d;
      },
      py::arg("values"), "Mean, population std and median.");

  py::class_<qmodel::CollabQNet>(m, "CollabQNet")
      .def_readonly("agents", &qmodel::CollabQNet::agents)
      .def_readonly("roi", &qmodel::CollabQNet::roi)
      .def("param_count",
           [](const qmodel::CollabQNet& n) {
             const auto c = n.param_count();
             py::dict d;
             d["trunk"] = c.trunk;
             d["per_head"] = c.per_head;
             d["total"] = c.total;
             return d;
           })
      .def("reduction_ratio", &qmodel::CollabQNet::reduction_ratio)
      .def("parameter_names", &qmodel::CollabQNet::parameter_names)
      .def("describe", [](const qmodel::CollabQNet& n) { return qmodel::describe(n.arch); })
      .def(
          "forward",
          [](const qmodel::CollabQNet& n, const std::vector<FloatArray>& obs) {
            std::vector<Tensor> t;
            for (const auto& o : obs) t.push_back(from_numpy(o));
            return to_numpy(n.forward(t));
          },
          py::arg("observations"), "One [4, R, R, R] array per agent -> Q-values [K, 6].");

  m.def(
      "build",
      [](std::size_t agents, std::size_t roi, std::uint64_t seed, const std::string& arch) {
        return qmodel::build(agents, roi, architecture_by_name(arch), seed);
      },
      py::arg("agents"), py::arg("roi") = 15, py::arg("seed") = 1, py::arg("arch") = "desk");

  m.def(
      "load_checkpoint", [](const std::string& path) { return qmodel::load_checkpoint(path).net; }, py::arg("path"));

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "collabdqn");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line; returns (exit_code, stdout, stderr).");
}
