// Python module ennshift._core.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "ennshift/artifact_io.hpp"
#include "ennshift/errors.hpp"
#include "ennshift/metrics.hpp"
#include "ennshift/pipeline.hpp"
#include "ennshift/shiftbench.hpp"

namespace py = pybind11;
using namespace ennshift;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<int, py::array::c_style | py::array::forcecast>;

Tensor images_tensor(const F32& a) {
  if (a.ndim() != 4) throw DimensionError("images must be [n, 1, h, w]");
  Shape s;
  for (py::ssize_t d = 0; d < a.ndim(); ++d) s.push_back(static_cast<std::size_t>(a.shape(d)));
  return Tensor(std::move(s), std::vector<float>(a.data(), a.data() + a.size()));
}

F32 to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  F32 out(shape);
  std::memcpy(out.mutable_data(), t.data().data(), t.data().size() * sizeof(float));
  return out;
}

std::vector<int> to_labels(const I32& a) { return {a.data(), a.data() + a.size()}; }

std::span<const double> probs_table(const F64& p, std::size_t& classes) {
  if (p.ndim() != 2) throw DimensionError("probabilities must be [n, classes]");
  classes = static_cast<std::size_t>(p.shape(1));
  return {p.data(), static_cast<std::size_t>(p.size())};
}

py::tuple dataset_tuple(const ImageDataset& d) {
  return py::make_tuple(to_array(d.images), I32(static_cast<py::ssize_t>(d.labels.size()), d.labels.data()));
}

ImageDataset dataset_from(const F32& images, const I32& labels) {
  ImageDataset d;
  d.images = images_tensor(images);
  d.labels = to_labels(labels);
  if (d.labels.size() != d.images.dim(0)) throw DimensionError("images and labels differ in length");
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Epistemic neural networks under synthetic distribution shift";

  // Leaked on purpose: the translator may run during interpreter shutdown.
  static PyObject* error = PyErr_NewException("ennshift._core.EnnshiftError", PyExc_RuntimeError, nullptr);
  m.attr("EnnshiftError") = py::handle(error);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error, (e.kind() + ": " + e.what()).c_str());
    }
  });

  m.def("sha256_hex", [](py::bytes b) {
    const std::string s = b;
    return sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  });

  // --- data ---
  m.def("generate_dataset",
        [](std::size_t n, std::size_t classes, std::uint64_t seed) {
          return dataset_tuple(generate_dataset(n, classes, seed));
        },
        py::arg("n"), py::arg("classes"), py::arg("seed"),
        "Grating images [n, 1, 16, 16] in [0, 1] and balanced labels.");
  m.def("corruptions", [] {
    std::vector<std::string> out;
    for (Corruption c : all_corruptions()) out.emplace_back(to_string(c));
    return out;
  });
  m.def("corrupt",
        [](const F32& images, const I32& labels, const std::string& type, int severity,
           std::uint64_t seed) {
          return to_array(corrupt(dataset_from(images, labels), type, severity, seed).images);
        },
        py::arg("images"), py::arg("labels"), py::arg("type"), py::arg("severity"), py::arg("seed"));

  // --- metrics over probability tables ---
  m.def("accuracy", [](const F64& probs, const I32& labels) {
    std::size_t c = 0;
    const auto p = probs_table(probs, c);
    return accuracy_from_probs(p, c, to_labels(labels));
  });
  m.def("ece",
        [](const F64& probs, const I32& labels, std::size_t n_bins) {
          std::size_t c = 0;
          const auto p = probs_table(probs, c);
          return ece_from_probs(p, c, to_labels(labels), n_bins);
        },
        py::arg("probs"), py::arg("labels"), py::arg("n_bins") = 10);
  m.def("failure_rate",
        [](const F64& probs, const I32& labels, double threshold) {
          std::size_t c = 0;
          const auto p = probs_table(probs, c);
          return failure_rate_from_probs(p, c, to_labels(labels), threshold);
        },
        py::arg("probs"), py::arg("labels"), py::arg("threshold") = kDefaultFailureThreshold);
  m.def("aupr", [](const F64& in_dist, const F64& ood) {
    return aupr({in_dist.data(), static_cast<std::size_t>(in_dist.size())},
                {ood.data(), static_cast<std::size_t>(ood.size())});
  });
  m.def("mce", &mce, py::arg("model_errors"), py::arg("baseline_errors"));

  // --- models ---
  py::class_<EnnModel, std::shared_ptr<EnnModel>>(m, "Model")
      .def_property_readonly("id", &EnnModel::id)
      .def_property_readonly("num_classes", &EnnModel::num_classes)
      .def_property_readonly("parameter_count", &EnnModel::parameter_count)
      .def("predict",
           [](const EnnModel& self, const F32& images, std::size_t n_index, std::uint64_t seed) {
             PredictionSet p;
             {
               const Tensor x = images_tensor(images);
               py::gil_scoped_release release;
               p = predict(self, x, n_index, seed);
             }
             F32 out({static_cast<py::ssize_t>(p.indices), static_cast<py::ssize_t>(p.examples),
                      static_cast<py::ssize_t>(p.classes)});
             std::memcpy(out.mutable_data(), p.logits.data(), p.logits.size() * sizeof(float));
             return out;
           },
           py::arg("images"), py::arg("n_index") = kDefaultPredictiveIndices, py::arg("seed") = 0,
           "Logits [indices, n, classes]; discrete references enumerate every index.");
  m.def("load_model", [](const std::filesystem::path& path) { return load_model(path); });
  m.def("checkpoint_metadata",
        [](const std::filesystem::path& path) { return read_checkpoint_metadata(path).dump(); },
        "Checkpoint metadata as a JSON string.");

  // --- pipeline ---
  m.def("default_config", [] { return RunConfig{}.to_json().dump(); });
  m.def("resolve_config", [](const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid JSON: ") + e.what());
    }
    RunConfig c = RunConfig::from_json(j);
    c.validate();
    return c.to_json().dump();
  });

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const std::string& config_json, const std::string& out, std::size_t jobs) {
             RunConfig c = RunConfig::from_json(nlohmann::json::parse(config_json));
             c.validate();
             return std::make_unique<Pipeline>(std::move(c), out, jobs);
           }),
           py::arg("config_json"), py::arg("out"), py::arg("jobs") = 1)
      .def("make_shifts", &Pipeline::make_shifts, py::call_guard<py::gil_scoped_release>())
      .def("train_base", &Pipeline::train_base, py::call_guard<py::gil_scoped_release>())
      .def("train_epinet", &Pipeline::train_epinet, py::call_guard<py::gil_scoped_release>())
      .def("train_ensemble", &Pipeline::train_ensemble, py::call_guard<py::gil_scoped_release>())
      .def("evaluate", &Pipeline::evaluate, py::call_guard<py::gil_scoped_release>())
      .def("tune_temp", &Pipeline::tune_temp, py::call_guard<py::gil_scoped_release>())
      .def("temp_report", &Pipeline::temp_report, py::call_guard<py::gil_scoped_release>())
      .def("run_all", &Pipeline::run_all, py::call_guard<py::gil_scoped_release>())
      .def_property_readonly("trainings_performed", &Pipeline::trainings_performed)
      .def_property_readonly("reports_dir", [](const Pipeline& p) { return p.reports_dir().string(); });
}
