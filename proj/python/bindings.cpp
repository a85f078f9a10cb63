#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>

#include "ressfl/defense.hpp"
#include "ressfl/error.hpp"
#include "ressfl/metrics.hpp"
#include "ressfl/runner.hpp"

namespace py = pybind11;
using namespace ressfl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.values().begin());
  return t;
}

Array to_array(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

py::dict summary_dict(const SummaryRow& s) {
  py::dict d;
  d["run"] = s.run;
  d["accuracy"] = s.accuracy;
  d["attacked"] = s.attacked;
  d["mse_l0"] = s.attacked ? py::cast(s.mse_l0) : py::none();
  d["mse_best"] = s.attacked ? py::cast(s.mse_best) : py::none();
  d["resistant"] = s.resistant;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Split federated learning with model-inversion attacks and defenses";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.attr("RESISTANCE_TARGET") = kResistanceTarget;

  m.def(
      "synth_dataset",
      [](std::size_t n, int classes, std::vector<std::size_t> shape, std::uint64_t seed) {
        const Dataset d = synth_dataset(n, classes, shape, seed);
        return py::make_tuple(to_array(d.images), d.labels);
      },
      py::arg("samples"), py::arg("num_classes") = 10, py::arg("image_shape") = std::vector<std::size_t>{1, 16, 16},
      py::arg("seed") = 0, "Images [N,C,H,W] in [0,1] and integer labels.");

  m.def("mse", [](const Array& x, const Array& y) { return mse(to_tensor(x), to_tensor(y)); });
  m.def("ssim", [](const Array& x, const Array& y) { return ssim(to_tensor(x), to_tensor(y)); });
  m.def("psnr", [](const Array& x, const Array& y) { return psnr(to_tensor(x), to_tensor(y)); });
  m.def("distance_correlation",
        [](const Array& x, const Array& a) { return distance_correlation(to_tensor(x), to_tensor(a)); });

  m.def(
      "perturb",
      [](const Array& activation, const std::string& method, double value, std::uint64_t seed) {
        const PerturbConfig cfg{parse_perturb_method(method), value};
        cfg.validate();
        if (cfg.method == PerturbMethod::kAdvNoise) throw ConfigError("advnoise needs a surrogate model");
        Rng rng(seed);
        return to_array(perturb_activation(to_tensor(activation), cfg, rng));
      },
      py::arg("activation"), py::arg("method"), py::arg("value"), py::arg("seed") = 0,
      "Laplacian, dropout or top-k perturbation of an activation batch.");

  m.def(
      "inversion_flops",
      [](const std::string& tier, std::vector<std::size_t> activation_shape, std::vector<std::size_t> image_shape,
         std::size_t base_width) {
        const Network g = build_inversion_model(parse_tier(tier), activation_shape, image_shape, base_width, 0);
        Shape in = activation_shape;
        in.insert(in.begin(), 1);
        return count_flops(g, in);
      },
      py::arg("tier"), py::arg("activation_shape"), py::arg("image_shape"), py::arg("base_width") = 8);

  m.def(
      "resolved_config",
      [](const std::string& json_text, std::optional<std::uint64_t> seed) {
        return resolved_config_json(parse_config(json_text, seed));
      },
      py::arg("json_text"), py::arg("seed") = py::none(), "Validated config with every default spelled out.");

  m.def(
      "run",
      [](const std::string& json_text, std::optional<std::string> mode, std::optional<std::string> out,
         std::optional<std::uint64_t> seed, std::size_t threads) {
        ExperimentConfig cfg = parse_config(json_text, seed);
        if (mode) cfg.mode = parse_mode(*mode);
        if (out) cfg.output_dir = *out;
        cfg.validate();
        RunReport rep;
        {
          py::gil_scoped_release release;
          rep = run_experiment(cfg, threads);
        }
        py::list rows;
        for (const auto& s : rep.summary) rows.append(summary_dict(s));
        py::dict result;
        result["mode"] = to_string(rep.mode);
        result["summary"] = rows;
        result["warnings"] = rep.warnings;
        result["output_dir"] = cfg.output_dir;
        return result;
      },
      py::arg("json_text"), py::arg("mode") = py::none(), py::arg("out") = py::none(), py::arg("seed") = py::none(),
      py::arg("threads") = 1, "Runs an experiment and returns its summary rows.");
}
