#include <algorithm>
#include <numeric>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "stdemand/evaluation.hpp"
#include "stdemand/gradcheck.hpp"

namespace py = pybind11;
using namespace stdemand;

namespace {

py::dict demand_to_dict(const DemandTensor& d) {
  py::array_t<float> values({d.n_nodes, d.n_features, d.n_steps});
  std::copy(d.values.begin(), d.values.end(), values.mutable_data());
  py::array_t<std::uint8_t> mask({d.n_nodes, d.n_steps});
  std::copy(d.mask.begin(), d.mask.end(), mask.mutable_data());
  py::dict out;
  out["values"] = values;
  out["mask"] = mask;
  out["interval_seconds"] = d.interval_seconds;
  out["t0"] = d.t0;
  return out;
}

DemandTensor demand_from_arrays(py::array_t<float, py::array::c_style | py::array::forcecast> values,
                                py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> mask,
                                std::uint32_t interval, std::int64_t t0) {
  if (values.ndim() != 3 || mask.ndim() != 2) throw ConfigError("values must be (N, d_x, T) and mask (N, T)");
  DemandTensor d(values.shape(0), values.shape(1), values.shape(2), interval, t0);
  if (mask.shape(0) != values.shape(0) || mask.shape(1) != values.shape(2)) throw ConfigError("mask shape mismatch");
  std::copy(values.data(), values.data() + values.size(), d.values.begin());
  std::copy(mask.data(), mask.data() + mask.size(), d.mask.begin());
  d.validate();
  return d;
}

py::dict rows_to_dict(const ExperimentResult& r) {
  py::dict out;
  for (const auto& row : r.rows) {
    out[py::str(row.method + "/" + row.subset)] = py::make_tuple(row.metrics.mae, row.metrics.rmse, row.metrics.count);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_stdemand, m) {
  m.doc() = "Inductive spatiotemporal demand estimation and forecasting";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("build_adjacency", &build_adjacency, py::arg("centers"), py::arg("sigma_km") = 5.0, py::arg("epsilon") = 0.1);
  m.def("build_shift", &build_shift, py::arg("adjacency"));
  m.def("functional_edges", [](const MatD& vg) { return functional_edges<double>(vg); }, py::arg("vg"));
  m.def("build_covariates", &build_covariates, py::arg("t0"), py::arg("n_steps"), py::arg("interval_seconds") = 3600);
  m.def(
      "chronological_split",
      [](std::size_t n, double train, double val, double test) {
        const auto s = chronological_split(n, {train, val, test});
        return py::make_tuple(py::make_tuple(s.train.begin, s.train.end), py::make_tuple(s.val.begin, s.val.end),
                              py::make_tuple(s.test.begin, s.test.end));
      },
      py::arg("n_steps"), py::arg("train") = 0.6, py::arg("val") = 0.2, py::arg("test") = 0.2);

  m.def(
      "read_encodings",
      [](const std::filesystem::path& path) {
        auto t = read_encodings(path);
        return py::make_tuple(t.region_ids, MatF(t.values));
      },
      py::arg("path"));
  m.def(
      "write_encodings",
      [](const std::filesystem::path& path, std::vector<std::string> ids, const MatF& values) {
        EncodingTable t{std::move(ids), values};
        t.validate();
        write_encodings(t, path);
      },
      py::arg("path"), py::arg("region_ids"), py::arg("values"));

  m.def("read_demand", [](const std::filesystem::path& path) { return demand_to_dict(read_demand(path)); },
        py::arg("path"));
  m.def(
      "write_demand",
      [](const std::filesystem::path& path, py::array_t<float, py::array::c_style | py::array::forcecast> values,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> mask, std::uint32_t interval,
         std::int64_t t0) { write_demand(demand_from_arrays(values, mask, interval, t0), path); },
      py::arg("path"), py::arg("values"), py::arg("mask"), py::arg("interval_seconds"), py::arg("t0"));

  m.def(
      "gpvar_series",
      [](const MatD& psi, const VecD& gain, const MatD& shift, std::size_t n_steps, std::uint64_t seed,
         double noise_sigma, const std::string& xi) {
        GpvarParams p{psi, gain, noise_sigma, xi == "identity" ? Nonlinearity::identity : Nonlinearity::tanh};
        return gpvar_series(p, shift, n_steps, seed);
      },
      py::arg("psi"), py::arg("gain"), py::arg("shift"), py::arg("n_steps"), py::arg("seed") = 0,
      py::arg("noise_sigma") = 0.1, py::arg("xi") = "tanh");

  m.def(
      "synth_city",
      [](std::size_t n_nodes, std::uint64_t seed, const std::filesystem::path& out, std::size_t n_steps,
         std::size_t encoding_dim) {
        CityOptions opt;
        opt.n_steps = n_steps;
        opt.encoding_dim = encoding_dim;
        const auto city = make_city(n_nodes, seed, opt);
        city.dataset().save(out);
        return VecD(city.params.gain);
      },
      py::arg("n_nodes"), py::arg("seed"), py::arg("out"), py::arg("n_steps") = 2000, py::arg("encoding_dim") = 64,
      "Writes a synthetic city directory and returns the true node gains.");

  m.def(
      "compute_metrics",
      [](const MatD& pred, const MatD& target, const MatD& observed, std::vector<std::size_t> rows) {
        const auto r = compute_metrics(pred, target, observed, rows);
        return py::make_tuple(r.mae, r.rmse);
      },
      py::arg("pred"), py::arg("target"), py::arg("observed"), py::arg("rows"));

  m.def(
      "gradient_check",
      [](std::uint64_t seed, double step) {
        py::dict out;
        for (const auto& c : gradient_check(make_micro_instance(seed), step)) out[py::str(c.name)] = c.max_rel_error;
        return out;
      },
      py::arg("seed") = 7, py::arg("step") = 1e-4);

  m.def(
      "run_joint",
      [](const std::filesystem::path& data_dir, std::size_t n_new, std::size_t epochs, std::uint64_t seed,
         bool use_encoding, std::optional<std::filesystem::path> checkpoint) {
        const auto data = Dataset::load(data_dir);
        ExperimentSpec spec;
        spec.n_new_regions = n_new;
        spec.seed = seed;
        spec.train.seed = seed;
        spec.train.epochs = epochs;
        spec.model.use_encoding = use_encoding;
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_joint(data, spec);
        }
        if (checkpoint) r.model->save(*checkpoint);
        py::dict out;
        out["metrics"] = rows_to_dict(r);
        out["new_regions"] = r.new_region_ids;
        std::vector<double> val;
        for (const auto& e : r.log) val.push_back(e.val_mae);
        out["val_mae"] = val;
        return out;
      },
      py::arg("data_dir"), py::arg("n_new") = 0, py::arg("epochs") = 50, py::arg("seed") = 0,
      py::arg("use_encoding") = true, py::arg("checkpoint") = std::nullopt);

  m.def(
      "forecast",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir, std::size_t start,
         std::vector<std::string> hidden_ids) {
        const auto bundle = ModelBundle::load(checkpoint);
        const auto data = Dataset::load(data_dir);
        std::vector<std::size_t> all(data.n_nodes());
        std::iota(all.begin(), all.end(), std::size_t{0});
        WindowSource<float> source(data, all, bundle.scaler, bundle.config.window, bundle.config.horizon);
        std::vector<int> hidden;
        for (auto i : data.indices_of(hidden_ids)) hidden.push_back(static_cast<int>(i));
        std::sort(hidden.begin(), hidden.end());
        const auto window = source.make(start, hidden);
        const auto out = forward(bundle.params, bundle.config, window.input, source.graph_context(bundle.config.neighbor_order));
        MatD pred = out.pred.cast<double>();
        for (Eigen::Index i = 0; i < pred.size(); ++i) pred.data()[i] = bundle.scaler.inverse(pred.data()[i]);
        return pred;
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("start"), py::arg("hidden_ids") = std::vector<std::string>{},
      "Forecast in original units, N x (H * d_x), for the window whose horizon starts at `start`.");
}
