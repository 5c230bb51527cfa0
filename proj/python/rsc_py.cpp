// Python bindings: benchmarks as numpy arrays, the mask operators, the
// self-check suites and single training runs.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "rsc/checks.hpp"
#include "rsc/experiment.hpp"

namespace py = pybind11;
using namespace rsc;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    py::array_t<double> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::memcpy(a.mutable_data(), t.values().data(), t.size() * sizeof(double));
    return a;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict domain_dict(const DomainDataset& d) {
    py::dict out;
    out["id"] = d.id;
    out["inputs"] = to_numpy(d.inputs);
    out["labels"] = to_numpy(d.labels);
    out["core_region"] = to_numpy(d.annotation.core);
    out["spurious_region"] = to_numpy(d.annotation.spurious);
    return out;
}

ExperimentConfig config_from(const std::vector<std::string>& overrides) {
    return load_experiment(std::nullopt, overrides, std::nullopt);
}

}  // namespace

PYBIND11_MODULE(_rsc, m) {
    m.doc() = "Representation self-challenging workbench";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

    m.def(
        "make_benchmark",
        [](const std::string& name, std::uint64_t seed, const std::vector<std::string>& overrides) {
            const ExperimentConfig cfg = config_from(overrides);
            const Benchmark b = make_benchmark(name, seed, cfg.data);
            py::list sources;
            for (const auto& s : b.sources) sources.append(domain_dict(s));
            py::dict out;
            out["sources"] = sources;
            out["target"] = domain_dict(b.target);
            out["training"] = domain_dict(b.training);
            return out;
        },
        py::arg("name"), py::arg("seed") = 0, py::arg("overrides") = std::vector<std::string>{},
        "Source, target and shuffled training domains; `overrides` are data.* assignments.");

    m.def("muted_cell_count", &muted_cell_count, py::arg("drop_percentage"), py::arg("cells"));

    m.def(
        "top_k_indices",
        [](const std::vector<double>& w, std::size_t k) { return top_k_indices(w, k); }, py::arg("weights"),
        py::arg("k"));

    m.def(
        "pooled_weights",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& g, const std::string& mode) {
            return to_numpy(pooled_weights(from_numpy(g), parse_mask_mode(mode)));
        },
        py::arg("g"), py::arg("mode"));

    m.def(
        "build_mask",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& weights, double p,
           const std::vector<std::size_t>& z_shape, const std::string& mode, const std::string& strategy,
           std::uint64_t seed) {
            Rng rng(seed);
            const Mask mask = build_mask(from_numpy(weights), p, z_shape, parse_mask_mode(mode),
                                         parse_drop_strategy(strategy), rng);
            return py::make_tuple(to_numpy(mask.values), mask.muted_count);
        },
        py::arg("weights"), py::arg("drop_percentage"), py::arg("z_shape"), py::arg("mode") = "elementwise",
        py::arg("strategy") = "top-gradient", py::arg("seed") = 0, "Returns (mask, muted cell count).");

    m.def(
        "select_batch_subset",
        [](const std::vector<double>& losses, double pct, const std::string& selection, std::uint64_t seed) {
            Rng rng(seed);
            return select_batch_subset(losses, pct, parse_batch_selection(selection), rng);
        },
        py::arg("losses"), py::arg("batch_percentage"), py::arg("selection") = "top-loss", py::arg("seed") = 0);

    m.def(
        "corollary2_residual",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& weight,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& bias,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& z,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& labels, double p, double eta) {
            return corollary2_residual(from_numpy(weight), from_numpy(bias), from_numpy(z), from_numpy(labels), p, eta);
        },
        py::arg("weight"), py::arg("bias"), py::arg("z"), py::arg("labels"), py::arg("drop_percentage"),
        py::arg("eta"));

    m.def("gradient_check", [](std::uint64_t seed, std::size_t ops, std::size_t nets) {
        const auto r = checks::gradient_check(seed, ops, nets);
        py::dict d;
        d["max_operator_error"] = r.max_operator_error;
        d["max_network_error"] = r.max_network_error;
        d["passed"] = r.passed();
        return d;
    }, py::arg("seed") = 0, py::arg("operator_instances") = 100, py::arg("network_instances") = 20);

    m.def("mask_properties", [](std::uint64_t seed, std::size_t pairs) {
        const auto r = checks::mask_properties(seed, pairs);
        py::dict d;
        d["pairs"] = r.pairs;
        d["passed"] = r.passed();
        return d;
    }, py::arg("seed") = 0, py::arg("pairs") = 1000);

    m.def(
        "run",
        [](const std::vector<std::string>& overrides, std::uint64_t seed) {
            const ExperimentConfig cfg = config_from(overrides);
            RunOutcome r;
            {
                py::gil_scoped_release release;
                r = run_single(cfg, seed, "python", std::nullopt);
            }
            py::dict d;
            d["target_accuracy"] = r.target_accuracy;
            d["target_loss"] = r.target_loss;
            d["final_gamma"] = r.final_gamma;
            d["a4_rate"] = r.a4_rate;
            d["core_probe"] = r.core_probe;
            d["spurious_probe"] = r.spurious_probe;
            d["epochs_completed"] = r.epochs_completed;
            d["diverged"] = r.diverged;
            return d;
        },
        py::arg("overrides") = std::vector<std::string>{}, py::arg("seed") = 0,
        "Trains one configuration (dotted-path overrides on the defaults) and returns its outcome.");
}
