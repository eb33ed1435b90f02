#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kd/distill.hpp"
#include "kd/error.hpp"
#include "kd/experiment.hpp"
#include "kd/gradcheck.hpp"
#include "kd/metrics.hpp"
#include "kd/models.hpp"

namespace py = pybind11;
using namespace kd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor64 to_tensor(const Array& a) {
    if (a.ndim() != 2) throw ShapeError("expected a 2-D array of logits");
    Shape shape{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))};
    return Tensor64(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor64& t) {
    Array out({t.dim(0), t.dim(1)});
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::dict row_dict(const MetricRow& r) {
    py::dict d;
    const auto v = r.values();
    for (std::size_t i = 0; i < v.size(); ++i) d[kMetricCsvColumns[i]] = v[i];
    d["degenerate"] = r.degenerate;
    return d;
}

DistillConfig distill_config(double alpha, double temperature) {
    DistillConfig cfg;
    cfg.alpha = alpha;
    cfg.temperature = temperature;
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Knowledge distillation toolkit bindings";

    // Translators run newest first, so the base class is registered first.
    auto& base = py::register_exception<Error>(m, "KdError");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());

    m.def(
        "compute_metrics",
        [](std::uint64_t tp, std::uint64_t tn, std::uint64_t fp, std::uint64_t fn) {
            return row_dict(compute_metrics({tp, tn, fp, fn}));
        },
        py::arg("tp"), py::arg("tn"), py::arg("fp"), py::arg("fn"));
    m.def("render_metric", &render_metric);
    m.def("render_percent", &render_percent);
    m.def("param_reduction", &param_reduction, py::arg("teacher_params"), py::arg("student_params"));

    m.def(
        "softmax_temperature",
        [](const Array& logits, double t) { return to_array(softmax_temperature(to_tensor(logits), t).probs); },
        py::arg("logits"), py::arg("temperature"));
    m.def(
        "kl_divergence",
        [](const Array& ref, const Array& approx) {
            return kl_divergence({to_tensor(ref)}, {to_tensor(approx)});
        },
        py::arg("reference"), py::arg("approx"));
    m.def(
        "cross_entropy",
        [](const Array& logits, const std::vector<int>& labels) { return cross_entropy_hard(to_tensor(logits), labels); },
        py::arg("logits"), py::arg("labels"));
    m.def(
        "kd_loss",
        [](const Array& student, const Array& teacher, const std::vector<int>& labels, double alpha, double temperature) {
            return kd_loss(to_tensor(student), to_tensor(teacher), labels, distill_config(alpha, temperature));
        },
        py::arg("student_logits"), py::arg("teacher_logits"), py::arg("labels"), py::arg("alpha") = 0.9,
        py::arg("temperature") = 4.0);

    m.def(
        "param_counts",
        [](std::size_t input_side, std::size_t base_width) {
            ArchScale s;
            s.input_side = input_side;
            s.base_width = base_width;
            return py::make_tuple(count_params(build_mini_teacher(s, 2)), count_params(build_mini_student(s, 2)));
        },
        py::arg("input_side") = 32, py::arg("base_width") = 8, "(teacher, student) parameter counts");

    m.def(
        "gradcheck",
        [](std::uint64_t seed, std::size_t instances) {
            py::dict out;
            for (const auto& r : run_gradcheck_suite(seed, instances)) out[py::str(r.op)] = r.max_rel_error;
            return out;
        },
        py::arg("seed") = 1, py::arg("instances") = 5, "worst relative error per op");

    m.def(
        "synth_images",
        [](std::size_t n_per_class, std::size_t side, std::uint64_t seed) {
            const auto items = synth_images(n_per_class, side, seed);
            py::array_t<std::uint8_t> images({items.size(), side, side});
            std::vector<int> labels;
            auto* dst = images.mutable_data();
            for (const auto& it : items) {
                dst = std::copy(it.pixels.begin(), it.pixels.end(), dst);
                labels.push_back(it.label);
            }
            return py::make_tuple(images, labels);
        },
        py::arg("n_per_class"), py::arg("side") = 32, py::arg("seed") = 7);
}
