#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kd/autodiff.hpp"

namespace kd {

struct GradCheckReport {
    std::string op;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::size_t coordinates = 0;
};

template <typename T>
using ScalarFn = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

/// Plain evaluation of a scalar objective, used as the finite-difference
/// reference when it should not share code with the analytic path.
template <typename T>
using ReferenceFn = std::function<double(const std::vector<BasicTensor<T>>&)>;

struct GradCheckOptions {
    double epsilon = 1e-4;
    double tolerance = 1e-5;
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    double floor = 1e-4;
};

/// Compare the tape gradient of `f` at `point` against central finite
/// differences (f(x+e) - f(x-e)) / 2e, coordinate by coordinate.
template <typename T>
GradCheckReport grad_check(std::string name, const ScalarFn<T>& f, std::vector<BasicTensor<T>> point,
                           GradCheckOptions opt = {}, const ReferenceFn<T>& reference = {}) {
    for (auto& p : point) p.set_requires_grad(true);

    std::vector<BasicTensor<T>> analytic;
    {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        for (const auto& p : point) vars.push_back(tape.leaf(p));
        tape.backward(f(tape, vars));
        for (std::size_t i = 0; i < vars.size(); ++i) {
            const auto* g = tape.grad(vars[i]);
            analytic.push_back(g ? *g : BasicTensor<T>(point[i].shape()));
        }
    }

    auto evaluate = [&](const std::vector<BasicTensor<T>>& at) -> double {
        if (reference) return reference(at);
        Tape<T> tape;
        std::vector<Var<T>> vars;
        for (const auto& p : at) vars.push_back(tape.constant(p));
        return static_cast<double>(f(tape, vars).value()[0]);
    };

    GradCheckReport report{std::move(name), 0.0, opt.tolerance, false, 0};
    const T eps = static_cast<T>(opt.epsilon);
    for (std::size_t i = 0; i < point.size(); ++i) {
        for (std::size_t j = 0; j < point[i].size(); ++j) {
            const T saved = point[i][j];
            point[i][j] = saved + eps;
            const double up = evaluate(point);
            point[i][j] = saved - eps;
            const double down = evaluate(point);
            point[i][j] = saved;
            const double numeric = (up - down) / (2.0 * opt.epsilon);
            const double a = static_cast<double>(analytic[i][j]);
            const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
            report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
            ++report.coordinates;
        }
    }
    report.pass = report.max_rel_error <= report.tolerance;
    return report;
}

/// Every differentiable tensor op, checked in 64-bit mode on `instances`
/// seeded random points each. One report per op with the worst error seen.
std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, std::size_t instances,
                                                 double tolerance = 1e-5);

}  // namespace kd
