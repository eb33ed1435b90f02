#include "kd/gradcheck.hpp"

#include "kd/distill.hpp"
#include "kd/rng.hpp"

#include <array>
#include <limits>

namespace kd {

namespace {

Tensor64 random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor64 t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Values with magnitude in [0.05, 1]: relu kinks stay far from the
// finite-difference stencil.
Tensor64 away_from_zero(CounterRng& rng, Shape shape) {
    Tensor64 t(std::move(shape));
    for (auto& v : t.data()) {
        const double m = rng.uniform(0.05, 1.0);
        v = rng.below(2) ? m : -m;
    }
    return t;
}

std::vector<int> random_labels(CounterRng& rng, std::size_t n, std::size_t classes) {
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(classes));
    return labels;
}

// Weighted sum with fixed random weights turns any tensor output into a
// scalar whose gradient exercises every output coordinate.
Var<double> project(Tape<double>& tape, Var<double> y, const Tensor64& weights) {
    return ad::sum(ad::mul(y, tape.constant(weights)));
}

// Distance from the nearest non-differentiable point of the composite
// network below: relu inputs near 0 and near-tied max-pool windows.
double composite_kink_margin(const std::vector<Tensor64>& p) {
    double margin = std::numeric_limits<double>::infinity();
    const auto za = ops::conv2d(p[0], p[1], p[2], {1, 1});
    const auto zb = ops::depthwise_conv2d(p[0], p[3], p[4], {2, 1});
    for (const double z : za.data()) margin = std::min(margin, std::abs(z));
    for (const double z : zb.data()) margin = std::min(margin, std::abs(z));
    const auto a = ops::relu(za);
    for (std::size_t n = 0; n < a.dim(0); ++n) {
        for (std::size_t c = 0; c < a.dim(1); ++c) {
            for (std::size_t i = 0; i + 1 < a.dim(2); i += 2) {
                for (std::size_t j = 0; j + 1 < a.dim(3); j += 2) {
                    std::array<double, 4> w = {a.at(n, c, i, j), a.at(n, c, i, j + 1), a.at(n, c, i + 1, j),
                                               a.at(n, c, i + 1, j + 1)};
                    std::sort(w.begin(), w.end());
                    if (w[3] > 0.0) margin = std::min(margin, w[3] - w[2]);
                }
            }
        }
    }
    return margin;
}

struct Case {
    std::string name;
    // Builds the objective and point for one seeded instance.
    std::function<void(CounterRng&, ScalarFn<double>&, std::vector<Tensor64>&)> make;
    // Ops with kinks use a smaller step.
    double epsilon = 1e-4;
};

std::vector<Case> suite_cases() {
    std::vector<Case> cases;

    cases.push_back({"conv2d", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
                         point = {random_tensor(rng, {2, 2, 5, 5}), random_tensor(rng, {3, 2, 3, 3}),
                                  random_tensor(rng, {3})};
                         const auto oh = ops::conv_out_extent(5, 3, stride, pad, "h");
                         const auto w = random_tensor(rng, {2, 3, oh, oh});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::conv2d(v[0], v[1], v[2], {stride, pad}), w);
                         };
                     }});

    cases.push_back({"depthwise_conv2d", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
                         point = {random_tensor(rng, {2, 3, 5, 5}), random_tensor(rng, {3, 1, 3, 3}),
                                  random_tensor(rng, {3})};
                         const auto oh = ops::conv_out_extent(5, 3, stride, pad, "h");
                         const auto w = random_tensor(rng, {2, 3, oh, oh});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::depthwise_conv2d(v[0], v[1], v[2], {stride, pad}), w);
                         };
                     }});

    cases.push_back({"dense", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5}), random_tensor(rng, {5})};
                         const auto w = random_tensor(rng, {3, 5});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::dense(v[0], v[1], v[2]), w);
                         };
                     }});

    cases.push_back({"relu", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {away_from_zero(rng, {2, 3, 4})};
                         const auto w = random_tensor(rng, {2, 3, 4});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::relu(v[0]), w);
                         };
                     }});

    cases.push_back({"max_pool2d",
                     [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {2, 2, 4, 4})};
                         const auto w = random_tensor(rng, {2, 2, 2, 2});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::max_pool2d(v[0], 2, 2), w);
                         };
                     },
                     1e-6});

    cases.push_back({"global_avg_pool2d", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {2, 3, 3, 4})};
                         const auto w = random_tensor(rng, {2, 3});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::global_avg_pool2d(v[0]), w);
                         };
                     }});

    cases.push_back({"flatten", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {2, 2, 2, 3})};
                         const auto w = random_tensor(rng, {2, 12});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::flatten(v[0]), w);
                         };
                     }});

    cases.push_back({"concat_channels", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2, 1, 3, 3})};
                         const auto w = random_tensor(rng, {2, 3, 3, 3});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::concat_channels(v[0], v[1]), w);
                         };
                     }});

    cases.push_back({"dropout", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {4, 6})};
                         const auto w = random_tensor(rng, {4, 6});
                         const auto seed = rng.next_u64();
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::dropout(v[0], 0.5, true, seed), w);
                         };
                     }});

    cases.push_back({"log_softmax", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {3, 4}, -3.0, 3.0)};
                         const auto w = random_tensor(rng, {3, 4});
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return project(t, ad::log_softmax(v[0]), w);
                         };
                     }});

    cases.push_back({"cross_entropy", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {5, 2}, -3.0, 3.0)};
                         const auto labels = random_labels(rng, 5, 2);
                         f = [=](Tape<double>&, const std::vector<Var<double>>& v) {
                             return ad::cross_entropy(v[0], labels);
                         };
                     }});

    cases.push_back({"kl_from_log", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         point = {random_tensor(rng, {3, 3}, -2.0, 2.0), random_tensor(rng, {3, 3}, -2.0, 2.0)};
                         f = [](Tape<double>&, const std::vector<Var<double>>& v) {
                             return ad::kl_from_log(ad::log_softmax(v[0]), ad::log_softmax(v[1]));
                         };
                     }});

    cases.push_back({"kd_loss", [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         DistillConfig cfg;
                         cfg.alpha = kAlphaGrid[rng.below(kAlphaGrid.size())];
                         cfg.temperature = kTemperatureGrid[rng.below(kTemperatureGrid.size())];
                         point = {random_tensor(rng, {4, 2}, -4.0, 4.0)};
                         const auto teacher = random_tensor(rng, {4, 2}, -4.0, 4.0);
                         const auto labels = random_labels(rng, 4, 2);
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             return ad::kd_loss(v[0], t.constant(teacher), labels, cfg);
                         };
                     }});

    // A small two-branch network ending in the KD objective: every op on
    // one tape, including gradient accumulation where branches merge.
    cases.push_back({"composite",
                     [](CounterRng& rng, ScalarFn<double>& f, std::vector<Tensor64>& point) {
                         // Resample until every relu input and every max-pool
                         // winner is clear of its kink by more than any
                         // finite-difference step can move it.
                         do {
                             point = {random_tensor(rng, {2, 1, 6, 6}), random_tensor(rng, {2, 1, 3, 3}),
                                      random_tensor(rng, {2}),          random_tensor(rng, {1, 1, 3, 3}),
                                      random_tensor(rng, {1}),          random_tensor(rng, {3, 3, 1, 1}),
                                      random_tensor(rng, {3}),          random_tensor(rng, {3, 2}),
                                      random_tensor(rng, {2})};
                         } while (composite_kink_margin(point) < 1e-3);
                         const auto teacher = random_tensor(rng, {2, 2}, -3.0, 3.0);
                         const auto labels = random_labels(rng, 2, 2);
                         f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
                             const auto a = ad::max_pool2d(ad::relu(ad::conv2d(v[0], v[1], v[2], {1, 1})), 2, 2);
                             const auto b = ad::relu(ad::depthwise_conv2d(v[0], v[3], v[4], {2, 1}));
                             const auto merged = ad::conv2d(ad::concat_channels(a, b), v[5], v[6], {});
                             const auto logits = ad::dense(ad::global_avg_pool2d(merged), v[7], v[8]);
                             return ad::kd_loss(logits, t.constant(teacher), labels, DistillConfig{});
                         };
                     },
                     1e-5});

    return cases;
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, std::size_t instances, double tolerance) {
    std::vector<GradCheckReport> reports;
    const auto cases = suite_cases();
    for (std::size_t c = 0; c < cases.size(); ++c) {
        GradCheckReport worst{cases[c].name, 0.0, tolerance, true, 0};
        for (std::size_t i = 0; i < instances; ++i) {
            CounterRng rng(derive_seed(seed, {c, i}));
            ScalarFn<double> f;
            std::vector<Tensor64> point;
            cases[c].make(rng, f, point);
            GradCheckOptions opt;
            opt.epsilon = cases[c].epsilon;
            opt.tolerance = tolerance;
            const auto r = grad_check(cases[c].name, f, std::move(point), opt);
            worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
            worst.coordinates += r.coordinates;
            worst.pass = worst.pass && r.pass;
        }
        reports.push_back(std::move(worst));
    }
    return reports;
}

}  // namespace kd
