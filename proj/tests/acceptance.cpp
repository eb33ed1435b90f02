// Acceptance driver: `kd_acceptance --criterion N --kd <path> --workdir <dir>`
// prints exactly one "PASS criterion N: ..." or "FAIL criterion N: ..." line
// (plus indented diagnostics) and exits 0 or 1 accordingly.

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "kd/experiment.hpp"
#include "kd/gradcheck.hpp"

using namespace kd;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        notes.push_back(fmt::format("  [{}] {}", ok ? "ok" : "FAIL", what));
        pass = pass && ok;
    }
    void note(const std::string& what) { notes.push_back("  " + what); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_shell(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

MetricRow row(std::array<double, 6> v) { return MetricRow::from_values(v); }

std::string render_row(const MetricRow& r) {
    std::string s;
    for (double v : r.values()) s += (s.empty() ? "" : " ") + render_metric(v);
    return s;
}

// ---- 1: table fixtures ------------------------------------------------------

void criterion1(Verdict& v) {
    // Per-fold rows (Acc, Precision, Specificity, Recall, F1, Balanced-Acc).
    const std::vector<MetricRow> table1 = {
        row({0.978, 0.978, 0.978, 0.978, 0.978, 0.978}), row({0.989, 0.978, 1.000, 1.000, 0.988, 1.000}),
        row({1.000, 1.000, 1.000, 1.000, 1.000, 1.000}), row({0.989, 0.978, 1.000, 1.000, 0.988, 1.000}),
        row({1.000, 1.000, 1.000, 1.000, 1.000, 1.000})};
    const std::vector<MetricRow> table2 = {
        row({0.987, 0.978, 1.000, 1.000, 0.992, 1.000}), row({0.974, 0.976, 0.976, 0.976, 0.972, 0.976}),
        row({0.974, 0.976, 0.976, 0.976, 0.972, 0.976}), row({0.987, 0.978, 1.000, 1.000, 0.992, 1.000}),
        row({0.987, 0.978, 1.000, 1.000, 0.992, 1.000})};
    const std::vector<MetricRow> table3 = {
        row({0.974, 0.976, 0.976, 0.976, 0.972, 0.976}), row({1.000, 1.000, 1.000, 1.000, 1.000, 1.000}),
        row({0.978, 0.978, 1.000, 1.000, 0.992, 1.000}), row({1.000, 1.000, 1.000, 1.000, 1.000, 1.000}),
        row({0.989, 0.978, 1.000, 1.000, 0.988, 1.000})};
    // Printed Average rows of the before/after student tables.
    const auto printed2 = row({0.980, 0.977, 0.990, 0.990, 0.984, 0.990});
    const auto printed3 = row({0.988, 0.987, 0.996, 0.996, 0.991, 0.996});

    const auto avg1 = fold_average(table1);
    const auto avg3 = fold_average(table3);
    v.check(render_metric(avg1.accuracy) == "0.992",
            fmt::format("table 1 average accuracy: mean {:.4f} renders {}, printed 0.992", avg1.accuracy,
                        render_metric(avg1.accuracy)));
    v.check(render_metric(avg3.accuracy) == "0.988",
            fmt::format("table 3 average accuracy: mean {:.4f} renders {}, printed 0.988", avg3.accuracy,
                        render_metric(avg3.accuracy)));

    const std::array<const char*, 6> expect = {"0.8 %", "1.0 %", "0.6 %", "0.6 %", "0.7 %", "0.6 %"};
    const auto imp = improvement_row(printed2, printed3);
    std::string got;
    bool all = true;
    for (std::size_t i = 0; i < 6; ++i) {
        got += (i ? ", " : "") + render_percent(imp.points[i]);
        all = all && render_percent(imp.points[i]) == expect[i];
    }
    v.check(all, "%Improvement from the printed average rows: " + got);

    v.note("diagnostic: table 1 full average row " + render_row(avg1) + " (printed 0.992 0.987 0.996 0.996 0.991 0.996)");
    v.note("diagnostic: table 3 full average row " + render_row(avg3) + " (printed 0.988 0.987 0.996 0.996 0.991 0.996)");
    const auto fold_imp = improvement_row(fold_average(table2), avg3);
    std::string fi;
    for (std::size_t i = 0; i < 6; ++i) fi += (i ? ", " : "") + render_percent(fold_imp.points[i]);
    v.note("diagnostic: %Improvement from per-fold means instead: " + fi);
}

// ---- 2: gradient suite --------------------------------------------------------

// Plain 64-bit KD objective with the T² factor, written independently of the
// tape: alpha·KL(q‖p)·T² + (1−alpha)·CE over a batch of 2-class rows.
double reference_kd(const Tensor64& s, const Tensor64& t, std::span<const int> labels, double alpha, double temp) {
    const std::size_t n = s.dim(0), k = s.dim(1);
    double kl = 0, ce = 0;
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> p(k), q(k), hard(k);
        double zp = 0, zq = 0, zh = 0;
        for (std::size_t c = 0; c < k; ++c) {
            p[c] = std::exp(s[r * k + c] / temp);
            q[c] = std::exp(t[r * k + c] / temp);
            hard[c] = std::exp(s[r * k + c]);
            zp += p[c];
            zq += q[c];
            zh += hard[c];
        }
        for (std::size_t c = 0; c < k; ++c) kl += q[c] / zq * std::log((q[c] / zq) / (p[c] / zp));
        ce -= std::log(hard[static_cast<std::size_t>(labels[r])] / zh);
    }
    return alpha * kl / static_cast<double>(n) * temp * temp + (1 - alpha) * ce / static_cast<double>(n);
}

void criterion2(Verdict& v) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto reports = run_gradcheck_suite(1, 100);
    const double elapsed = seconds_since(t0);
    double worst = 0;
    for (const auto& r : reports) {
        v.note(fmt::format("{:<20} max rel error {:.3e}", r.op, r.max_rel_error));
        v.check(r.max_rel_error < 1e-5, r.op + " under 1e-5 over 100 instances");
        worst = std::max(worst, r.max_rel_error);
    }
    v.check(elapsed < 60.0, fmt::format("suite runtime {:.2f} s < 60 s", elapsed));

    // Mutation: drop T² from the KD objective and check against the reference.
    const double alpha = 0.9, temp = 4.0;
    const std::vector<int> labels = {0, 1, 1, 0};
    bool mutant_caught = true, correct_passes = true;
    double mutant_err = 1e300, correct_err = 0;
    for (std::uint64_t inst = 0; inst < 20; ++inst) {
        CounterRng rng(derive_seed(99, {inst}));
        Tensor64 s({4, 2}), t({4, 2});
        for (auto& x : s.data()) x = rng.uniform(-3, 3);
        for (auto& x : t.data()) x = rng.uniform(-3, 3);
        ReferenceFn<double> ref = [&](const std::vector<Tensor64>& p) {
            return reference_kd(p[0], t, labels, alpha, temp);
        };
        ScalarFn<double> correct = [&](Tape<double>& tape, const std::vector<Var<double>>& vars) {
            return ad::kd_loss(vars[0], tape.constant(t), labels, DistillConfig{alpha, temp});
        };
        ScalarFn<double> mutant = [&](Tape<double>& tape, const std::vector<Var<double>>& vars) {
            const auto tv = tape.constant(t);
            const auto inv = 1.0 / temp;
            const auto kl = ad::kl_from_log(ad::log_softmax(ad::scale(tv, inv)), ad::log_softmax(ad::scale(vars[0], inv)));
            return ad::add(ad::scale(kl, alpha), ad::scale(ad::cross_entropy(vars[0], labels), 1 - alpha));
        };
        const auto rc = grad_check<double>("kd_loss", correct, {s}, {}, ref);
        const auto rm = grad_check<double>("kd_loss without T^2", mutant, {s}, {}, ref);
        correct_passes = correct_passes && rc.max_rel_error < 1e-5;
        mutant_caught = mutant_caught && rm.max_rel_error >= 1e-5;
        correct_err = std::max(correct_err, rc.max_rel_error);
        mutant_err = std::min(mutant_err, rm.max_rel_error);
    }
    v.check(correct_passes, fmt::format("kd_loss vs independent reference at T=4: worst {:.3e}", correct_err));
    v.check(mutant_caught, fmt::format("T^2-free mutant rejected at T=4: smallest error {:.3e}", mutant_err));
}

// ---- 3: KD-loss oracle --------------------------------------------------------

void criterion3(Verdict& v) {
    auto r = [](std::vector<double> x) {
        const std::size_t k = x.size();
        return Tensor64({1, k}, std::move(x));
    };
    const std::vector<int> lab0{0};
    const double identity = kd_loss(r({1.3, -0.7}), r({1.3, -0.7}), lab0, {1.0, 4.0});
    v.check(std::abs(identity) < 1e-3, fmt::format("identity, alpha=1: {:.6f} (expect 0)", identity));
    const double ce = cross_entropy_hard(r({1.3, -0.7}), lab0);
    const double reduced = kd_loss(r({1.3, -0.7}), r({-2.0, 2.0}), lab0, {0.0, 4.0});
    v.check(std::abs(reduced - ce) < 1e-3, fmt::format("alpha=0: {:.6f} vs cross-entropy {:.6f}", reduced, ce));
    const double derived = kd_loss(r({1, 0}), r({2, 0}), lab0, {0.5, 2.0});
    v.check(std::abs(derived - 0.2094) < 1e-3, fmt::format("derived case: {:.6f} (expect 0.2094 +- 1e-3; "
                                                           "high-precision oracle 0.209320)",
                                                           derived));

    const auto p = softmax_temperature(r({2, 0}), 2.0).probs;
    v.check(std::abs(p[0] - 0.7311) < 1e-4 && std::abs(p[1] - 0.2689) < 1e-4,
            fmt::format("softmax([2,0], T=2) = [{:.4f}, {:.4f}]", p[0], p[1]));
    const auto u = softmax_temperature(r({0, 0, 0}), 3.0).probs;
    v.check(std::abs(u[0] - 1.0 / 3) < 1e-4 && std::abs(u[2] - 1.0 / 3) < 1e-4, "softmax([0,0,0]) uniform");
    bool argmax = true;
    for (double t : {0.5, 1.0, 10.0}) {
        const auto q = softmax_temperature(r({3, 1, -2}), t).probs;
        argmax = argmax && q[0] > q[1] && q[0] > q[2];
    }
    v.check(argmax, "softmax([3,1,-2]) argmax 0 at T in {0.5, 1, 10}");
    const double kl1 = kl_divergence({r({0.5, 0.5})}, {r({0.9, 0.1})});
    const double kl2 = kl_divergence({r({0.9, 0.1})}, {r({0.5, 0.5})});
    v.check(std::abs(kl1 - 0.5108) < 1e-4, fmt::format("KL([.5,.5]||[.9,.1]) = {:.4f}", kl1));
    v.check(std::abs(kl2 - 0.3681) < 1e-4, fmt::format("KL([.9,.1]||[.5,.5]) = {:.4f}", kl2));
    v.check(kl_divergence({r({0.2, 0.8})}, {r({0.2, 0.8})}) == 0.0, "KL identity = 0");
}

// ---- 4: metrics oracle --------------------------------------------------------

void criterion4(Verdict& v) {
    CounterRng rng(4);
    double worst = 0;
    std::size_t degenerate = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(300);
        std::vector<std::pair<int, int>> pairs;  // (predicted, actual)
        for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2)));
        std::vector<int> pred, truth;
        for (auto [p, a] : pairs) {
            pred.push_back(p);
            truth.push_back(a);
        }
        const auto row = compute_metrics(tally(pred, truth));
        degenerate += row.degenerate;

        // Oracle: shuffle the pairs, then count each metric's numerator and
        // denominator straight from its definition.
        rng.shuffle(std::span(pairs));
        double correct = 0, pred_pos = 0, true_pos = 0, actual_pos = 0, actual_neg = 0, true_neg = 0;
        for (auto [p, a] : pairs) {
            correct += p == a;
            pred_pos += p == 1;
            actual_pos += a == 1;
            actual_neg += a == 0;
            true_pos += p == 1 && a == 1;
            true_neg += p == 0 && a == 0;
        }
        auto div = [](double a, double b) { return b == 0 ? 0.0 : a / b; };
        const double precision = div(true_pos, pred_pos), recall = div(true_pos, actual_pos);
        const double specificity = div(true_neg, actual_neg);
        const std::array<double, 6> oracle = {correct / static_cast<double>(n), precision, specificity, recall,
                                              div(2 * precision * recall, precision + recall),
                                              (specificity + recall) / 2};
        for (std::size_t i = 0; i < 6; ++i) worst = std::max(worst, std::abs(oracle[i] - row.values()[i]));
    }
    v.check(worst <= 1e-12, fmt::format("1000 random instances, max |diff| vs recount oracle {:.2e} ({} degenerate)",
                                        worst, degenerate));

    const auto d = compute_metrics({8, 9, 2, 1});
    const std::array<double, 6> expect = {0.8500, 0.8000, 0.8182, 0.8889, 0.8421, 0.8535};
    bool ok = true;
    std::string got;
    for (std::size_t i = 0; i < 6; ++i) {
        const auto cell = fmt::format("{:.4f}", d.values()[i]);
        got += (i ? " " : "") + cell;
        ok = ok && cell == fmt::format("{:.4f}", expect[i]);
    }
    v.check(ok, "TP=8 FP=2 FN=1 TN=9 -> acc/prec/spec/rec/f1/bal " + got);
}

// ---- 5: parameter accounting ----------------------------------------------------

void criterion5(Verdict& v) {
    const auto text = render_percent(param_reduction(49'222'390, 2'334'966));
    v.check(text == "-95.3 %", "param_reduction(49,222,390, 2,334,966) = " + text);
    const auto t = count_params(build_mini_teacher({}, 2));
    const auto s = count_params(build_mini_student({}, 2));
    const double ratio = static_cast<double>(s) / static_cast<double>(t);
    v.check(ratio < 0.10, fmt::format("default scale: student {} / teacher {} = {:.4f} < 0.10 ({})", s, t, ratio,
                                      render_percent(param_reduction(t, s))));
}

// ---- 6: end-to-end desk-scale distillation ----------------------------------------

double mean_accuracy(const fs::path& metrics_json) {
    return nlohmann::json::parse(slurp(metrics_json))["average"]["acc"].get<double>();
}

void criterion6(Verdict& v, const std::string& kd, const fs::path& work) {
    const auto dir = work / "criterion6";
    fs::remove_all(dir);
    fs::create_directories(dir);
    // Desk-scale learning rates; everything else is the default config.
    std::ofstream(dir / "kd.conf") << "dataset.path = synth.kdds\n"
                                      "synth.n_per_class = 1000\nsynth.side = 32\nsynth.seed = 7\n"
                                      "teacher.learning_rate = 0.001\nteacher.epochs = 8\n"
                                      "student.learning_rate = 0.003\nstudent.epochs = 8\n";
    const auto t0 = std::chrono::steady_clock::now();
    const auto conf = (dir / "kd.conf").string();
    if (run_shell(kd + " synth --config " + conf + " > /dev/null") != 0) {
        v.check(false, "kd synth failed");
        return;
    }
    double sum_base = 0, sum_dist = 0;
    int wins = 0;
    const std::vector<int> seeds = {1, 2, 3, 4, 5};
    for (int seed : seeds) {
        const auto out = dir / fmt::format("seed{}", seed);
        const int code = run_shell(fmt::format("KD_LOG=error {} crossval --config {} --seed {} --out {} --parallel 1 > /dev/null",
                                               kd, conf, seed, out.string()));
        if (code != 0) {
            v.check(false, fmt::format("seed {}: kd crossval exited {}", seed, code));
            return;
        }
        const double teacher = mean_accuracy(out / "teacher" / "metrics.json");
        const double base = mean_accuracy(out / "student" / "metrics.json");
        const double dist = mean_accuracy(out / "distilled" / "metrics.json");
        v.check(teacher >= 0.95, fmt::format("seed {}: teacher mean 5-fold accuracy {:.4f} >= 0.95", seed, teacher));
        v.note(fmt::format("seed {}: baseline student {:.4f}, distilled student {:.4f}", seed, base, dist));
        sum_base += base;
        sum_dist += dist;
        wins += dist >= base;
    }
    const double n = static_cast<double>(seeds.size());
    v.check(sum_dist / n >= sum_base / n - 0.005,
            fmt::format("mean over seeds: distilled {:.4f} >= baseline {:.4f} - 0.005", sum_dist / n, sum_base / n));
    v.check(wins >= 3, fmt::format("distilled >= baseline in {} of 5 seeds (need 3)", wins));
    const double elapsed = seconds_since(t0);
    v.check(elapsed < 1800.0, fmt::format("total runtime {:.0f} s < 1800 s", elapsed));
}

// ---- 7: pipeline invariants -------------------------------------------------------

void criterion7(Verdict& v) {
    CounterRng rng(7);
    std::size_t violations = 0, folds_checked = 0;
    std::string first;
    auto fail = [&](const std::string& what) {
        if (violations++ == 0) first = what;
    };
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 2 + rng.below(5);
        const std::size_t min_class = 2 * k + 2;
        const std::size_t n = 2 * min_class + rng.below(400);
        const double ratio = rng.uniform(0.05, 0.95);
        std::size_t pos = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n)));
        pos = std::clamp(pos, min_class, n - min_class);
        std::vector<int> labels(n, 0);
        std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(pos), 1);
        rng.shuffle(std::span(labels));
        const std::uint64_t seed = rng.next_u64();
        const double fraction = rng.uniform(0.6, 0.9);

        const auto split = split_holdout(labels, fraction, seed);
        std::set<std::size_t> train(split.train.begin(), split.train.end()), test(split.test.begin(), split.test.end());
        if (train.size() != split.train.size() || test.size() != split.test.size()) fail("split has duplicates");
        for (auto i : test) {
            if (train.count(i)) fail("split not disjoint");
        }
        if (train.size() + test.size() != n) fail("split not exhaustive");
        for (int c = 0; c < 2; ++c) {
            const auto nc = static_cast<double>(std::count(labels.begin(), labels.end(), c));
            const auto tc = static_cast<double>(
                std::count_if(split.test.begin(), split.test.end(), [&](std::size_t i) { return labels[i] == c; }));
            if (std::abs(tc - nc * (1 - fraction)) > 1.0) fail(fmt::format("class {} holdout share off by > 1", c));
        }

        const auto plan = make_stratified_folds(labels, split.train, k, seed + 1);
        std::set<std::size_t> seen;
        std::size_t lo = n, hi = 0;
        std::array<std::size_t, 2> clo{n, n}, chi{0, 0};
        for (const auto& f : plan.folds) {
            lo = std::min(lo, f.size());
            hi = std::max(hi, f.size());
            std::array<std::size_t, 2> cc{0, 0};
            for (auto i : f) {
                if (!seen.insert(i).second) fail("folds overlap");
                if (test.count(i)) fail("holdout index in a fold");
                ++cc[static_cast<std::size_t>(labels[i])];
            }
            for (int c = 0; c < 2; ++c) {
                clo[c] = std::min(clo[c], cc[c]);
                chi[c] = std::max(chi[c], cc[c]);
            }
        }
        if (plan.folds.size() != k) fail("wrong fold count");
        if (seen != train) fail("folds do not cover the training portion");
        if (hi - lo > 1) fail("fold sizes differ by more than 1");
        if (chi[0] - clo[0] > 1 || chi[1] - clo[1] > 1) fail("fold class counts differ by more than 1");

        for (std::size_t f = 0; f < k; ++f) {
            ++folds_checked;
            const auto training = plan.training_indices(f);
            const auto os = oversample_balance(labels, training, seed + 2 + f);
            std::array<std::size_t, 2> counts{0, 0};
            std::array<std::set<std::size_t>, 2> members, original;
            for (auto i : training) original[static_cast<std::size_t>(labels[i])].insert(i);
            for (auto i : os) {
                ++counts[static_cast<std::size_t>(labels[i])];
                members[static_cast<std::size_t>(labels[i])].insert(i);
            }
            if (counts[0] != counts[1]) fail("oversampled classes unequal");
            if (members != original) fail("oversampling changed the class member sets");
            const std::set<std::size_t> validation(plan.folds[f].begin(), plan.folds[f].end());
            for (auto i : os) {
                if (validation.count(i) || test.count(i)) fail("leakage: held-out index in oversampled multiset");
            }
            try {
                assert_no_leakage(os, plan.folds[f]);
                assert_no_leakage(os, split.test);
            } catch (const DataError&) {
                fail("assert_no_leakage fired");
            }
            if (oversample_balance(labels, training, seed + 2 + f) != os) fail("oversampling not deterministic");
        }
        if (split_holdout(labels, fraction, seed).test != split.test) fail("split not deterministic");
    }
    v.check(violations == 0, fmt::format("1000 random (N, ratio, k, seed) trials, {} folds: {} violations{}",
                                         folds_checked, violations, first.empty() ? "" : " (first: " + first + ")"));

    // The guard itself must fire when a validation index slips in.
    bool fired = false;
    const std::vector<std::size_t> leaky{1, 2, 3}, val{3, 4};
    try {
        assert_no_leakage(leaky, val);
    } catch (const DataError&) {
        fired = true;
    }
    v.check(fired, "leakage guard rejects a training multiset containing a validation index");
}

// ---- 8: reproducibility -------------------------------------------------------------

void criterion8(Verdict& v, const std::string& kd, const fs::path& work) {
    const auto dir = work / "criterion8";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "kd.conf") << "dataset.path = small.kdds\n"
                                      "synth.n_per_class = 40\nsynth.side = 16\nsynth.seed = 3\n"
                                      "arch.input_side = 16\n"
                                      "teacher.learning_rate = 0.001\nteacher.epochs = 2\n"
                                      "student.learning_rate = 0.003\nstudent.epochs = 2\n";
    const auto conf = (dir / "kd.conf").string();
    if (run_shell(kd + " synth --config " + conf + " > /dev/null") != 0) {
        v.check(false, "kd synth failed");
        return;
    }
    for (const char* run : {"a", "b"}) {
        const int code = run_shell(fmt::format("KD_LOG=error {} crossval --config {} --seed 11 --parallel 1 --out {} > /dev/null",
                                               kd, conf, (dir / run).string()));
        if (code != 0) {
            v.check(false, fmt::format("run {}: kd crossval exited {}", run, code));
            return;
        }
    }
    std::size_t csvs = 0, checkpoints = 0, differing = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
        const auto ext = entry.path().extension();
        if (ext != ".csv" && ext != ".kdck") continue;
        const auto rel = fs::relative(entry.path(), dir / "a");
        const bool same = slurp(entry.path()) == slurp(dir / "b" / rel);
        if (!same) {
            ++differing;
            v.note("differs: " + rel.string());
        }
        (ext == ".csv" ? csvs : checkpoints) += 1;
    }
    v.check(csvs >= 6 && checkpoints == 15 && differing == 0,
            fmt::format("{} metric CSVs and {} checkpoints compared across two runs, {} differ", csvs, checkpoints,
                        differing));

    std::size_t roundtrips = 0, bad = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
        if (entry.path().extension() != ".kdck") continue;
        const auto ck = load_checkpoint(entry.path());
        const auto again = dir / "roundtrip.kdck";
        save_checkpoint(ck.model, again, ck.config_hash, ck.seed);
        bad += slurp(again) != slurp(entry.path());
        ++roundtrips;
    }
    v.check(roundtrips > 0 && bad == 0, fmt::format("load/save round-trip bitwise on {} checkpoints", roundtrips));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kd acceptance checks"};
    int criterion = 0;
    std::string kd = "kd";
    std::string workdir = "acceptance_work";
    app.add_option("--criterion", criterion, "criterion number")->required()->check(CLI::Range(1, 8));
    app.add_option("--kd", kd, "path to the kd executable");
    app.add_option("--workdir", workdir, "scratch directory");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::warn);

    static const std::array<const char*, 9> titles = {"",
                                                      "table fixtures reproduce printed averages",
                                                      "gradient suite",
                                                      "KD-loss oracle",
                                                      "metrics oracle",
                                                      "parameter accounting",
                                                      "end-to-end desk-scale distillation",
                                                      "pipeline invariants",
                                                      "reproducibility"};
    Verdict v;
    try {
        fs::create_directories(workdir);
        switch (criterion) {
            case 1: criterion1(v); break;
            case 2: criterion2(v); break;
            case 3: criterion3(v); break;
            case 4: criterion4(v); break;
            case 5: criterion5(v); break;
            case 6: criterion6(v, kd, workdir); break;
            case 7: criterion7(v); break;
            case 8: criterion8(v, kd, workdir); break;
        }
    } catch (const std::exception& e) {
        v.check(false, std::string("exception: ") + e.what());
    }
    fmt::print("{} criterion {}: {}\n", v.pass ? "PASS" : "FAIL", criterion, titles[static_cast<std::size_t>(criterion)]);
    for (const auto& n : v.notes) fmt::print("{}\n", n);
    return v.pass ? 0 : 1;
}
