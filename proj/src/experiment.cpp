#include "kd/experiment.hpp"

#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "kd/gradcheck.hpp"

namespace kd {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kFoldStream = 0x464f;
constexpr std::uint64_t kOversampleStream = 0x4f53;
constexpr std::uint64_t kPrebalanceStream = 0x5042;
constexpr std::uint64_t kInitStream = 0x494e;
constexpr std::uint64_t kTrainStream = 0x5452;
// Index of the full-pool run in the seed tags, after the fold indices.
constexpr std::uint64_t kSingleRun = 0xffff;

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

fs::path stage_dir(const ExperimentConfig& cfg, Stage s) { return cfg.out / to_string(s); }
fs::path fold_checkpoint(const ExperimentConfig& cfg, Stage s, std::size_t f) {
    return stage_dir(cfg, s) / fmt::format("fold{}.kdck", f + 1);
}

// Student and distilled runs share initial weights and batch order, so the
// only difference between them is the loss.
std::uint64_t model_tag(Stage s) { return s == Stage::teacher ? 0 : 1; }

struct RunSeeds {
    std::uint64_t init = 0;
    std::uint64_t train = 0;
    std::uint64_t oversample = 0;
};

RunSeeds seeds_for(const ExperimentConfig& cfg, Stage s, std::uint64_t run) {
    return {derive_seed(cfg.seed, {kInitStream, model_tag(s), run}),
            derive_seed(cfg.seed, {kTrainStream, model_tag(s), run}),
            derive_seed(cfg.effective_split_seed(), {kOversampleStream, run})};
}

std::string stage_title(Stage s, const char* split) {
    switch (s) {
        case Stage::teacher: return fmt::format("Teacher model ({})", split);
        case Stage::student: return fmt::format("Student model before knowledge distillation ({})", split);
        case Stage::distilled: return fmt::format("Student model after knowledge distillation ({})", split);
    }
    return {};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ExitCode::data, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ExitCode::data, "write failed for " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrerequisiteError("missing " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

json config_json(const ExperimentConfig& cfg) {
    json j = json::object();
    for (const auto& [k, v] : config_entries(cfg)) j[k] = v;
    return j;
}

json counts_json(const ConfusionCounts& c) { return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}}; }

json distill_json(const DistillConfig& d) {
    return {{"alpha", d.alpha},
            {"temperature", d.temperature},
            {"kl_direction", d.kl_direction == KlDirection::teacher_reference ? "teacher" : "student"}};
}

ModelGraph fresh_model(const ExperimentConfig& cfg, Stage s, std::uint64_t init_seed) {
    auto model = s == Stage::teacher ? build_mini_teacher(cfg.arch, 2) : build_mini_student(cfg.arch, 2);
    model.initialize(init_seed);
    return model;
}

ModelGraph load_teacher(const ExperimentConfig& cfg, const fs::path& path) {
    Checkpoint ck = [&] {
        try {
            return load_checkpoint(path, config_hash(cfg, Stage::teacher));
        } catch (const PrerequisiteError&) {
            throw PrerequisiteError("teacher checkpoint required: " + path.string() +
                                    " (train the teacher stage first)");
        }
    }();
    if (ck.model.kind() != ModelKind::teacher) throw DataError(path.string() + " does not hold a teacher model");
    ck.model.set_trainable(false);
    return std::move(ck.model);
}

struct FoldOutput {
    ModelGraph model;
    RunSeeds seeds;
    ConfusionCounts validation;
    ConfusionCounts holdout;
    std::size_t train_size = 0;
    std::vector<double> loss;
};

// Oversample (unless the data came pre-balanced), train, and check the
// leakage guard against every index set the model will be scored on.
FoldOutput train_and_score(const ExperimentConfig& cfg, const ExperimentData& ed, Stage stage,
                           std::span<const std::size_t> train, std::span<const std::size_t> validation,
                           std::uint64_t run, const DistillConfig& dcfg, const ModelGraph* teacher) {
    const auto seeds = seeds_for(cfg, stage, run);
    const auto& labels = ed.data.labels;
    auto multiset = ed.prebalanced ? std::vector<std::size_t>(train.begin(), train.end())
                                   : oversample_balance(labels, train, seeds.oversample);
    assert_no_leakage(multiset, validation);
    assert_no_leakage(multiset, ed.plan.holdout);

    FoldOutput out{fresh_model(cfg, stage, seeds.init), seeds, {}, {}, multiset.size(), {}};
    auto tcfg = stage == Stage::teacher ? cfg.teacher_train : cfg.student_train;
    tcfg.seed = seeds.train;
    const AugmentConfig* augment = cfg.augment ? &cfg.augment_cfg : nullptr;
    if (stage == Stage::distilled) {
        const auto before = param_hash(*teacher);
        out.loss = train_distill(*teacher, out.model, ed.data, multiset, dcfg, tcfg, augment).loss_history;
        if (param_hash(*teacher) != before) throw Error(ExitCode::numeric, "teacher weights changed during distillation");
    } else {
        out.loss = train_supervised(out.model, ed.data, multiset, tcfg, augment).loss_history;
    }
    if (!validation.empty()) out.validation = evaluate_model(out.model, ed.data, validation);
    out.holdout = evaluate_model(out.model, ed.data, ed.plan.holdout);
    return out;
}

template <typename F>
void for_each_fold(std::size_t k, std::size_t parallel, F&& fn) {
    if (parallel <= 1) {
        for (std::size_t f = 0; f < k; ++f) fn(f);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(k);
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < std::min(parallel, k); ++t) {
        workers.emplace_back([&] {
            for (std::size_t f; (f = next.fetch_add(1)) < k;) {
                try {
                    fn(f);
                } catch (...) {
                    errors[f] = std::current_exception();
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

std::vector<std::optional<FoldOutput>> run_folds(const ExperimentConfig& cfg, const ExperimentData& ed, Stage stage,
                                                 const DistillConfig& dcfg, std::size_t parallel) {
    const auto k = ed.plan.k;
    std::vector<std::optional<ModelGraph>> teachers(k);
    if (stage == Stage::distilled) {
        for (std::size_t f = 0; f < k; ++f) teachers[f] = load_teacher(cfg, fold_checkpoint(cfg, Stage::teacher, f));
    }
    std::vector<std::optional<FoldOutput>> outputs(k);
    for_each_fold(k, parallel, [&](std::size_t f) {
        const auto train = ed.plan.training_indices(f);
        outputs[f] = train_and_score(cfg, ed, stage, train, ed.plan.folds[f], f, dcfg,
                                     teachers[f] ? &*teachers[f] : nullptr);
        spdlog::info("{} fold {}/{}: validation acc {:.4f}, holdout acc {:.4f}", to_string(stage), f + 1, k,
                     compute_metrics(outputs[f]->validation).accuracy, compute_metrics(outputs[f]->holdout).accuracy);
    });
    return outputs;
}

double mean_accuracy(const std::vector<std::optional<FoldOutput>>& outputs) {
    double sum = 0.0;
    for (const auto& o : outputs) sum += compute_metrics(o->validation).accuracy;
    return sum / static_cast<double>(outputs.size());
}

FoldReport report_from_json(const json& j) {
    std::vector<MetricRow> rows;
    for (const auto& f : j.at("folds")) {
        std::array<double, 6> v{};
        for (std::size_t i = 0; i < 6; ++i) v[i] = f.at(kMetricCsvColumns[i]).get<double>();
        auto row = MetricRow::from_values(v);
        row.degenerate = f.value("degenerate", false);
        rows.push_back(row);
    }
    return make_fold_report(j.at("title").get<std::string>(), std::move(rows));
}

}  // namespace

ExperimentData prepare_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentData ed;
    ed.data = load_dataset(cfg.dataset_path, cfg.dataset_format, cfg.arch.input_side);
    const auto split_seed = cfg.effective_split_seed();
    if (cfg.paper_faithful_oversampling) {
        spdlog::warn(
            "paper-faithful oversampling: the whole dataset is balanced before splitting, so duplicated "
            "minority images can land in both training and validation folds (leakage)");
        std::vector<std::size_t> all(ed.data.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const auto multiset = oversample_balance(ed.data.labels, all, derive_seed(split_seed, {kPrebalanceStream}));
        const std::size_t plane = ed.data.images.size() / ed.data.size();
        Dataset expanded;
        expanded.images = Tensor({multiset.size(), 1, ed.data.images.dim(2), ed.data.images.dim(3)});
        for (std::size_t i = 0; i < multiset.size(); ++i) {
            const auto src = ed.data.images.raw() + multiset[i] * plane;
            std::copy(src, src + plane, expanded.images.raw() + i * plane);
            expanded.labels.push_back(ed.data.labels[multiset[i]]);
            expanded.source_ids.push_back(ed.data.source_ids[multiset[i]]);
        }
        ed.data = std::move(expanded);
        ed.prebalanced = true;
    }
    const auto split = split_holdout(ed.data.labels, cfg.train_fraction, split_seed);
    ed.plan = make_stratified_folds(ed.data.labels, split.train, cfg.folds, derive_seed(split_seed, {kFoldStream}));
    return ed;
}

StageOutcome run_crossval_stage(const ExperimentConfig& cfg, const ExperimentData& ed, Stage stage,
                                std::size_t parallel) {
    const auto start = std::chrono::steady_clock::now();
    const auto dir = stage_dir(cfg, stage);
    fs::create_directories(dir);

    StageOutcome outcome;
    outcome.stage = stage;
    outcome.distill = cfg.distill;
    std::vector<std::optional<FoldOutput>> outputs;
    json tuning = json::array();
    if (stage == Stage::distilled && cfg.tune_distill) {
        double best = -1.0;
        std::string csv = "alpha,temperature,mean_acc\n";
        for (double alpha : kAlphaGrid) {
            for (double t : kTemperatureGrid) {
                auto dcfg = cfg.distill;
                dcfg.alpha = alpha;
                dcfg.temperature = t;
                auto candidate = run_folds(cfg, ed, stage, dcfg, parallel);
                const double acc = mean_accuracy(candidate);
                spdlog::info("tuning alpha={} T={}: mean validation acc {:.4f}", alpha, t, acc);
                csv += fmt::format("{},{},{:.6f}\n", alpha, t, acc);
                tuning.push_back({{"alpha", alpha}, {"temperature", t}, {"mean_acc", acc}});
                if (acc > best) {
                    best = acc;
                    outcome.distill = dcfg;
                    outputs = std::move(candidate);
                }
            }
        }
        write_text(dir / "tuning.csv", csv);
    } else {
        outputs = run_folds(cfg, ed, stage, outcome.distill, parallel);
    }

    const auto stage_hash = config_hash(cfg, stage);
    std::vector<MetricRow> val_rows, hold_rows;
    json folds = json::array();
    for (std::size_t f = 0; f < outputs.size(); ++f) {
        const auto& o = *outputs[f];
        const auto path = fold_checkpoint(cfg, stage, f);
        save_checkpoint(o.model, path, stage_hash, o.seeds.init);
        outcome.validation_counts.push_back(o.validation);
        outcome.holdout_counts.push_back(o.holdout);
        val_rows.push_back(compute_metrics(o.validation));
        hold_rows.push_back(compute_metrics(o.holdout));
        folds.push_back({{"fold", f + 1},
                         {"validation_size", ed.plan.folds[f].size()},
                         {"training_multiset_size", o.train_size},
                         {"seeds", {{"init", o.seeds.init}, {"train", o.seeds.train}, {"oversample", o.seeds.oversample}}},
                         {"validation_counts", counts_json(o.validation)},
                         {"holdout_counts", counts_json(o.holdout)},
                         {"loss_history", o.loss},
                         {"checkpoint", path.filename().string()},
                         {"param_hash", hex(param_hash(o.model))}});
    }
    outcome.validation = make_fold_report(stage_title(stage, "fold validation"), std::move(val_rows));
    outcome.holdout = make_fold_report(stage_title(stage, "holdout"), std::move(hold_rows));
    emit_report(outcome.validation, ReportFormat::csv, dir / "metrics.csv");
    emit_report(outcome.validation, ReportFormat::json, dir / "metrics.json");
    emit_report(outcome.holdout, ReportFormat::csv, dir / "holdout.csv");
    emit_report(outcome.holdout, ReportFormat::json, dir / "holdout.json");

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json manifest = {{"command", "crossval"},
                     {"stage", to_string(stage)},
                     {"config", config_json(cfg)},
                     {"config_hash", hex(config_hash(cfg))},
                     {"stage_config_hash", hex(stage_hash)},
                     {"seed", cfg.seed},
                     {"split_seed", cfg.effective_split_seed()},
                     {"k", ed.plan.k},
                     {"holdout_size", ed.plan.holdout.size()},
                     {"prebalanced", ed.prebalanced},
                     {"parallel", parallel},
                     {"params", count_params(fresh_model(cfg, stage, 0))},
                     {"folds", folds},
                     {"wall_time_seconds", wall}};
    if (stage == Stage::distilled) {
        manifest["distill"] = distill_json(outcome.distill);
        if (!tuning.empty()) manifest["tuning"] = tuning;
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return outcome;
}

ConfusionCounts run_single_stage(const ExperimentConfig& cfg, const ExperimentData& ed, Stage stage) {
    const auto start = std::chrono::steady_clock::now();
    const auto dir = stage_dir(cfg, stage);
    fs::create_directories(dir);
    std::optional<ModelGraph> teacher;
    if (stage == Stage::distilled) teacher = load_teacher(cfg, stage_dir(cfg, Stage::teacher) / "model.kdck");

    std::vector<std::size_t> pool;
    for (const auto& f : ed.plan.folds) pool.insert(pool.end(), f.begin(), f.end());
    std::sort(pool.begin(), pool.end());
    auto out = train_and_score(cfg, ed, stage, pool, {}, kSingleRun, cfg.distill, teacher ? &*teacher : nullptr);

    const auto stage_hash = config_hash(cfg, stage);
    save_checkpoint(out.model, dir / "model.kdck", stage_hash, out.seeds.init);
    const auto report = make_fold_report(stage_title(stage, "holdout"), {compute_metrics(out.holdout)});
    emit_report(report, ReportFormat::csv, dir / "model_holdout.csv");

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json manifest = {{"command", stage == Stage::teacher   ? "train-teacher"
                                 : stage == Stage::student ? "train-student"
                                                           : "distill"},
                     {"stage", to_string(stage)},
                     {"config", config_json(cfg)},
                     {"config_hash", hex(config_hash(cfg))},
                     {"stage_config_hash", hex(stage_hash)},
                     {"seed", cfg.seed},
                     {"split_seed", cfg.effective_split_seed()},
                     {"seeds", {{"init", out.seeds.init}, {"train", out.seeds.train}, {"oversample", out.seeds.oversample}}},
                     {"training_multiset_size", out.train_size},
                     {"holdout_counts", counts_json(out.holdout)},
                     {"loss_history", out.loss},
                     {"param_hash", hex(param_hash(out.model))},
                     {"wall_time_seconds", wall}};
    if (stage == Stage::distilled) manifest["distill"] = distill_json(cfg.distill);
    write_text(dir / "model_manifest.json", manifest.dump(2) + "\n");
    return out.holdout;
}

std::vector<FoldReport> build_report(const ExperimentConfig& cfg) {
    std::vector<FoldReport> out;
    const std::array<Stage, 3> stages = {Stage::teacher, Stage::student, Stage::distilled};
    for (const char* file : {"metrics.json", "holdout.json"}) {
        std::vector<FoldReport> group;
        for (auto s : stages) {
            const auto path = stage_dir(cfg, s) / file;
            if (!fs::exists(path)) {
                if (std::string(file) == "holdout.json") break;
                throw PrerequisiteError("report needs " + path.string() + " (run crossval for the " +
                                        to_string(s) + " stage first)");
            }
            group.push_back(report_from_json(read_json(path)));
        }
        if (group.size() != stages.size()) continue;
        group[2].improvement = improvement_row(group[1].average, group[2].average);
        ParamSection params;
        params.teacher_label = "Teacher model (two-branch CNN)";
        params.student_label = "Student model (inverted-residual CNN)";
        params.teacher_params = count_params(build_mini_teacher(cfg.arch, 2));
        params.student_params = count_params(build_mini_student(cfg.arch, 2));
        group[2].params = params;
        for (auto& r : group) out.push_back(std::move(r));
    }
    return out;
}

std::vector<FoldReport> write_report(const ExperimentConfig& cfg) {
    auto reports = build_report(cfg);
    std::string text;
    json all = json::array();
    for (const auto& r : reports) {
        if (!text.empty()) text += "\n";
        text += render_report(r, ReportFormat::text);
        all.push_back(json::parse(render_report(r, ReportFormat::json)));
    }
    fs::create_directories(cfg.out);
    write_text(cfg.out / "report.txt", text);
    write_text(cfg.out / "report.json", all.dump(2) + "\n");
    emit_report(reports.at(2), ReportFormat::csv, cfg.out / "report.csv");
    return reports;
}

void run_command(const ExperimentConfig& cfg, const CommandOptions& options) {
    const auto& cmd = options.command;
    if (cmd == "synth") {
        synth_dataset(cfg.synth_n_per_class, cfg.synth_side, cfg.synth_seed, cfg.dataset_path, cfg.dataset_format);
        fmt::print("wrote {} images ({}x{}) to {}\n", 2 * cfg.synth_n_per_class, cfg.synth_side, cfg.synth_side,
                   cfg.dataset_path.string());
        return;
    }
    if (cmd == "gradcheck") {
        const auto reports = run_gradcheck_suite(cfg.seed, options.gradcheck_instances);
        json j = json::array();
        std::size_t failed = 0;
        fmt::print("{:<20}{:>16}{:>12}{:>14}  status\n", "op", "max rel error", "tolerance", "coordinates");
        for (const auto& r : reports) {
            fmt::print("{:<20}{:>16.3e}{:>12.0e}{:>14}  {}\n", r.op, r.max_rel_error, r.tolerance, r.coordinates,
                       r.pass ? "ok" : "FAIL");
            j.push_back({{"op", r.op},
                         {"max_rel_error", r.max_rel_error},
                         {"tolerance", r.tolerance},
                         {"coordinates", r.coordinates},
                         {"pass", r.pass}});
            failed += r.pass ? 0 : 1;
        }
        fs::create_directories(cfg.out);
        write_text(cfg.out / "gradcheck.json", j.dump(2) + "\n");
        if (failed) throw NumericError(fmt::format("gradcheck: {} op(s) above tolerance", failed));
        return;
    }
    if (cmd == "report") {
        for (const auto& r : write_report(cfg)) fmt::print("{}\n", render_report(r, ReportFormat::text));
        return;
    }

    const auto single = [&](Stage s) {
        const auto ed = prepare_experiment(cfg);
        const auto m = compute_metrics(run_single_stage(cfg, ed, s));
        fmt::print("{} holdout: acc {} f1 {}\n", to_string(s), render_metric(m.accuracy), render_metric(m.f1));
    };
    if (cmd == "train-teacher") return single(Stage::teacher);
    if (cmd == "train-student") return single(Stage::student);
    if (cmd == "distill") {
        const auto teacher = stage_dir(cfg, Stage::teacher) / "model.kdck";
        if (!fs::exists(teacher)) throw PrerequisiteError("teacher checkpoint required: " + teacher.string());
        return single(Stage::distilled);
    }
    if (cmd == "crossval") {
        std::vector<Stage> stages;
        if (options.stage == "all") {
            stages = {Stage::teacher, Stage::student, Stage::distilled};
        } else {
            stages = {parse_stage(options.stage)};
        }
        if (stages.front() == Stage::distilled) {
            const auto first = fold_checkpoint(cfg, Stage::teacher, 0);
            if (!fs::exists(first)) throw PrerequisiteError("teacher checkpoint required: " + first.string());
        }
        const auto ed = prepare_experiment(cfg);
        for (auto s : stages) {
            const auto outcome = run_crossval_stage(cfg, ed, s, options.parallel);
            fmt::print("{}\n", render_report(outcome.validation, ReportFormat::text));
        }
        if (stages.size() > 1) write_report(cfg);
        return;
    }
    throw ConfigError("command", "unknown command '" + cmd + "'");
}

}  // namespace kd
