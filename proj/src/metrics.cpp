#include "kd/metrics.hpp"

#include <fmt/format.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "kd/error.hpp"

namespace kd {

ConfusionCounts tally(std::span<const int> predicted, std::span<const int> actual) {
    if (predicted.size() != actual.size()) {
        throw DataError("tally: " + std::to_string(predicted.size()) + " predictions for " +
                        std::to_string(actual.size()) + " labels");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        const bool pred = predicted[i] == 1, truth = actual[i] == 1;
        if (pred && truth) ++c.tp;
        else if (!pred && !truth) ++c.tn;
        else if (pred) ++c.fp;
        else ++c.fn;
    }
    return c;
}

MetricRow MetricRow::from_values(const std::array<double, 6>& v) {
    MetricRow r;
    r.accuracy = v[0];
    r.precision = v[1];
    r.specificity = v[2];
    r.recall = v[3];
    r.f1 = v[4];
    r.balanced_accuracy = v[5];
    return r;
}

MetricRow compute_metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw DataError("compute_metrics: all confusion counts are zero");
    MetricRow r;
    auto ratio = [&](double num, double den) {
        if (den == 0.0) {
            r.degenerate = true;
            return 0.0;
        }
        return num / den;
    };
    const auto tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
    const auto fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
    r.precision = ratio(tp, tp + fp);
    r.recall = ratio(tp, tp + fn);
    r.specificity = ratio(tn, tn + fp);
    r.f1 = ratio(2.0 * r.precision * r.recall, r.precision + r.recall);
    r.balanced_accuracy = (r.specificity + r.recall) / 2.0;
    r.accuracy = (tp + tn) / static_cast<double>(c.total());
    return r;
}

MetricRow fold_average(std::span<const MetricRow> rows) {
    if (rows.empty()) throw DataError("fold_average: no fold rows");
    std::array<double, 6> sum{};
    bool degenerate = false;
    for (const auto& row : rows) {
        const auto v = row.values();
        for (std::size_t i = 0; i < 6; ++i) sum[i] += v[i];
        degenerate = degenerate || row.degenerate;
    }
    for (auto& s : sum) s /= static_cast<double>(rows.size());
    auto out = MetricRow::from_values(sum);
    out.degenerate = degenerate;
    return out;
}

ImprovementRow improvement_row(const MetricRow& before, const MetricRow& after) {
    ImprovementRow r;
    const auto b = before.values(), a = after.values();
    for (std::size_t i = 0; i < 6; ++i) r.points[i] = (a[i] - b[i]) * 100.0;
    return r;
}

double param_reduction(std::uint64_t teacher_params, std::uint64_t student_params) {
    if (teacher_params == 0) throw DataError("param_reduction: teacher parameter count is zero");
    return (static_cast<double>(student_params) - static_cast<double>(teacher_params)) /
           static_cast<double>(teacher_params) * 100.0;
}

std::string render_metric(double v) { return fmt::format("{:.3f}", v); }

std::string render_percent(double v) {
    auto s = fmt::format("{:.1f}", v);
    if (s == "-0.0") s = "0.0";
    return s + " %";
}

FoldReport make_fold_report(std::string title, std::vector<MetricRow> folds) {
    FoldReport r;
    r.title = std::move(title);
    r.average = fold_average(folds);
    r.folds = std::move(folds);
    return r;
}

namespace {

std::string group_thousands(std::uint64_t v) {
    auto digits = std::to_string(v);
    for (auto i = static_cast<std::ptrdiff_t>(digits.size()) - 3; i > 0; i -= 3) digits.insert(static_cast<std::size_t>(i), ",");
    return digits;
}

std::string render_csv(const FoldReport& r) {
    std::string out = "fold";
    for (auto c : kMetricCsvColumns) out += std::string(",") + c;
    out += "\n";
    auto row = [&](const std::string& label, const std::array<double, 6>& v, bool percent) {
        out += label;
        for (auto x : v) out += "," + (percent ? fmt::format("{:.1f}", x) : render_metric(x));
        out += "\n";
    };
    for (std::size_t i = 0; i < r.folds.size(); ++i) row(std::to_string(i + 1), r.folds[i].values(), false);
    row("average", r.average.values(), false);
    if (r.improvement) row("improvement", r.improvement->points, true);
    return out;
}

std::string render_json(const FoldReport& r) {
    using nlohmann::json;
    auto row_json = [](const MetricRow& m) {
        json j;
        const auto v = m.values();
        for (std::size_t i = 0; i < 6; ++i) j[kMetricCsvColumns[i]] = v[i];
        j["degenerate"] = m.degenerate;
        return j;
    };
    json j;
    j["title"] = r.title;
    j["folds"] = json::array();
    for (const auto& f : r.folds) j["folds"].push_back(row_json(f));
    j["average"] = row_json(r.average);
    if (r.improvement) {
        json imp;
        for (std::size_t i = 0; i < 6; ++i) imp[kMetricCsvColumns[i]] = r.improvement->points[i];
        j["improvement_points"] = imp;
    }
    if (r.params) {
        j["parameters"] = {{"teacher", r.params->teacher_params},
                           {"student", r.params->student_params},
                           {"reduction_percent", param_reduction(r.params->teacher_params, r.params->student_params)}};
    }
    return j.dump(2) + "\n";
}

std::string render_text(const FoldReport& r) {
    static constexpr std::array<const char*, 7> header = {"Fold No.", "Acc",      "Precision",   "Specificity",
                                                          "Recall(sensitivity)", "F1 score", "Balanced-Acc"};
    std::string out;
    if (!r.title.empty()) out += r.title + "\n";
    out += fmt::format("{:<14}", header[0]);
    for (std::size_t i = 1; i < header.size(); ++i) out += fmt::format("{:>21}", header[i]);
    out += "\n";
    auto row = [&](const std::string& label, const std::array<std::string, 6>& cells) {
        out += fmt::format("{:<14}", label);
        for (const auto& c : cells) out += fmt::format("{:>21}", c);
        out += "\n";
    };
    auto metric_cells = [](const MetricRow& m) {
        std::array<std::string, 6> cells;
        const auto v = m.values();
        for (std::size_t i = 0; i < 6; ++i) cells[i] = render_metric(v[i]);
        return cells;
    };
    for (std::size_t i = 0; i < r.folds.size(); ++i) row(std::to_string(i + 1), metric_cells(r.folds[i]));
    row("Average", metric_cells(r.average));
    if (r.improvement) {
        std::array<std::string, 6> cells;
        for (std::size_t i = 0; i < 6; ++i) cells[i] = render_percent(r.improvement->points[i]);
        row("%Improvement", cells);
    }
    if (r.params) {
        const auto& p = *r.params;
        out += "\n";
        out += fmt::format("{:<40}{:>14}\n", p.teacher_label, group_thousands(p.teacher_params));
        out += fmt::format("{:<40}{:>14}\n", p.student_label, group_thousands(p.student_params));
        out += fmt::format("{:<40}{:>14}\n", "Number of Parameters Reduction (%)",
                           render_percent(param_reduction(p.teacher_params, p.student_params)));
    }
    return out;
}

}  // namespace

std::string render_report(const FoldReport& report, ReportFormat format) {
    if (report.folds.empty()) throw DataError("report '" + report.title + "' has no fold rows");
    switch (format) {
        case ReportFormat::csv: return render_csv(report);
        case ReportFormat::json: return render_json(report);
        case ReportFormat::text: return render_text(report);
    }
    return {};
}

void emit_report(const FoldReport& report, ReportFormat format, const std::filesystem::path& path) {
    const auto text = render_report(report, format);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ExitCode::data, "cannot write report to " + path.string());
    out << text;
    if (!out) throw Error(ExitCode::data, "write failed for " + path.string());
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<MetricRow> rows;
    if (!std::getline(in, line) || line.rfind("fold,acc,", 0) != 0) throw DataError("metrics csv: missing header");
    for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string label, cell;
        std::getline(fields, label, ',');
        if (label == "average" || label == "improvement") continue;
        std::array<double, 6> v{};
        for (auto& x : v) {
            if (!std::getline(fields, cell, ',')) {
                throw DataError("metrics csv line " + std::to_string(lineno) + ": expected 7 columns");
            }
            x = std::stod(cell);
        }
        rows.push_back(MetricRow::from_values(v));
    }
    return rows;
}

}  // namespace kd
