#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kd {

/// Binary confusion counts with class 1 as the positive class.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const noexcept { return tp + tn + fp + fn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts tally(std::span<const int> predicted, std::span<const int> actual);

struct MetricRow {
    double accuracy = 0.0;
    double precision = 0.0;
    double specificity = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double balanced_accuracy = 0.0;
    /// Set when some ratio had a zero denominator and was reported as 0.
    bool degenerate = false;

    /// Column order of the report tables: Acc, Precision, Specificity,
    /// Recall, F1, Balanced-Acc.
    std::array<double, 6> values() const {
        return {accuracy, precision, specificity, recall, f1, balanced_accuracy};
    }
    static MetricRow from_values(const std::array<double, 6>& v);
};

inline constexpr std::array<const char*, 6> kMetricCsvColumns = {"acc", "precision", "specificity",
                                                                  "recall", "f1", "balanced_acc"};

MetricRow compute_metrics(const ConfusionCounts& c);

/// Element-wise arithmetic mean; no rounding.
MetricRow fold_average(std::span<const MetricRow> rows);

/// Percentage-point change per metric, (after - before) * 100.
struct ImprovementRow {
    std::array<double, 6> points{};
};

ImprovementRow improvement_row(const MetricRow& before, const MetricRow& after);

/// (student - teacher) / teacher * 100.
double param_reduction(std::uint64_t teacher_params, std::uint64_t student_params);

std::string render_metric(double v);   // "0.992"
std::string render_percent(double v);  // "0.8 %", "-95.3 %"

struct ParamSection {
    std::string teacher_label = "Teacher";
    std::string student_label = "Student";
    std::uint64_t teacher_params = 0;
    std::uint64_t student_params = 0;
};

struct FoldReport {
    std::string title;
    std::vector<MetricRow> folds;
    MetricRow average;
    std::optional<ImprovementRow> improvement;
    std::optional<ParamSection> params;
};

FoldReport make_fold_report(std::string title, std::vector<MetricRow> folds);

enum class ReportFormat { csv, json, text };

std::string render_report(const FoldReport& report, ReportFormat format);
void emit_report(const FoldReport& report, ReportFormat format, const std::filesystem::path& path);

/// Fold rows (not the average/improvement rows) of a CSV written by emit_report.
std::vector<MetricRow> parse_metrics_csv(const std::string& text);

}  // namespace kd
