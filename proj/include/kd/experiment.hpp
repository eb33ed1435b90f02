#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kd/data.hpp"
#include "kd/distill.hpp"
#include "kd/error.hpp"
#include "kd/metrics.hpp"
#include "kd/models.hpp"
#include "kd/training.hpp"

namespace kd {

enum class Stage { teacher, student, distilled };

const char* to_string(Stage stage);
Stage parse_stage(const std::string& name);

struct ExperimentConfig {
    std::filesystem::path dataset_path;
    DatasetFormat dataset_format = DatasetFormat::raw;
    ArchScale arch;
    TrainConfig teacher_train;
    TrainConfig student_train;
    DistillConfig distill;
    /// Pick alpha and T from the built-in grid by cross-validated accuracy.
    bool tune_distill = false;
    double train_fraction = 0.8;
    std::size_t folds = 5;
    /// Defaults to a value derived from `seed`.
    std::optional<std::uint64_t> split_seed;
    bool augment = true;
    AugmentConfig augment_cfg;
    std::uint64_t seed = 0;
    std::filesystem::path out = "runs";
    /// Oversample the whole dataset before splitting, as the original
    /// procedure did. Duplicates then leak across folds.
    bool paper_faithful_oversampling = false;
    std::size_t synth_n_per_class = 1000;
    std::size_t synth_side = 32;
    std::uint64_t synth_seed = 7;

    void validate() const;
    std::uint64_t effective_split_seed() const;
};

/// Parse "key = value" lines. `#` starts a comment. Relative paths are
/// resolved against `base_dir`.
ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Every config key with its canonical value, sorted by key.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg);

/// FNV-1a-64 over the canonical entries. With a stage, only the keys that
/// can change that stage's checkpoints take part; run.out never does.
std::uint64_t config_hash(const ExperimentConfig& cfg, std::optional<Stage> stage = std::nullopt);

// ---- checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointFault { bad_magic, version_mismatch, hash_mismatch, checksum_mismatch, truncated, malformed };

class CheckpointError : public DataError {
   public:
    CheckpointError(CheckpointFault fault, const std::string& what) : DataError("checkpoint: " + what), fault_(fault) {}
    CheckpointFault fault() const noexcept { return fault_; }

   private:
    CheckpointFault fault_;
};

struct Checkpoint {
    ModelGraph model;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
};

// "KDCK", u32 version, u8 model kind, input C/H/W and classes as u32,
// layer specs, named parameters as LE float32, u64 config hash, u64 seed,
// then an FNV-1a-64 checksum of everything before it.
std::vector<std::uint8_t> encode_checkpoint(const ModelGraph& model, std::uint64_t config_hash, std::uint64_t seed);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes,
                             std::optional<std::uint64_t> expected_config_hash = std::nullopt);
void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path, std::uint64_t config_hash,
                     std::uint64_t seed);
/// Missing files raise PrerequisiteError; damaged ones CheckpointError.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_config_hash = std::nullopt);

// ---- synthetic data --------------------------------------------------------

/// Two texture classes: blob noise (label 0) and oriented gratings
/// (label 1), each with random contrast, placement and background.
std::vector<RawImage> synth_images(std::size_t n_per_class, std::size_t side, std::uint64_t seed);
void synth_dataset(std::size_t n_per_class, std::size_t side, std::uint64_t seed, const std::filesystem::path& path,
                   DatasetFormat format = DatasetFormat::raw);

// ---- runs ------------------------------------------------------------------

/// Loaded data plus the split shared by every stage.
struct ExperimentData {
    Dataset data;
    FoldPlan plan;
    /// True when the whole dataset was oversampled up front.
    bool prebalanced = false;
};

ExperimentData prepare_experiment(const ExperimentConfig& cfg);

struct StageOutcome {
    Stage stage = Stage::teacher;
    FoldReport validation;
    FoldReport holdout;
    std::vector<ConfusionCounts> validation_counts;
    std::vector<ConfusionCounts> holdout_counts;
    DistillConfig distill;
};

/// k-fold run of one stage. Writes `<out>/<stage>/fold<i>.kdck`,
/// metrics.{csv,json}, holdout.{csv,json} and manifest.json. Folds run on up
/// to `parallel` threads; results do not depend on it.
StageOutcome run_crossval_stage(const ExperimentConfig& cfg, const ExperimentData& data, Stage stage,
                                std::size_t parallel = 1);

/// Train one model on every non-holdout item and score it on the holdout.
/// Writes `<out>/<stage>/model.kdck`, model_holdout.csv and manifest.json.
ConfusionCounts run_single_stage(const ExperimentConfig& cfg, const ExperimentData& data, Stage stage);

/// Teacher, student-before and student-after tables with %Improvement and
/// the parameter section, built from the stage directories under `out`.
std::vector<FoldReport> build_report(const ExperimentConfig& cfg);
/// Writes report.txt, report.json and report.csv under cfg.out.
std::vector<FoldReport> write_report(const ExperimentConfig& cfg);

struct CommandOptions {
    std::string command;
    std::string stage = "all";
    std::size_t parallel = 1;
    std::size_t gradcheck_instances = 100;
};

inline constexpr std::array<const char*, 7> kCommands = {"train-teacher", "train-student", "distill", "crossval",
                                                         "report",        "gradcheck",     "synth"};

/// Execute one CLI command. Errors propagate as kd::Error.
void run_command(const ExperimentConfig& cfg, const CommandOptions& options);

}  // namespace kd
