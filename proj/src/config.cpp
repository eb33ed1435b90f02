#include <fmt/core.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "kd/experiment.hpp"

namespace kd {

namespace {

constexpr std::uint64_t kSplitStream = 0x5350;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::string show(double v) { return fmt::format("{}", v); }
std::string show(std::uint64_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }

struct Field {
    const char* key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define KD_SIZE_FIELD(KEY, MEMBER)                                                                        \
    Field {                                                                                               \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_int<std::size_t>(KEY, v); }, \
            [](const ExperimentConfig& c) { return show(static_cast<std::uint64_t>(c.MEMBER)); }          \
    }
#define KD_U64_FIELD(KEY, MEMBER)                                                                           \
    Field {                                                                                                 \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_int<std::uint64_t>(KEY, v); }, \
            [](const ExperimentConfig& c) { return show(static_cast<std::uint64_t>(c.MEMBER)); }            \
    }
#define KD_DOUBLE_FIELD(KEY, MEMBER)                                                             \
    Field {                                                                                      \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_double(KEY, v); }, \
            [](const ExperimentConfig& c) { return show(c.MEMBER); }                             \
    }
#define KD_BOOL_FIELD(KEY, MEMBER)                                                             \
    Field {                                                                                    \
        KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }, \
            [](const ExperimentConfig& c) { return show(c.MEMBER); }                           \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"dataset.path", [](ExperimentConfig& c, const std::string& v) { c.dataset_path = v; },
         [](const ExperimentConfig& c) { return c.dataset_path.generic_string(); }},
        {"dataset.format",
         [](ExperimentConfig& c, const std::string& v) {
             try {
                 c.dataset_format = parse_dataset_format(v);
             } catch (const Error&) {
                 throw ConfigError("dataset.format", "expected raw or pgm, got '" + v + "'");
             }
         },
         [](const ExperimentConfig& c) { return std::string(c.dataset_format == DatasetFormat::raw ? "raw" : "pgm"); }},
        KD_SIZE_FIELD("arch.input_side", arch.input_side),
        KD_SIZE_FIELD("arch.base_width", arch.base_width),
        KD_SIZE_FIELD("arch.branch_stages", arch.branch_stages),
        KD_SIZE_FIELD("arch.residual_blocks", arch.residual_blocks),
        KD_SIZE_FIELD("arch.student_blocks", arch.student_blocks),
        KD_SIZE_FIELD("arch.student_expansion", arch.student_expansion),
        KD_SIZE_FIELD("arch.head_width", arch.head_width),
        KD_DOUBLE_FIELD("teacher.learning_rate", teacher_train.learning_rate),
        KD_SIZE_FIELD("teacher.batch_size", teacher_train.batch_size),
        KD_SIZE_FIELD("teacher.epochs", teacher_train.epochs),
        KD_DOUBLE_FIELD("student.learning_rate", student_train.learning_rate),
        KD_SIZE_FIELD("student.batch_size", student_train.batch_size),
        KD_SIZE_FIELD("student.epochs", student_train.epochs),
        KD_DOUBLE_FIELD("distill.alpha", distill.alpha),
        KD_DOUBLE_FIELD("distill.temperature", distill.temperature),
        {"distill.kl_direction",
         [](ExperimentConfig& c, const std::string& v) {
             if (v == "teacher") {
                 c.distill.kl_direction = KlDirection::teacher_reference;
             } else if (v == "student") {
                 c.distill.kl_direction = KlDirection::student_reference;
             } else {
                 throw ConfigError("distill.kl_direction", "expected teacher or student, got '" + v + "'");
             }
         },
         [](const ExperimentConfig& c) {
             return std::string(c.distill.kl_direction == KlDirection::teacher_reference ? "teacher" : "student");
         }},
        KD_BOOL_FIELD("distill.tune", tune_distill),
        KD_DOUBLE_FIELD("split.train_fraction", train_fraction),
        KD_SIZE_FIELD("split.k", folds),
        {"split.seed", [](ExperimentConfig& c, const std::string& v) { c.split_seed = parse_int<std::uint64_t>("split.seed", v); },
         [](const ExperimentConfig& c) { return c.split_seed ? show(*c.split_seed) : std::string("auto"); }},
        KD_BOOL_FIELD("augment.enabled", augment),
        KD_DOUBLE_FIELD("augment.rotation_lo", augment_cfg.rotation_lo),
        KD_DOUBLE_FIELD("augment.rotation_hi", augment_cfg.rotation_hi),
        KD_U64_FIELD("augment.seed", augment_cfg.seed),
        KD_U64_FIELD("run.seed", seed),
        {"run.out", [](ExperimentConfig& c, const std::string& v) { c.out = v; },
         [](const ExperimentConfig& c) { return c.out.generic_string(); }},
        KD_BOOL_FIELD("run.paper_faithful_oversampling", paper_faithful_oversampling),
        KD_SIZE_FIELD("synth.n_per_class", synth_n_per_class),
        KD_SIZE_FIELD("synth.side", synth_side),
        KD_U64_FIELD("synth.seed", synth_seed),
    };
    return table;
}

#undef KD_SIZE_FIELD
#undef KD_U64_FIELD
#undef KD_DOUBLE_FIELD
#undef KD_BOOL_FIELD

// Re-key errors from nested validators under their config section.
template <typename F>
void validate_section(const std::string& prefix, F&& check) {
    try {
        check();
    } catch (const ConfigError& e) {
        if (e.key().rfind(prefix, 0) == 0) throw;
        const std::string what = e.what();
        throw ConfigError(prefix + e.key(), what.substr(e.key().size() + 2));
    }
}

bool excluded_from(const std::string& key, std::optional<Stage> stage) {
    auto starts = [&](const char* p) { return key.rfind(p, 0) == 0; };
    if (key == "run.out" || starts("synth.")) return true;
    if (!stage) return false;
    switch (*stage) {
        case Stage::teacher: return starts("student.") || starts("distill.");
        case Stage::student: return starts("teacher.") || starts("distill.");
        case Stage::distilled: return false;
    }
    return false;
}

}  // namespace

const char* to_string(Stage stage) {
    switch (stage) {
        case Stage::teacher: return "teacher";
        case Stage::student: return "student";
        case Stage::distilled: return "distilled";
    }
    return "?";
}

Stage parse_stage(const std::string& name) {
    if (name == "teacher") return Stage::teacher;
    if (name == "student") return Stage::student;
    if (name == "distilled") return Stage::distilled;
    throw ConfigError("stage", "expected teacher, student, distilled or all, got '" + name + "'");
}

void ExperimentConfig::validate() const {
    if (dataset_path.empty()) throw ConfigError("dataset.path", "required key missing");
    arch.validate();
    validate_section("teacher.", [&] { teacher_train.validate(); });
    validate_section("student.", [&] { student_train.validate(); });
    validate_section("distill.", [&] { distill.validate(); });
    augment_cfg.validate();
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split.train_fraction", "must lie in (0, 1)");
    if (folds < 2) throw ConfigError("split.k", "must be >= 2");
    if (synth_n_per_class < 10) throw ConfigError("synth.n_per_class", "must be >= 10");
    if (synth_side < 4 || synth_side > 65535) throw ConfigError("synth.side", "must lie in [4, 65535]");
}

std::uint64_t ExperimentConfig::effective_split_seed() const {
    return split_seed ? *split_seed : derive_seed(seed, {kSplitStream});
}

ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir) {
    std::map<std::string, const Field*> by_key;
    for (const auto& f : fields()) by_key.emplace(f.key, &f);

    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno), "expected 'key = value', got '" + line + "'");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        const auto it = by_key.find(key);
        if (it == by_key.end()) throw ConfigError(key, "unknown key (line " + std::to_string(lineno) + ")");
        if (!seen.insert(key).second) throw ConfigError(key, "duplicate key (line " + std::to_string(lineno) + ")");
        if (value.empty()) throw ConfigError(key, "missing value");
        it->second->set(cfg, value);
    }
    if (!seen.count("dataset.path")) throw ConfigError("dataset.path", "required key missing");
    if (!base_dir.empty()) {
        if (cfg.dataset_path.is_relative()) cfg.dataset_path = base_dir / cfg.dataset_path;
        if (cfg.out.is_relative() && seen.count("run.out")) cfg.out = base_dir / cfg.out;
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config", "cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path.parent_path());
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
    std::sort(out.begin(), out.end());
    return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg, std::optional<Stage> stage) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [key, value] : config_entries(cfg)) {
        if (excluded_from(key, stage)) continue;
        const auto line = key + "=" + value + "\n";
        h = fnv1a64(line.data(), line.size(), h);
    }
    return h;
}

}  // namespace kd
