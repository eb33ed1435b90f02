#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <nlohmann/json.hpp>

#include "kd/experiment.hpp"

namespace {

// Errors go to stderr as one JSON line so scripts can parse them.
int fail(int code, const std::string& kind, const std::string& message, const std::string& key = {}) {
    nlohmann::json j = {{"error", {{"code", code}, {"kind", kind}, {"message", message}}}};
    if (!key.empty()) j["error"]["key"] = key;
    std::cerr << j.dump() << "\n";
    return code;
}

int fail(kd::ExitCode code, const std::string& kind, const std::string& message, const std::string& key = {}) {
    return fail(static_cast<int>(code), kind, message, key);
}

void configure_logging() {
    auto logger = spdlog::stderr_color_mt("kd");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%l] %v");
    const char* level = std::getenv("KD_LOG");
    const std::string name = level ? level : "info";
    if (name == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (name == "info") {
        spdlog::set_level(spdlog::level::info);
    } else if (name == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        throw kd::ConfigError("KD_LOG", "expected error, info or debug, got '" + name + "'");
    }
}

std::string kind_of(kd::ExitCode code) {
    switch (code) {
        case kd::ExitCode::config: return "config";
        case kd::ExitCode::data: return "data";
        case kd::ExitCode::missing_prerequisite: return "missing_prerequisite";
        case kd::ExitCode::numeric: return "numeric";
        default: return "error";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-distillation experiment runner"};
    kd::CommandOptions options;
    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    app.add_option("command", options.command, "Command to run")
        ->required()
        ->check(CLI::IsMember(std::vector<std::string>(kd::kCommands.begin(), kd::kCommands.end())));
    app.add_option("--config", config_path, "Experiment config file")->required();
    app.add_option("--out", out_dir, "Output directory (overrides run.out)");
    app.add_option("--seed", seed, "Run seed (overrides run.seed)");
    app.add_option("--parallel", options.parallel, "Worker threads for crossval folds")->check(CLI::PositiveNumber);
    app.add_option("--stage", options.stage, "crossval stage: teacher, student, distilled or all")
        ->check(CLI::IsMember({"teacher", "student", "distilled", "all"}));
    app.add_option("--instances", options.gradcheck_instances, "gradcheck: random instances per op")
        ->check(CLI::PositiveNumber);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(kd::ExitCode::config, "usage", e.what());
    }

    try {
        configure_logging();
        auto cfg = kd::parse_config(config_path);
        if (!out_dir.empty()) cfg.out = out_dir;
        if (seed) cfg.seed = *seed;
        kd::run_command(cfg, options);
    } catch (const kd::ConfigError& e) {
        return fail(e.code(), "config", e.what(), e.key());
    } catch (const kd::Error& e) {
        return fail(e.code(), kind_of(e.code()), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(kd::ExitCode::data, "data", e.what());
    } catch (const std::exception& e) {
        return fail(1, "internal", e.what());
    }
    return 0;
}
