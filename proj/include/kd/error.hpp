#pragma once

#include <stdexcept>
#include <string>

namespace kd {

/// Process exit codes used by the `kd` tool.
enum class ExitCode : int {
    ok = 0,
    config = 2,
    data = 3,
    missing_prerequisite = 4,
    numeric = 5,
};

class Error : public std::runtime_error {
   public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

   private:
    ExitCode code_;
};

/// Tensor shapes disagree with what an operation requires.
class ShapeError : public Error {
   public:
    explicit ShapeError(const std::string& what) : Error(ExitCode::data, "shape mismatch: " + what) {}
};

class ConfigError : public Error {
   public:
    ConfigError(std::string key, const std::string& what)
        : Error(ExitCode::config, key + ": " + what), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }

   private:
    std::string key_;
};

class DataError : public Error {
   public:
    explicit DataError(const std::string& what) : Error(ExitCode::data, what) {}
};

class PrerequisiteError : public Error {
   public:
    explicit PrerequisiteError(const std::string& what) : Error(ExitCode::missing_prerequisite, what) {}
};

class NumericError : public Error {
   public:
    explicit NumericError(const std::string& what) : Error(ExitCode::numeric, what) {}
};

}  // namespace kd
