#pragma once

#include <stdexcept>
#include <string>

namespace maskdime {

/// Base class for every error raised by the library. `code()` is a short
/// machine-readable tag used by the CLI's one-line error output.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& what)
        : std::runtime_error(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape_mismatch", what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("non_finite", what) {}
};

struct ArgumentError : Error {
    explicit ArgumentError(const std::string& what) : Error("invalid_argument", what) {}
};

struct FormatError : Error {
    FormatError(std::string code, const std::string& what) : Error(std::move(code), what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& what) : Error("training", what) {}
};

}  // namespace maskdime
