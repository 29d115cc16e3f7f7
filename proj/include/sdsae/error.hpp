#pragma once

#include <stdexcept>
#include <string>

namespace sdsae {

// Exit codes used by the command-line tool. Each error class maps to one.
enum class ExitCode : int {
    ok = 0,
    usage = 2,
    config = 3,
    io = 4,
    format = 5,
    data = 6,
    numeric = 7,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

// Invalid configuration or dimension mismatch between arguments.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ExitCode::config, msg) {}
};

// Missing files, failed reads and writes.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ExitCode::io, msg) {}
};

// Malformed file contents: bad magic, truncation, schema violations.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(ExitCode::format, msg) {}
};

// Inputs that are well-formed but unusable (empty mask, zero variance, ...).
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(ExitCode::data, msg) {}
};

// Non-finite values during optimization.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ExitCode::numeric, msg) {}
};

}  // namespace sdsae
