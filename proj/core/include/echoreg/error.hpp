#pragma once

#include <stdexcept>
#include <string>

namespace echoreg {

// Error categories surface as distinct exit codes in the CLI.
enum class ErrorKind {
    contract,    // shape mismatch, invalid argument
    format,      // malformed file
    undefined,   // metric undefined for the given input (empty region, too few lines)
    config,      // bad configuration
    checkpoint,  // missing or incompatible checkpoint
    io,          // filesystem failure
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what);
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ContractError : Error {
    explicit ContractError(const std::string& what) : Error(ErrorKind::contract, what) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};
struct UndefinedMetricError : Error {
    explicit UndefinedMetricError(const std::string& what) : Error(ErrorKind::undefined, what) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};
struct CheckpointError : Error {
    explicit CheckpointError(const std::string& what) : Error(ErrorKind::checkpoint, what) {}
};
struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

}  // namespace echoreg
