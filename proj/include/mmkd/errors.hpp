#pragma once

#include <stdexcept>
#include <string>

namespace mmkd {

// Base class for every error the engine raises. Each concrete class carries a
// stable name (used by the CLI for exit reporting) and a fixed exit code.
class Error : public std::runtime_error {
public:
    Error(std::string error_class, int exit_code, const std::string& msg)
        : std::runtime_error(msg), class_(std::move(error_class)), exit_code_(exit_code) {}

    const std::string& error_class() const noexcept { return class_; }
    int exit_code() const noexcept { return exit_code_; }

private:
    std::string class_;
    int exit_code_;
};

// Bad file contents, invalid option combinations, unknown config keys.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config_error", 2, msg) {}
};

// Out-of-range numeric arguments (temperature, beta, fractions).
class ParameterError : public Error {
public:
    explicit ParameterError(const std::string& msg) : Error("parameter_error", 3, msg) {}
};

// Violated call contracts: empty masks, non-scalar backward, reused graphs.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error("contract_error", 4, msg) {}
};

// Incompatible tensor shapes.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error("dimension_error", 5, msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric_error", 6, msg) {}
};

// Words outside the vocabulary and malformed token streams.
class TokenizeError : public Error {
public:
    explicit TokenizeError(const std::string& msg) : Error("tokenize_error", 7, msg) {}
};

// Filesystem failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io_error", 8, msg) {}
};

} // namespace mmkd
