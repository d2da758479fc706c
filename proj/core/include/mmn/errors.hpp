#pragma once

#include <stdexcept>
#include <string>

namespace mmn {

// Invalid configuration value (bad hyperparameter, malformed flag, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structural problem in a dataset, prediction set, or taxonomy.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape mismatch.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable file content (bad JSON, bad checkpoint bytes, ...).
class ParseError : public std::runtime_error {
public:
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure during optimisation (non-finite gradient or update).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mmn
