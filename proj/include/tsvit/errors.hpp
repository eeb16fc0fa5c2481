#pragma once

#include <stdexcept>
#include <string>

namespace tsvit {

// Error taxonomy used across the library. All of these derive from
// std::runtime_error so callers may catch coarsely; the CLI maps them to
// exit codes.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct ParameterError : std::runtime_error {
    explicit ParameterError(const std::string& msg) : std::runtime_error("parameter error: " + msg) {}
};

struct ConfigurationError : std::runtime_error {
    explicit ConfigurationError(const std::string& msg) : std::runtime_error("configuration error: " + msg) {}
};

struct ModeError : std::runtime_error {
    explicit ModeError(const std::string& msg) : std::runtime_error("mode error: " + msg) {}
};

struct PartitionError : std::runtime_error {
    explicit PartitionError(const std::string& msg) : std::runtime_error("partition error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace tsvit
