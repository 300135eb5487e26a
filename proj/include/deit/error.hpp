#pragma once

#include <stdexcept>
#include <string>

namespace deit {

// Error taxonomy shared across the library. Everything derives from
// std::runtime_error so callers that don't care can catch one type.

struct ParamError : std::runtime_error {
    explicit ParamError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contract (wrong mode, detached graph, resolution mismatch...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data (dataset records, checkpoint framing).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint CRC mismatch.
struct CorruptionError : FormatError {
    explicit CorruptionError(const std::string& msg) : FormatError(msg) {}
};

// Checkpoint written by a newer format version than this reader.
struct VersionError : FormatError {
    explicit VersionError(const std::string& msg) : FormatError(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace deit
