// Exception hierarchy shared by the whole library.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace segrefine {

/// Dimension or shape contract violation (wrong rank, mismatched sizes, ...).
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration value (indivisible sizes, bad class counts, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value produced by a numerical op, or a diverged training run.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Misuse of the autograd graph (backward on non-scalar, backward twice, ...).
class AutogradError : public std::runtime_error {
public:
    explicit AutogradError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem-level failure (missing file, short write, ...).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed on-disk payload. Carries the byte offset of the first bad field.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& msg, std::uint64_t offset)
        : std::runtime_error(msg + " at offset " + std::to_string(offset)), offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace segrefine
