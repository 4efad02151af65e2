#pragma once

#include <stdexcept>
#include <string>

namespace mugv {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or divisibility violations (wrong rank, axis not divisible, ...).
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration values (bad factor, odd rope split, unknown key, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Invalid runtime arguments (steps = 0, empty batch, id out of range, ...).
struct InputError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Data pipeline failures (missing mandatory score, unreadable clip, ...).
struct PipelineError : Error {
    using Error::Error;
};

// Post-training interleave plan violations.
struct SchedulingError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    enum class Kind { BadMagic, Truncated, BadHeader, BadOffsets, Io };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

}  // namespace mugv
