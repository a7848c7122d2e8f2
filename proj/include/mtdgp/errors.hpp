#pragma once

#include <stdexcept>
#include <string>

namespace mtdgp {

// Base class for all library errors. Subclasses map 1:1 onto the failure
// modes of the public operations so callers can catch precisely.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionMismatch : Error {
    using Error::Error;
};

struct NotSymmetric : Error {
    using Error::Error;
};

struct NotPositiveDefinite : Error {
    using Error::Error;
};

struct NonFiniteGradient : Error {
    using Error::Error;
};

struct TaskIndexOutOfRange : Error {
    using Error::Error;
};

struct InvalidSpec : Error {
    using Error::Error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

struct EmptyBatch : Error {
    using Error::Error;
};

struct InvalidNoise : Error {
    using Error::Error;
};

struct UnsupportedVariant : Error {
    using Error::Error;
};

struct MalformedRow : Error {
    using Error::Error;
};

struct UnknownTaskId : Error {
    using Error::Error;
};

struct EmptyFile : Error {
    using Error::Error;
};

struct SchemaMismatch : Error {
    using Error::Error;
};

struct DegenerateLabels : Error {
    using Error::Error;
};

struct VersionMismatch : Error {
    using Error::Error;
};

struct CorruptCheckpoint : Error {
    using Error::Error;
};

struct NonFiniteValue : Error {
    using Error::Error;
};

struct TrainingAborted : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace mtdgp
