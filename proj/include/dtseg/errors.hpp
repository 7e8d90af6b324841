#pragma once

#include <stdexcept>
#include <string>

namespace dtseg {

// Invalid caller-supplied argument (bad sizes, ranges, unknown indices).
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Tensor shape does not satisfy an operation's contract.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Dataset ingestion failed; message names the offending file.
struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// mIoU / F1 requested when every class is absent.
struct UndefinedMetricError : std::domain_error {
    using std::domain_error::domain_error;
};

// Checkpoint bytes do not match their recorded hash, or the file is truncated.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint of one component kind loaded as another.
struct KindMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A requested pipeline stage is missing an upstream artifact.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace dtseg
