#pragma once

#include <stdexcept>
#include <string>

namespace anomaly_ddpm {

// Base for all library failures. CLI maps ConfigError to exit code 2 and
// everything else to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration, bad CLI arguments, missing paths at validation time.
struct ConfigError : Error {
    using Error::Error;
};

// Array/tensor shape disagreement.
struct ShapeError : Error {
    using Error::Error;
};

// Argument outside its mathematical domain (e.g. timestep out of range).
struct DomainError : Error {
    using Error::Error;
};

// File system / serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Corpus loading and corruption-generator failures.
struct DataError : Error {
    using Error::Error;
};

// Non-finite losses and other aborts during optimization.
struct TrainError : Error {
    using Error::Error;
};

// Degenerate metric inputs (single class, no positives, ...).
struct MetricError : Error {
    using Error::Error;
};

// Threshold calibration failures (too few subjects, model mismatch).
struct CalibrationError : Error {
    using Error::Error;
};

}  // namespace anomaly_ddpm
