#pragma once

#include <stdexcept>
#include <string>

namespace fpdm {

// Invalid user-provided configuration (bad bounds, malformed config file).
// CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required upstream artifact (dataset, checkpoint, calibration) is missing
// or inconsistent with the current config. CLI exit code 3.
class PrerequisiteError : public std::runtime_error {
public:
    explicit PrerequisiteError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or numerically undefined results mid-computation.
// CLI exit code 4.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke an API precondition (shape mismatch, step out of range).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// Corrupt or unrecognized on-disk artifact.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Calibration cannot proceed (e.g. single-class validation set).
class CalibrationError : public std::runtime_error {
public:
    explicit CalibrationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Metric is undefined on the given input (no positives, zero variance).
class UndefinedMetricError : public std::runtime_error {
public:
    explicit UndefinedMetricError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fpdm
