#pragma once

#include <stdexcept>
#include <string>

namespace valgate {

/// Base for every error raised by the library. The CLI maps subclasses onto
/// process exit codes (see exit_code_for).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (missing branch data, empty input...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Anything wrong with data read from disk or handed over by a producer.
class DataError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss or gradient, or an iteration that refuses to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public ContractError {
 public:
  using ContractError::ContractError;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// 2 for configuration, 3 for data (including broken contracts and a missing
/// calibration), 4 for numeric failures.
inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ContractError*>(&e) ||
      dynamic_cast<const CalibrationError*>(&e)) {
    return kExitData;
  }
  return kExitInternal;
}

}  // namespace valgate
