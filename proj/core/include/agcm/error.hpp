#pragma once

#include <stdexcept>
#include <string>

namespace agcm {

/// Base class for all library errors. The CLI maps these onto the
/// "agcm-error:" diagnostic stream.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape or axis mismatch. Messages name the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid input data (non-binary ground truth, unmatched dataset pairs, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// API misuse: non-scalar loss, double initialization, missing gradients.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Numeric failure: NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File I/O and serialization failures (checkpoints, datasets).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents; messages carry a byte offset where known.
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace agcm
