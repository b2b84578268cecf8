#pragma once

#include <stdexcept>
#include <string>

namespace collabdqn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or observation extents that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Network layout that does not match what the caller asked for.
class ArchitectureError : public Error {
 public:
  using Error::Error;
};

/// Environment misuse (out-of-bounds start, stepping a frozen agent).
class EnvError : public Error {
 public:
  using Error::Error;
};

/// Replay sampled before it holds the warmup number of transitions.
class ReplayError : public Error {
 public:
  using Error::Error;
};

// File-format errors. Each failure mode has its own type so callers (and
// tests) can tell them apart without parsing messages.
class FormatError : public Error {
 public:
  using Error::Error;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class SizeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class DtypeError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TensorCountError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Filesystem problems (missing parent, existing output without --force).
class PathError : public Error {
 public:
  using Error::Error;
};

}  // namespace collabdqn
