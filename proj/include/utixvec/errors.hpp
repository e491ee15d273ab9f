#pragma once

#include <stdexcept>
#include <string>

namespace utixvec {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape algebra violations (operand dims disagree, window larger than input).
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, reused graph, and similar.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class InputTooShortError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

// Non-finite values where finite ones were required (diverged training).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Wrong magic or unsupported version in a binary file.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Structurally invalid file contents: truncation, bad lengths, shape
/// disagreement with the embedded config.
class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace utixvec
