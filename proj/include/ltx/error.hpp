#ifndef LTX_ERROR_HPP
#define LTX_ERROR_HPP

#include <stdexcept>
#include <string>

namespace ltx {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data is well-formed but inconsistent (exit code 1).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnreachableError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CapExceededError : public Error {
 public:
  using Error::Error;
};

// Malformed text input; carries the offending line number (1-based).
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, long line)
      : ValidationError(what + " (line " + std::to_string(line) + ")"),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// Non-finite values during optimization, or a failed numeric check (exit
// code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

// File system failures (exit code 2).
class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public IoError {
 public:
  using IoError::IoError;
};

class VersionMismatchError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace ltx

#endif  // LTX_ERROR_HPP
