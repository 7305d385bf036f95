#pragma once

#include <stdexcept>
#include <string>

namespace evidentia {

/// Base for every error raised by the engine. The CLI maps subclasses onto
/// exit codes, the service onto HTTP status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed caller input (bad k, bad m, missing argument).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Data that cannot be used as-is: unreadable files, bad magic, missing ids.
class DataError : public Error {
 public:
  using Error::Error;
};

class IngestError : public DataError {
 public:
  IngestError(const std::string& what, std::size_t line)
      : DataError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IndexError : public DataError {
 public:
  using DataError::DataError;
};

class SamplingError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class PipelineError : public Error {
 public:
  using Error::Error;
};

class RewardError : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

}  // namespace evidentia
