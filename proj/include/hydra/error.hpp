#pragma once

#include <stdexcept>
#include <string>

namespace hydra {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller handed over malformed input (shape mismatch, invalid distribution, ...).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Experiment or training configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow the expected binary or text layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file has the right layout but its payload is truncated or damaged.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

/// Persisted artifact cannot be restored (missing file, version mismatch, ...).
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Optimization diverged or produced non-finite values.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace hydra
