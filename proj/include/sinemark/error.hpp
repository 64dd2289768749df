#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sinemark {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied data that violates an operation's preconditions
/// (non-finite values, dimension mismatch, malformed key, ...).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent configuration. `where` names the offending
/// field or line so the CLI can report it.
class ConfigError : public Error {
 public:
  ConfigError(std::string where, const std::string& what)
      : Error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class InsufficientData : public Error {
 public:
  InsufficientData(std::size_t available, std::size_t required, const std::string& context)
      : Error(context + ": " + std::to_string(available) + " usable points, need at least " +
              std::to_string(required)),
        available_(available) {}
  std::size_t available() const noexcept { return available_; }

 private:
  std::size_t available_;
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(std::size_t epoch, const std::string& what)
      : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class DuplicateKey : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sinemark
