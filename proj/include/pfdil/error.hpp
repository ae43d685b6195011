#pragma once

#include <stdexcept>
#include <string>

namespace pfdil {

enum class ErrorCategory { input, config, data, invariant };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

  const char* category_name() const noexcept {
    switch (category_) {
      case ErrorCategory::input: return "input";
      case ErrorCategory::config: return "config";
      case ErrorCategory::data: return "data";
      case ErrorCategory::invariant: return "invariant";
    }
    return "unknown";
  }

  // CLI exit codes: 2 config, 3 data (bad inputs count as data), 4 invariant.
  int exit_code() const noexcept {
    switch (category_) {
      case ErrorCategory::config: return 2;
      case ErrorCategory::input:
      case ErrorCategory::data: return 3;
      case ErrorCategory::invariant: return 4;
    }
    return 4;
  }

 private:
  ErrorCategory category_;
};

/// Bad arguments to a library operation (dimension mismatch, label out of range, empty batch).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorCategory::input, what) {}
};

/// Configuration rejected; `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(ErrorCategory::config, what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed or unreadable files and datasets.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCategory::data, what) {}
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what) : Error(ErrorCategory::invariant, what) {}
};

inline void ensure(bool condition, const std::string& what) {
  if (!condition) throw InvariantError(what);
}

}  // namespace pfdil
