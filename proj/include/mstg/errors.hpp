#pragma once

#include <stdexcept>
#include <string>

namespace mstg {

// Operand shapes violate an op contract.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An op produced NaN or Inf from its inputs.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Misuse of the gradient tape (non-scalar loss, reuse after backward, ...).
struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// Configuration or argument rejected at load time. `key` names the offending
// config key path when there is one.
class ValidationError : public std::invalid_argument {
 public:
  ValidationError(std::string key, const std::string& message)
      : std::invalid_argument(key.empty() ? message : key + ": " + message),
        key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Malformed feature, annotation or checkpoint file.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace mstg
