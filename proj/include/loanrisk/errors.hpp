#pragma once

#include <stdexcept>
#include <string>

namespace loanrisk {

/// A configuration document failed validation. `key()` names the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Input data is malformed or inconsistent (CSV contents, dimension mismatches).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A binary or text artifact could not be decoded (truncation, version, schema hash).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, double learning_rate, const std::string& message)
      : std::runtime_error(message), epoch_(epoch), learning_rate_(learning_rate) {}
  int epoch() const noexcept { return epoch_; }
  double learning_rate() const noexcept { return learning_rate_; }

 private:
  int epoch_;
  double learning_rate_;
};

}  // namespace loanrisk
