#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace upp {

// Invalid arguments, out-of-range configuration, malformed inputs.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failures of a numerical procedure on otherwise valid inputs.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No nonnegative power assignment within the heater limit reproduces the
// requested phases.
class InfeasiblePowerError : public NumericalError {
 public:
  InfeasiblePowerError(const std::string& what, std::vector<int> heaters)
      : NumericalError(what), heaters_(std::move(heaters)) {}

  const std::vector<int>& heaters() const noexcept { return heaters_; }

 private:
  std::vector<int> heaters_;
};

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace detail
}  // namespace upp
