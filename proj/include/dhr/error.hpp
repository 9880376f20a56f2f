#ifndef DHR_ERROR_HPP
#define DHR_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dhr {

// Shape or binding mismatch between a generator and its inputs.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed a value outside an operation's domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A masked loss was requested over a region with no pixels.
class DegenerateRegionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when an optimization produces a NaN/Inf loss. Carries the step and
// branch so the caller can write a diagnostic snapshot.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::size_t step, std::string branch, double value)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + " (" + branch +
                           " branch): " + std::to_string(value)),
        step_(step),
        branch_(std::move(branch)),
        value_(value) {}

  std::size_t step() const noexcept { return step_; }
  const std::string& branch() const noexcept { return branch_; }
  double value() const noexcept { return value_; }

 private:
  std::size_t step_;
  std::string branch_;
  double value_;
};

}  // namespace dhr

#endif  // DHR_ERROR_HPP
