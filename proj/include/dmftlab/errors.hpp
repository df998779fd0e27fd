#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dmftlab {

// Bad argument: non-finite input, out-of-domain parameter, mismatched sizes.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A combination the implementation does not cover (e.g. non-Gaussian prior
// handed to a Gaussian-only oracle).
class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IllConditionedError : public std::runtime_error {
 public:
  IllConditionedError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class PrecisionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace dmftlab
