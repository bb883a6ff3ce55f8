#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hypograd {

/// Malformed or inconsistent input: bad dimensions, missing keys, schema drift.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The model cannot be used at all (e.g. singular sigma).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A construction whose hypotheses do not hold for this model (wrong case).
class NotApplicable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An estimator or delta routine called outside its domain of validity.
class MethodMisuse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A single path could not be processed (non-finite state, singular Gramian).
class PathDegenerate : public std::runtime_error {
 public:
  PathDegenerate(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Too many rejected paths in one run.
class RunDegenerate : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hypograd
