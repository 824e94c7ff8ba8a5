#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedmsa {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension mismatch, non-square input or asymmetric input.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Non-positive pivot during a Cholesky factorization.
class DefinitenessError : public Error {
 public:
  using Error::Error;
};

// A closed-form bound was evaluated outside the regime where it holds.
class RegimeError : public Error {
 public:
  using Error::Error;
};

// Invalid parameters for a problem instance, dataset or partition.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

class UnsupportedProblemError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A non-finite iterate was produced during a run.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t round, const std::string& what)
      : Error("diverged at round " + std::to_string(round) + ": " + what),
        round_(round) {}

  std::size_t round() const noexcept { return round_; }

 private:
  std::size_t round_;
};

}  // namespace fedmsa
