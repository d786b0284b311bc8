#pragma once

#include <stdexcept>
#include <string>

namespace airdual {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Inputs too small or too degenerate to build anything meaningful.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A query left the extent of a raster.
class CoverageError : public Error {
 public:
  using Error::Error;
};

class DuplicateLocationError : public Error {
 public:
  using Error::Error;
};

/// Adaptive integration exceeded its step budget.
class StiffnessError : public Error {
 public:
  StiffnessError(const std::string& what, double t_reached)
      : Error(what), t_reached_(t_reached) {}
  double time_reached() const noexcept { return t_reached_; }

 private:
  double t_reached_;
};

/// NaN or Inf appeared in a right-hand side or a state.
class BlowupError : public Error {
 public:
  BlowupError(const std::string& what, double t)
      : Error(what), t_(t) {}
  double time() const noexcept { return t_; }

 private:
  double t_;
};

class InvariantViolation : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace airdual
