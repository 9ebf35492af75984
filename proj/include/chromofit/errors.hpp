#pragma once

#include <stdexcept>
#include <string>

namespace chromofit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied value or argument is out of its allowed range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An operation received a patch tagged with the wrong color space.
class SpaceMismatchError : public Error {
 public:
  using Error::Error;
};

/// Two operands have incompatible dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A region of interest does not fit inside its parent image.
class RoiError : public Error {
 public:
  using Error::Error;
};

/// Input samples cannot support the requested estimate (too few, rank deficient).
class DegenerateSamplesError : public Error {
 public:
  using Error::Error;
};

/// Geometry for a linear fit is degenerate.
class RankError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, int iterations)
      : Error(what), iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

/// File or stream level failure (unreadable PNG, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace chromofit
