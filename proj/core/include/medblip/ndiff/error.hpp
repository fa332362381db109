#pragma once

#include <stdexcept>
#include <string>

namespace medblip {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the primitive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a primitive or found in a gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A frozen parameter was about to be modified.
class FreezeError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace medblip
