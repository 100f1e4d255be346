#pragma once

#include <stdexcept>
#include <string>

namespace dqs3d {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// The closed-form compensation only exists for quarter-turn rotations.
class UnsupportedRotation : public Error {
 public:
  using Error::Error;
};

class InvalidBox : public Error {
 public:
  using Error::Error;
};

class InvalidDeltas : public Error {
 public:
  using Error::Error;
};

/// Requested operation is outside what is implemented (e.g. IoU of yawed boxes).
class Unsupported : public Error {
 public:
  using Error::Error;
};

class NoCandidates : public Error {
 public:
  using Error::Error;
};

class GenerationFailure : public Error {
 public:
  using Error::Error;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class Divergence : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& location, const std::string& what)
      : Error(location + ": " + what), location_(location) {}

  const std::string& location() const noexcept { return location_; }

 private:
  std::string location_;
};

}  // namespace dqs3d
