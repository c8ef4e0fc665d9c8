#pragma once

#include <stdexcept>
#include <string>

namespace enkf {

// Base for every library error; runtime failures surface as exit code 1 in the CLI.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class SingularInnerSolve : public Error {
 public:
  using Error::Error;
};

class InvalidParams : public Error {
 public:
  using Error::Error;
};

class InvalidChain : public Error {
 public:
  using Error::Error;
};

class DivergentMode : public Error {
 public:
  DivergentMode(const std::string& what, int mode) : Error(what), mode_(mode) {}
  int mode() const { return mode_; }

 private:
  int mode_;
};

class NoConvergence : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Configuration problems; the CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace enkf
