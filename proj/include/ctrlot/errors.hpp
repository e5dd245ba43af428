#pragma once

#include <stdexcept>
#include <string>

namespace ctrlot {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class UnsupportedSystem : public Error {
 public:
  using Error::Error;
};

class InvalidCost : public Error {
 public:
  using Error::Error;
};

class SingularGramian : public Error {
 public:
  using Error::Error;
};

class InvalidMeasure : public Error {
 public:
  using Error::Error;
};

class InfeasibleCost : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  SchemaError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Non-finite state hit during integration.
class DivergenceError : public Error {
 public:
  DivergenceError(int step, const std::string& what)
      : Error("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

class FiniteEscape : public Error {
 public:
  explicit FiniteEscape(double time)
      : Error("Riccati solution escapes at t = " + std::to_string(time)), time_(time) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

}  // namespace ctrlot
