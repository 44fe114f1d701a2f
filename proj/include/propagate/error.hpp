#pragma once

#include <stdexcept>
#include <string>

namespace propagate {

// Base for all library errors. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Unreadable or malformed input stream/file.
class InputError : public Error {
  public:
    using Error::Error;
};

// Input was readable but held no usable records.
class EmptyDatasetError : public Error {
  public:
    using Error::Error;
};

// Length or shape mismatch between arguments.
class ShapeError : public Error {
  public:
    using Error::Error;
};

// Non-finite value produced while evaluating a model.
class EvaluationError : public Error {
  public:
    using Error::Error;
};

// Integration failure at a known time (step underflow, divergence, budget).
class SolverError : public Error {
  public:
    enum class Kind { stiffness, budget, divergence };

    SolverError(Kind kind, double time, const std::string& what)
        : Error(what), kind_(kind), time_(time)
    {}

    Kind kind() const noexcept { return kind_; }
    double time() const noexcept { return time_; }

  private:
    Kind kind_;
    double time_;
};

class SingularError : public Error {
  public:
    using Error::Error;
};

class FitError : public Error {
  public:
    using Error::Error;
};

// A file was well-formed but of the wrong kind for the request.
class ArtifactError : public Error {
  public:
    using Error::Error;
};

} // namespace propagate
