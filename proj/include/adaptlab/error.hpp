#pragma once

#include <stdexcept>
#include <string>

namespace adaptlab {

// Shape or dimension disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A precondition on argument values was violated.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf surfaced during a computation that must stay finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A frozen tensor changed during adaptation.
class FreezeViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or schema-violating configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint or other required artifact is absent or unreadable.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace adaptlab
