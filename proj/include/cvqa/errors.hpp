#pragma once

#include <stdexcept>
#include <string>

namespace cvqa {

// Invalid generator / run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Incompatible array shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: bad indices, negative entropies, gradients off the graph.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Dataset or checkpoint contents fail verification.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cvqa
