#pragma once

#include <stdexcept>
#include <string>

namespace chainod {

// Malformed scenario, mismatched dimensions, unknown keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Linear algebra failure (singular innovation covariance and the like).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation called before its prerequisites exist.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Trip chain that cannot be realised on the declared legs.
class ChainError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace chainod
