#pragma once

#include <stdexcept>
#include <string>

namespace emosup {

// Violated precondition: bad dimensions, bad configuration, frozen mutation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite loss or gradient, divergence.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A key (sample id, image ref, emotion word) that cannot be resolved.
class LookupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent file contents.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

}  // namespace emosup
