#pragma once

#include <stdexcept>
#include <string>

namespace seqvc {

// Violated precondition: bad shapes, invalid config, malformed files.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced during a forward pass, a gradient, or an optimizer step.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace seqvc
