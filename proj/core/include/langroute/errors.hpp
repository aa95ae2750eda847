#pragma once

#include <stdexcept>
#include <string>

namespace langroute {

// Error taxonomy used across the library. The CLI maps these to exit codes:
// usage 1, contract/data 2, numeric 3.

// Violated precondition or shape contract (programming or caller error).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Malformed or inconsistent external data (files, manifests, lookups).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or numerically degenerate computations.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace langroute
