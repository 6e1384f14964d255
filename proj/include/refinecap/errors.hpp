#pragma once

#include <stdexcept>
#include <string>

namespace refinecap {

// Shape or rank mismatch; message names the op and the offending shapes.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gather/scatter index outside its table.
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke an API precondition (non-scalar loss, missing grad, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace refinecap
