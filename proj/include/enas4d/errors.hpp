#pragma once

#include <stdexcept>
#include <string>

namespace enas4d {

// Invalid user configuration or command-line usage.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Missing, unreadable or malformed input data (datasets, checkpoints, databases).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A violated internal invariant detected at run time.
struct InvariantError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace enas4d
