#pragma once

#include <stdexcept>
#include <string>

namespace sam {

// Caller broke a documented precondition (dimension mismatch, stale cache,
// empty batch, ...).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad user-supplied configuration (out-of-range coefficient, unknown key).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A loss or gradient went NaN/inf; the run aborts rather than clamps.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyBufferError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Scripted expert failed its own task while generating demonstrations.
struct DemoQualityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Workers presented gradients for different modules or step indices.
struct SyncFault : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace sam
