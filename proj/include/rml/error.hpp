#pragma once

#include <stdexcept>
#include <string>

namespace rml {

/// Invalid user-supplied configuration (zero identities, bad rates, ...).
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Tensor/vector dimension mismatch.
struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition between cooperating components was violated.
struct contract_error : std::logic_error {
  using std::logic_error::logic_error;
};

/// Same-identity-avoiding text shuffle cannot be constructed.
struct noise_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite value where a finite one is required.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File parse/serialize failure; message carries the line number when known.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Retrieval evaluation cannot proceed (e.g. a query without relevant items).
struct eval_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rml
