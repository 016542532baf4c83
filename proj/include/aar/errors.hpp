#pragma once

#include <stdexcept>
#include <string>

namespace aar {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// exit codes: usage/config -> 2, data/format -> 3, numerical -> 4.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad command line or bad configuration key/value.
struct usage_error : error {
  using error::error;
};
struct config_error : error {
  using error::error;
};

// Input data problems: unparsable files, broken invariants, missing records.
struct parse_error : error {
  using error::error;
};
struct format_error : error {
  using error::error;
};
struct validation_error : error {
  using error::error;
};
struct io_error : error {
  using error::error;
};

// A per-query annotation or mining failure (droppable during annotation).
struct annotation_error : error {
  using error::error;
};

// Caller violated an operation precondition.
struct contract_error : error {
  using error::error;
};

// Divergence, non-finite values, or other numerical failures.
struct numeric_error : error {
  using error::error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw contract_error(msg);
}

}  // namespace aar
