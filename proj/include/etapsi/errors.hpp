#pragma once

#include <stdexcept>
#include <string>

namespace etapsi {

// Precondition violated on a value (index out of range, shape mismatch, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Bad configuration key, type or value. The message names the key.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Enumeration would exceed its node/leaf cap.
struct ResourceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. a reused tape or sampling an empty buffer.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

struct UnsupportedOperation : std::logic_error {
  using std::logic_error::logic_error;
};

// A lookup table does not contain an entry it should contain.
struct ConsistencyError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace etapsi
