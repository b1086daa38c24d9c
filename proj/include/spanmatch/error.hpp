#pragma once

#include <stdexcept>
#include <string>

namespace spanmatch {

// Bad input from the outside world: malformed files, missing embeddings,
// infeasible sampling requests. The CLI maps these to exit code 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A broken internal contract (shape mismatch, empty attention, non-finite
// values). The CLI maps these to exit code 2.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace spanmatch
