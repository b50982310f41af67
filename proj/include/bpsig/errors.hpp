#pragma once

#include <stdexcept>
#include <string>

namespace bpsig {

/// Malformed network, phase index out of range, observation/junction mismatch.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied parameters (routing rows, config fields, slopes).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was called outside its domain (short trajectory, light load).
class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bisection bracket does not straddle the stability frontier.
class BracketError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bpsig
