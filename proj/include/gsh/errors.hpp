#pragma once

#include <stdexcept>
#include <string>

namespace gsh {

/// Tensor shapes incompatible with an operation contract.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structurally invalid input: bad group map, bad probability, bad skeleton, ...
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent or out-of-range configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Distinguishable serialization failures.
enum class IoErrorCode {
  io_failure,
  bad_magic,
  version_mismatch,
  truncated,
  corrupted_length,
  skeleton_mismatch,
  nan_payload,
  bad_format,
};

class IoError : public std::runtime_error {
 public:
  IoError(IoErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  IoErrorCode code() const { return code_; }

 private:
  IoErrorCode code_;
};

/// Raised when training hits a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gsh
