#pragma once

#include <stdexcept>
#include <string>

namespace mixdiff {

/// Precondition violated by the caller (bad index, shape, range).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed, truncated or inconsistent file/directory content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpoint or dataset does not match the expected model manifest.
class ManifestMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Non-finite value encountered during training, evaluation or gradient checks.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw embedding vector with (near) zero norm.
class DegenerateEmbedding : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace mixdiff
