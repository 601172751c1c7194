#pragma once

#include <stdexcept>
#include <string>

namespace maskveil {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition or argument violation (bad dimensions, out-of-range values).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A linear system could not be solved (rank deficiency, zero denominator).
class SingularityError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Unreadable or unwritable file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// The requested misclassification rate cannot be reached even at the
/// loosest perceptual budget.
class UnreachableTargetError : public Error {
 public:
  UnreachableTargetError(const std::string& what, double best_fc)
      : Error(what), best_fc_(best_fc) {}

  double best_fc() const noexcept { return best_fc_; }

 private:
  double best_fc_;
};

}  // namespace maskveil
