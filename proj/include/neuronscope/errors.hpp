#pragma once

#include <stdexcept>
#include <string>

namespace neuronscope {

/// Base error. Subclasses map to CLI exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad arguments, invalid configuration, contract violations. Exit code 2.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

/// Missing or malformed artifact (file, fingerprint, lineage). Exit code 3.
class ArtifactError : public Error {
 public:
  explicit ArtifactError(const std::string& msg) : Error(msg) {}
};

/// Numerical failure (divergence, non-finite values). Exit code 4.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace neuronscope
