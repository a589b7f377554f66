#pragma once

#include <stdexcept>
#include <string>

namespace alignlab {

// Base for every error raised by the library. The CLI maps the subclasses
// onto distinct process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not compose (matmul inner dims, row/col mismatches).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN or inf produced during a forward pass or in a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Token id or row index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Embedding sequences that cannot be concatenated into one decoder input.
class AssemblyError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad or inconsistent data files: manifests, feature stores, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

class TokenizerError : public DataError {
 public:
  using DataError::DataError;
};

class ScoringError : public DataError {
 public:
  using DataError::DataError;
};

class ReportError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace alignlab
