#pragma once

#include <stdexcept>
#include <string>

namespace hts {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (bad label, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Mathematically undefined request, e.g. a reduction over an empty axis.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong state (inference without running stats).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed bytes in a tensor, checkpoint, image or manifest file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint contents disagree with the expected parameter schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hts
