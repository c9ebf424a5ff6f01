#pragma once

#include <stdexcept>
#include <string>

namespace dlsync {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 2 ("data error").
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Tensor, basis or coefficient dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the documented domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity detected in activations, losses or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class E = DomainError>
inline void require(bool ok, const std::string& message) {
  if (!ok) throw E(message);
}

}  // namespace detail
}  // namespace dlsync
