#pragma once

#include <stdexcept>
#include <string>

namespace tapmerge {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller supplied an argument outside its documented domain.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Malformed, truncated or inconsistent data (files, schemas, reports).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Two weight maps (or feature sets) cannot be combined.
class SchemaMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

/// Non-finite values, divergence, undefined quantities, SVD failure.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// I/O failure or external process failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace tapmerge
