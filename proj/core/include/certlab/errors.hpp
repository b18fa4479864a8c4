#pragma once

#include <stdexcept>
#include <string>

namespace certlab {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A computation produced a non-finite value (NaN or infinity).
class NumericError : public Error {
public:
    using Error::Error;
};

// A file or byte stream does not decode (truncated, bad magic, bad field).
class ParseError : public Error {
public:
    using Error::Error;
};

// A file decodes but declares an unsupported schema version.
class SchemaError : public ParseError {
public:
    using ParseError::ParseError;
};

// Invalid configuration, flag, or argument value.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace certlab
