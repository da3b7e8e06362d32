#pragma once

#include <stdexcept>
#include <string>

namespace crn {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or resolutions that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Requested size exceeds what a model was configured to handle.
class CapacityError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Archive or manifest contents do not match the expected schema.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// A numerical invariant (partition of unity, finiteness, ...) was violated.
class InvariantError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

}  // namespace crn
