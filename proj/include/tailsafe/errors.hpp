#pragma once

#include <stdexcept>
#include <string>

namespace tailsafe {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument lies outside the calibrated or admissible domain (maturity range, k-corridor).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Parameters or inputs that violate a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

/// A grid too small for the requested stencil or quadrature.
class InsufficientGridError : public Error {
public:
    using Error::Error;
};

/// Grid is malformed (e.g. no strike at or below the forward).
class StructuralError : public Error {
public:
    using Error::Error;
};

/// Two inputs that must share a layout do not (grids, pairing labels, brackets).
class ProtocolError : public Error {
public:
    using Error::Error;
};

class AdjustmentError : public Error {
public:
    using Error::Error;
};

class DegenerateError : public Error {
public:
    using Error::Error;
};

class ResourceError : public Error {
public:
    using Error::Error;
};

class AuditError : public Error {
public:
    using Error::Error;
};

/// Config schema violation; `path` names the offending key.
class ConfigError : public Error {
public:
    ConfigError(const std::string& path, const std::string& what)
        : Error(path + ": " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

}  // namespace tailsafe
