#pragma once

#include <stdexcept>
#include <string>

namespace seqdiff {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN/Inf in values, gradients or states.
class NumericError : public Error {
public:
    using Error::Error;
};

// Caller violated a precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Marginal mask probabilities decreased between consecutive steps.
class MonotonicityError : public ContractError {
public:
    using ContractError::ContractError;
};

// Requested feature is not available for the chosen configuration.
class UnsupportedError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class DataError : public Error {
public:
    using Error::Error;
};

class CorruptFileError : public Error {
public:
    using Error::Error;
};

class VersionError : public Error {
public:
    using Error::Error;
};

}  // namespace seqdiff
