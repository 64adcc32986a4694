#pragma once

#include <stdexcept>
#include <string>

namespace qalas {

// Base of every error the toolkit throws. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

// Argument outside the physical domain of an operator (e.g. T1 <= 0).
class DomainError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "domain"; }
};

// Configuration that cannot describe a runnable sequence, grid or network.
class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "shape"; }
};

// Malformed or inconsistent file on disk.
class FormatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "format"; }
};

// Checkpoint / volume / config fingerprints disagree.
class CompatibilityError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "compatibility"; }
};

// Non-finite values, singular fixed points, diverging training.
class NumericError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numeric"; }
};

// Statistic or normalization undefined for the given input (zero variance, empty mask, ...).
class DegenerateError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "degenerate"; }
};

// Violated API precondition (e.g. backward() from a non-scalar node).
class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract"; }
};

} // namespace qalas
