#pragma once

#include <stdexcept>
#include <string>

namespace evit {

// Root of every exception the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values or a violated numeric precondition (e.g. non-stochastic attention rows).
class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid model configuration or reorganization plan.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Caller misuse of an API (bad index sets, non-scalar loss, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace evit
