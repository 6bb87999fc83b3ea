#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace silencer {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Violated precondition on an argument (empty input, out-of-range fraction, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Tensor shapes or model/corpus dimensions disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced or consumed, or training diverged.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Configuration file missing, malformed, or inconsistent.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A constructed artifact failed its behavioral contract.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Run artifact missing, or produced by a different configuration.
class ArtifactError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated on-disk artifact. Carries the byte offset where parsing stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }
    /// Message without the offset suffix.
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
    std::size_t offset_;
};

} // namespace silencer
