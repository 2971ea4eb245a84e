#pragma once

#include <stdexcept>
#include <string>

namespace metakgr {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input file; carries a 1-based line number where applicable.
struct ParseError : Error {
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line(line) {}
    explicit ParseError(const std::string& what) : Error(what), line(0) {}
    std::size_t line;
};

/// Entity/relation id outside the vocabulary, or row index outside a table.
struct LookupError : Error {
    using Error::Error;
};

/// Tensor shapes do not conform to the operation.
struct ShapeError : Error {
    using Error::Error;
};

/// API precondition violated (empty batch, wrong path length, reused tape, ...).
struct ContractError : Error {
    using Error::Error;
};

/// Non-finite value produced or consumed.
struct NumericError : Error {
    using Error::Error;
};

/// Every candidate action was masked out.
struct InvalidActionSetError : Error {
    using Error::Error;
};

/// On-disk format problems (bad magic, version, truncation).
struct FormatError : Error {
    using Error::Error;
};

/// Evaluation-protocol violation (e.g. meta-test before the schedule is frozen).
struct ProtocolError : Error {
    using Error::Error;
};

/// Synthetic dataset spec cannot be satisfied.
struct GenerationError : Error {
    using Error::Error;
};

/// Bad experiment configuration (unknown keys, missing files, invalid values).
struct ConfigError : Error {
    using Error::Error;
};

} // namespace metakgr
