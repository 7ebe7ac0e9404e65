#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace matseq {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Lattice angles that do not close a positive-volume cell.
struct DegenerateCellError : Error {
    using Error::Error;
};

// Element symbol or atomic number outside the supported set / missing table row.
struct UnknownElementError : Error {
    using Error::Error;
};

// Value outside the documented domain of an operation (coordinates, bins, ...).
struct OutOfRangeError : Error {
    using Error::Error;
};

// Iterative cell reduction did not settle within the step cap.
struct NonConvergenceError : Error {
    using Error::Error;
};

struct EmptyTableError : Error {
    using Error::Error;
};

// (element, oxidation state) pair absent from the vocabulary.
struct UnknownElementOxiError : Error {
    using Error::Error;
};

struct SequenceTooLongError : Error {
    using Error::Error;
};

struct OddHeadDimError : Error {
    using Error::Error;
};

struct UnknownConditionError : Error {
    using Error::Error;
};

// Stoichiometric count above the formula embedding table.
struct StoichOutOfTableError : Error {
    using Error::Error;
};

struct EmptyTargetsError : Error {
    using Error::Error;
};

struct NonFiniteLossError : Error {
    using Error::Error;
};

struct NoAllowedTokenError : Error {
    using Error::Error;
};

struct TooFewSamplesError : Error {
    using Error::Error;
};

struct EmptyCorpusError : Error {
    using Error::Error;
};

// Malformed corpus/table content. `line` is 1-based; the message carries the
// aggregated per-line report.
struct ParseError : Error {
    std::size_t line;
    ParseError(std::size_t line_number, const std::string& what)
        : Error("line " + std::to_string(line_number) + ": " + what), line(line_number) {}
};

// Train/val split would leave one side empty.
struct TooSmallError : Error {
    using Error::Error;
};

struct NegativeValueError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace matseq
