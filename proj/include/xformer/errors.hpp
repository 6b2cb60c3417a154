#pragma once

#include <stdexcept>
#include <string>

namespace xf {

/// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition (wrong mode, missing operand, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// NaN/Inf produced or consumed somewhere it must not be.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed file, config or record stream.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Procrustes alignment on a degenerate (rank < 2) point set.
class AlignmentError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace xf
