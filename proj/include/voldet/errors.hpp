#pragma once

#include <stdexcept>
#include <string>

namespace voldet {

/// Tensor/array dimensions do not line up. Message names the offending axis.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Malformed text input (config, CSV, manifest). Message names the line.
class ParseError : public std::runtime_error {
public:
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss or gradient during optimization.
class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Phantom generation could not satisfy its packing constraints.
class GenerationError : public std::runtime_error {
public:
    explicit GenerationError(const std::string& what) : std::runtime_error(what) {}
};

/// A loss batch violates a normalization precondition (e.g. no positives
/// under the vanilla focal form).
class DegenerateBatchError : public std::runtime_error {
public:
    explicit DegenerateBatchError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace voldet
