#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace valp {

/// Raised when matrix or layer dimensions do not chain.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised by the model checkpoint and config readers. Carries a 1-based position.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line, std::size_t column = 0)
        : std::runtime_error(format(what, line, column)), line_(line), column_(column) {}

    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }

private:
    static std::string format(const std::string& what, std::size_t line, std::size_t column) {
        std::string out = "line " + std::to_string(line);
        if (column != 0) out += ", column " + std::to_string(column);
        return out + ": " + what;
    }

    std::size_t line_;
    std::size_t column_;
};

/// Raised when an operation receives a model that fails validation.
class InvalidModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when an operator is requested on a model where it is not applicable.
class GuardError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a training loss becomes non-finite.
class TrainingDivergedError : public std::runtime_error {
public:
    explicit TrainingDivergedError(std::size_t batch)
        : std::runtime_error("training diverged at batch " + std::to_string(batch)), batch_(batch) {}

    std::size_t batch() const noexcept { return batch_; }

private:
    std::size_t batch_;
};

/// Raised when an experiment configuration is malformed or violates an invariant.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace valp
