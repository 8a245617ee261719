// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace rammerge {

/// Base of every error thrown by the library. `category()` lets callers map
/// failures onto stable exit codes without catching each subclass.
class Error : public std::runtime_error {
public:
    enum class Category { Format, Io, Alignment, Config, Data, Internal };

    Error(Category category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }

private:
    Category category_;
};

/// Malformed checkpoint header or data layout.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(Category::Format, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(Category::Io, what) {}
};

/// Tensor name absent from a checkpoint.
class NotFound : public Error {
public:
    explicit NotFound(const std::string& what) : Error(Category::Format, what) {}
};

/// Buffer length does not match a declared tensor shape.
class ShapeMismatch : public Error {
public:
    explicit ShapeMismatch(const std::string& what) : Error(Category::Data, what) {}
};

/// Two element-wise operands have different lengths.
class LengthMismatch : public Error {
public:
    explicit LengthMismatch(const std::string& what) : Error(Category::Data, what) {}
};

/// NaN or infinity encountered in a task vector or weight buffer.
class NonFiniteInput : public Error {
public:
    explicit NonFiniteInput(const std::string& what) : Error(Category::Data, what) {}
};

/// Streamed mask slices do not cover the declared parameter count.
class CoverageMismatch : public Error {
public:
    explicit CoverageMismatch(const std::string& what) : Error(Category::Data, what) {}
};

/// Negative Fisher weight.
class NegativeWeight : public Error {
public:
    explicit NegativeWeight(const std::string& what) : Error(Category::Data, what) {}
};

/// Hyperparameter or command-line value out of range.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(Category::Config, what) {}
};

/// A model (or Fisher file) does not structurally match the base checkpoint.
class AlignmentError : public Error {
public:
    enum class Reason { Missing, Extra, ShapeMismatch };

    AlignmentError(std::size_t model_index, std::string tensor, Reason reason,
                   const std::string& what)
        : Error(Category::Alignment, what),
          model_index_(model_index),
          tensor_(std::move(tensor)),
          reason_(reason) {}

    std::size_t model_index() const noexcept { return model_index_; }
    const std::string& tensor() const noexcept { return tensor_; }
    Reason reason() const noexcept { return reason_; }

private:
    std::size_t model_index_;
    std::string tensor_;
    Reason reason_;
};

const char* to_string(AlignmentError::Reason reason) noexcept;

}  // namespace rammerge
