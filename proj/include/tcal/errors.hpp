#pragma once

#include <stdexcept>
#include <string>

namespace tcal {

/// Malformed FCT1 file or failed file I/O.
class FormatError : public std::runtime_error {
public:
    enum class Kind { io_failure, bad_magic, unknown_dtype, too_many_dims, bad_shape, truncated };

    FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    [[nodiscard]] Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Dataset or argument contents violate a contract (shapes, dtypes, label ranges).
class ValidationError : public std::runtime_error {
public:
    enum class Kind { shape_mismatch, dtype_mismatch, out_of_range, empty, incompatible };

    ValidationError(Kind kind, std::string tensor, const std::string& what)
        : std::runtime_error(what), kind_(kind), tensor_(std::move(tensor)) {}

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    /// Name of the offending tensor ("logits", "labels", ...), may be empty.
    [[nodiscard]] const std::string& tensor() const noexcept { return tensor_; }

private:
    Kind kind_;
    std::string tensor_;
};

/// NaN/Inf inputs, diverged training, and other numerical failures.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tcal
