#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "tcal/errors.hpp"

namespace tcal {

enum class DType : std::uint8_t { f32 = 0, i64 = 1 };

inline constexpr std::size_t max_tensor_rank = 4;

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t element_count(const Shape& shape);
[[nodiscard]] std::string shape_string(const Shape& shape);

/// Dense row-major tensor holding either f32 or i64 values.
///
/// Shape has 1 to 4 dimensions, each at least 1, and the flat buffer always
/// holds exactly product(shape) elements.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(DType dtype, Shape shape);
    static Tensor from_f32(Shape shape, std::vector<float> data);
    static Tensor from_i64(Shape shape, std::vector<std::int64_t> data);

    [[nodiscard]] DType dtype() const noexcept { return dtype_; }
    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
    [[nodiscard]] std::size_t size() const noexcept { return element_count(shape_); }

    [[nodiscard]] std::span<const float> f32() const;
    [[nodiscard]] std::span<float> f32();
    [[nodiscard]] std::span<const std::int64_t> i64() const;
    [[nodiscard]] std::span<std::int64_t> i64();

    /// Flat f32 buffer as an Eigen column vector.
    [[nodiscard]] Eigen::Map<const Eigen::ArrayXf> f32_array() const;

    /// Bitwise equality of dtype, shape and payload.
    friend bool operator==(const Tensor& a, const Tensor& b);

private:
    Tensor(DType dtype, Shape shape, std::variant<std::vector<float>, std::vector<std::int64_t>> data);

    DType dtype_ = DType::f32;
    Shape shape_;
    std::variant<std::vector<float>, std::vector<std::int64_t>> data_;
};

}  // namespace tcal
