#pragma once

#include <cstddef>
#include <filesystem>
#include <string_view>

#include "tcal/tensor.hpp"

namespace tcal {

/// FCT1 layout (all integers little-endian):
///
///   offset 0   "FCT1"
///   offset 4   dtype code (0 = f32, 1 = i64)
///   offset 5   ndim (1..4)
///   offset 6   two zero bytes
///   offset 8   ndim x u64 dimension sizes
///   then       row-major payload
inline constexpr std::string_view fct1_magic = "FCT1";
inline constexpr std::size_t fct1_fixed_header_bytes = 8;

void write_tensor(const Tensor& tensor, const std::filesystem::path& path);
[[nodiscard]] Tensor read_tensor(const std::filesystem::path& path);

/// Encodes to / decodes from an in-memory FCT1 byte string.
[[nodiscard]] std::string encode_tensor(const Tensor& tensor);
[[nodiscard]] Tensor decode_tensor(std::string_view bytes, std::string_view source = "<memory>");

struct DatasetDims {
    std::size_t samples = 0;
    std::size_t classes = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t lead_times = 0;  ///< max lead-time index + 1

    [[nodiscard]] std::size_t pixels_per_sample() const { return height * width; }
    [[nodiscard]] std::size_t pixels() const { return samples * height * width; }
    friend bool operator==(const DatasetDims&, const DatasetDims&) = default;
};

/// Checks logits [N,K,H,W] f32, labels [N,H,W] i64 in 0..K-1 and lead_times
/// [N] i64 >= 0. When `lead_time_count` is non-zero lead times must also be
/// below it; otherwise L is taken as max(lead_times) + 1.
[[nodiscard]] DatasetDims validate_dataset(const Tensor& logits, const Tensor& labels, const Tensor& lead_times,
                                           std::size_t lead_time_count = 0);

/// Same checks with probabilities in place of logits (dtype/shape only).
[[nodiscard]] DatasetDims validate_probabilities(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                                                 std::size_t lead_time_count = 0);

}  // namespace tcal
