#include "tcal/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <sstream>

namespace tcal {

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > max_tensor_rank) {
        throw FormatError(FormatError::Kind::too_many_dims,
                          "tensor rank must be 1.." + std::to_string(max_tensor_rank) + ", got " +
                              std::to_string(shape.size()));
    }
    if (std::ranges::any_of(shape, [](std::size_t d) { return d == 0; })) {
        throw FormatError(FormatError::Kind::bad_shape, "tensor dimensions must be >= 1, got " + shape_string(shape));
    }
}

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

template <std::size_t N>
void put_le(std::string& out, std::uint64_t value) {
    for (std::size_t i = 0; i < N; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
}

template <std::size_t N>
std::uint64_t get_le(const unsigned char* p) {
    std::uint64_t value = 0;
    for (std::size_t i = 0; i < N; ++i) value |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return value;
}

}  // namespace

Tensor::Tensor(DType dtype, Shape shape, std::variant<std::vector<float>, std::vector<std::int64_t>> data)
    : dtype_(dtype), shape_(std::move(shape)), data_(std::move(data)) {}

Tensor Tensor::zeros(DType dtype, Shape shape) {
    check_shape(shape);
    const std::size_t n = element_count(shape);
    if (dtype == DType::f32) return {dtype, std::move(shape), std::vector<float>(n, 0.0f)};
    return {dtype, std::move(shape), std::vector<std::int64_t>(n, 0)};
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> data) {
    check_shape(shape);
    if (data.size() != element_count(shape)) {
        throw FormatError(FormatError::Kind::bad_shape, "f32 data length " + std::to_string(data.size()) +
                                                            " does not match shape " + shape_string(shape));
    }
    return {DType::f32, std::move(shape), std::move(data)};
}

Tensor Tensor::from_i64(Shape shape, std::vector<std::int64_t> data) {
    check_shape(shape);
    if (data.size() != element_count(shape)) {
        throw FormatError(FormatError::Kind::bad_shape, "i64 data length " + std::to_string(data.size()) +
                                                            " does not match shape " + shape_string(shape));
    }
    return {DType::i64, std::move(shape), std::move(data)};
}

std::span<const float> Tensor::f32() const {
    if (dtype_ != DType::f32) throw ValidationError(ValidationError::Kind::dtype_mismatch, "", "tensor is not f32");
    return std::get<std::vector<float>>(data_);
}

std::span<float> Tensor::f32() {
    if (dtype_ != DType::f32) throw ValidationError(ValidationError::Kind::dtype_mismatch, "", "tensor is not f32");
    return std::get<std::vector<float>>(data_);
}

std::span<const std::int64_t> Tensor::i64() const {
    if (dtype_ != DType::i64) throw ValidationError(ValidationError::Kind::dtype_mismatch, "", "tensor is not i64");
    return std::get<std::vector<std::int64_t>>(data_);
}

std::span<std::int64_t> Tensor::i64() {
    if (dtype_ != DType::i64) throw ValidationError(ValidationError::Kind::dtype_mismatch, "", "tensor is not i64");
    return std::get<std::vector<std::int64_t>>(data_);
}

Eigen::Map<const Eigen::ArrayXf> Tensor::f32_array() const {
    const auto values = f32();
    return {values.data(), static_cast<Eigen::Index>(values.size())};
}

bool operator==(const Tensor& a, const Tensor& b) {
    if (a.dtype_ != b.dtype_ || a.shape_ != b.shape_) return false;
    if (a.dtype_ == DType::i64) return std::ranges::equal(a.i64(), b.i64());
    // Compare bit patterns so NaN payloads and signed zeros count.
    const auto x = a.f32();
    const auto y = b.f32();
    return std::equal(x.begin(), x.end(), y.begin(), y.end(), [](float p, float q) {
        return std::bit_cast<std::uint32_t>(p) == std::bit_cast<std::uint32_t>(q);
    });
}

std::string encode_tensor(const Tensor& tensor) {
    std::string out;
    out.reserve(fct1_fixed_header_bytes + 8 * tensor.rank() + dtype_size(tensor.dtype()) * tensor.size());
    out.append(fct1_magic);
    out.push_back(static_cast<char>(tensor.dtype()));
    out.push_back(static_cast<char>(tensor.rank()));
    out.push_back('\0');
    out.push_back('\0');
    for (std::size_t d : tensor.shape()) put_le<8>(out, d);
    if (tensor.dtype() == DType::f32) {
        for (float v : tensor.f32()) put_le<4>(out, std::bit_cast<std::uint32_t>(v));
    } else {
        for (std::int64_t v : tensor.i64()) put_le<8>(out, static_cast<std::uint64_t>(v));
    }
    return out;
}

Tensor decode_tensor(std::string_view bytes, std::string_view source) {
    const std::string where(source);
    if (bytes.size() < fct1_fixed_header_bytes) {
        throw FormatError(FormatError::Kind::truncated, where + ": file shorter than FCT1 header");
    }
    if (bytes.substr(0, 4) != fct1_magic) throw FormatError(FormatError::Kind::bad_magic, where + ": bad magic");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const unsigned dtype_code = p[4];
    if (dtype_code > 1) {
        throw FormatError(FormatError::Kind::unknown_dtype,
                          where + ": unknown dtype code " + std::to_string(dtype_code));
    }
    const auto dtype = static_cast<DType>(dtype_code);
    const std::size_t ndim = p[5];
    if (ndim == 0 || ndim > max_tensor_rank) {
        throw FormatError(FormatError::Kind::too_many_dims, where + ": ndim " + std::to_string(ndim) + " not in 1..4");
    }
    const std::size_t header = fct1_fixed_header_bytes + 8 * ndim;
    if (bytes.size() < header) throw FormatError(FormatError::Kind::truncated, where + ": truncated shape block");

    Shape shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i) {
        const std::uint64_t d = get_le<8>(p + fct1_fixed_header_bytes + 8 * i);
        if (d == 0) throw FormatError(FormatError::Kind::bad_shape, where + ": zero-sized dimension");
        shape[i] = static_cast<std::size_t>(d);
    }
    // Guard the product against overflow before comparing with the file size.
    std::size_t count = 1;
    const std::size_t limit = (bytes.size() - header) / dtype_size(dtype);
    for (std::size_t d : shape) {
        if (d > limit || count > limit / d) {
            throw FormatError(FormatError::Kind::truncated, where + ": payload shorter than shape " + shape_string(shape));
        }
        count *= d;
    }
    const std::size_t payload = count * dtype_size(dtype);
    if (bytes.size() - header != payload) {
        throw FormatError(bytes.size() - header < payload ? FormatError::Kind::truncated : FormatError::Kind::bad_shape,
                          where + ": payload is " + std::to_string(bytes.size() - header) + " bytes, expected " +
                              std::to_string(payload));
    }

    const unsigned char* body = p + header;
    if (dtype == DType::f32) {
        std::vector<float> data(count);
        for (std::size_t i = 0; i < count; ++i) {
            data[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le<4>(body + 4 * i)));
        }
        return Tensor::from_f32(std::move(shape), std::move(data));
    }
    std::vector<std::int64_t> data(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<std::int64_t>(get_le<8>(body + 8 * i));
    return Tensor::from_i64(std::move(shape), std::move(data));
}

void write_tensor(const Tensor& tensor, const std::filesystem::path& path) {
    const std::string bytes = encode_tensor(tensor);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io_failure, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io_failure, "write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io_failure, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw FormatError(FormatError::Kind::io_failure, "read failed: " + path.string());
    return decode_tensor(bytes, path.string());
}

namespace {

using VK = ValidationError::Kind;

DatasetDims validate_common(const Tensor& field, const char* field_name, const Tensor& labels,
                            const Tensor& lead_times, std::size_t lead_time_count) {
    if (field.dtype() != DType::f32) {
        throw ValidationError(VK::dtype_mismatch, field_name, std::string(field_name) + " must be f32");
    }
    if (field.rank() != 4) {
        throw ValidationError(VK::shape_mismatch, field_name,
                              std::string(field_name) + " must have shape [N,K,H,W], got " + shape_string(field.shape()));
    }
    DatasetDims dims{field.dim(0), field.dim(1), field.dim(2), field.dim(3), 0};

    if (labels.dtype() != DType::i64) throw ValidationError(VK::dtype_mismatch, "labels", "labels must be i64");
    if (labels.shape() != Shape{dims.samples, dims.height, dims.width}) {
        throw ValidationError(VK::shape_mismatch, "labels",
                              "labels shape " + shape_string(labels.shape()) + " does not match " + field_name + " " +
                                  shape_string(field.shape()) + " (expected [N,H,W])");
    }
    if (lead_times.dtype() != DType::i64) {
        throw ValidationError(VK::dtype_mismatch, "lead_times", "lead_times must be i64");
    }
    if (lead_times.shape() != Shape{dims.samples}) {
        throw ValidationError(VK::shape_mismatch, "lead_times",
                              "lead_times shape " + shape_string(lead_times.shape()) + " does not match [N] with N=" +
                                  std::to_string(dims.samples));
    }

    const auto k = static_cast<std::int64_t>(dims.classes);
    for (std::int64_t y : labels.i64()) {
        if (y < 0 || y >= k) {
            throw ValidationError(VK::out_of_range, "labels",
                                  "label value " + std::to_string(y) + " outside 0.." + std::to_string(k - 1));
        }
    }
    std::int64_t max_lead = 0;
    for (std::int64_t l : lead_times.i64()) {
        if (l < 0 || (lead_time_count != 0 && l >= static_cast<std::int64_t>(lead_time_count))) {
            throw ValidationError(VK::out_of_range, "lead_times", "lead time index " + std::to_string(l) + " out of range");
        }
        max_lead = std::max(max_lead, l);
    }
    dims.lead_times = lead_time_count != 0 ? lead_time_count : static_cast<std::size_t>(max_lead) + 1;
    return dims;
}

}  // namespace

DatasetDims validate_dataset(const Tensor& logits, const Tensor& labels, const Tensor& lead_times,
                             std::size_t lead_time_count) {
    return validate_common(logits, "logits", labels, lead_times, lead_time_count);
}

DatasetDims validate_probabilities(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                                   std::size_t lead_time_count) {
    return validate_common(probs, "probs", labels, lead_times, lead_time_count);
}

}  // namespace tcal
