#include "tcal/softmax.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace tcal {

Tensor tempered_softmax(const Tensor& logits, std::span<const double> temperature) {
    if (logits.rank() != 4) {
        throw ValidationError(ValidationError::Kind::shape_mismatch, "logits", "logits must have shape [N,K,H,W]");
    }
    const std::size_t n_samples = logits.dim(0), classes = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    if (!temperature.empty() && temperature.size() != n_samples * hw) {
        throw ValidationError(ValidationError::Kind::shape_mismatch, "temperature",
                              "temperature map has " + std::to_string(temperature.size()) + " entries, expected " +
                                  std::to_string(n_samples * hw));
    }
    const auto z = logits.f32();
    Tensor out = Tensor::zeros(DType::f32, logits.shape());
    auto p = out.f32();
    std::vector<double> e(classes);
    for (std::size_t n = 0; n < n_samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            const std::size_t base = n * classes * hw + px;
            const double t = temperature.empty() ? 1.0 : temperature[n * hw + px];
            double top = -INFINITY;
            for (std::size_t c = 0; c < classes; ++c) {
                const double v = z[base + c * hw];
                if (!std::isfinite(v)) {
                    throw NumericalError("non-finite logit at sample " + std::to_string(n) + ", pixel " +
                                         std::to_string(px) + ", class " + std::to_string(c));
                }
                e[c] = v / t;
                top = std::max(top, e[c]);
            }
            double sum = 0.0;
            for (std::size_t c = 0; c < classes; ++c) {
                e[c] = std::exp(e[c] - top);
                sum += e[c];
            }
            for (std::size_t c = 0; c < classes; ++c) p[base + c * hw] = static_cast<float>(e[c] / sum);
        }
    }
    return out;
}

}  // namespace tcal
