#pragma once

#include <span>

#include "tcal/tensor.hpp"

namespace tcal {

/// Per-pixel softmax(z / T) of [N,K,H,W] logits. `temperature` holds one
/// positive value per pixel in [N,H,W] order, or is empty for T = 1.
/// Exponentials are max-subtracted and evaluated in f64.
/// Throws NumericalError on non-finite logits.
[[nodiscard]] Tensor tempered_softmax(const Tensor& logits, std::span<const double> temperature);

}  // namespace tcal
