#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tcal/diffnet/network.hpp"
#include "tcal/tensor.hpp"

namespace tcal {

/// Provenance recorded with every fitted calibrator.
struct FitMetadata {
    std::size_t samples = 0;
    std::size_t pixels = 0;
    std::size_t classes = 0;
    std::size_t lead_times = 0;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    double final_loss = 0.0;
    std::string dataset_digest;  ///< content digest of the fit logits, when known
    std::vector<std::string> notes;
};

/// One temperature shared by every pixel.
struct GlobalTemperature {
    double temperature = 1.0;
    FitMetadata fit;
};

/// Per-channel standardisation of max-subtracted logits, measured on fit data.
struct InputNormalizer {
    std::vector<float> mean;
    std::vector<float> scale;

    [[nodiscard]] static InputNormalizer identity(std::size_t classes);
    [[nodiscard]] static InputNormalizer measure(const Tensor& logits);

    /// [N,K,H,W] logits -> K x (N*H*W) network input, column = (sample, pixel).
    [[nodiscard]] diffnet::Matrix<float> features(const Tensor& logits) const;
};

/// Per-pixel temperature regressor: T(x) = exp(t(x)) with t from a small
/// multi-scale CNN over the logit field, optionally FiLM-conditioned on lead time.
struct LtsRegressor {
    diffnet::Network<float> network;
    InputNormalizer normalizer;
    bool conditioned = true;
    FitMetadata fit;
};

/// Misprediction classifier plus a temperature T_ss = 1 + softplus(a) > 1
/// applied to pixels whose classifier score exceeds `threshold`.
struct SelectiveScaler {
    diffnet::Network<float> classifier;
    InputNormalizer normalizer;
    double threshold = 0.5;
    double temperature_param = 0.0;  ///< a
    FitMetadata fit;

    [[nodiscard]] double temperature() const;
};

using Calibrator = std::variant<GlobalTemperature, LtsRegressor, SelectiveScaler>;

[[nodiscard]] std::string method_tag(const Calibrator& calibrator);

/// Minimises f on [lo, hi] by golden-section search until the bracket is below tol.
[[nodiscard]] double golden_section_minimize(const std::function<double(double)>& f, double lo, double hi, double tol);

/// Mean per-pixel NLL of softmax(z / T) against the labels, in f64.
[[nodiscard]] double temperature_nll(const Tensor& logits, const Tensor& labels, double temperature);

// -- global temperature -------------------------------------------------------

inline constexpr double temperature_search_lo = 0.05;
inline constexpr double temperature_search_hi = 20.0;

/// Golden-section search on log T over [ln 0.05, ln 20] to 1e-4. A flat NLL
/// (K < 2 or every pixel's logits constant) yields T = 1 with a note.
[[nodiscard]] GlobalTemperature fit_temperature(const Tensor& logits, const Tensor& labels, const Tensor& lead_times);
[[nodiscard]] Tensor apply_temperature(const GlobalTemperature& calibrator, const Tensor& logits);

// -- local temperature scaling -----------------------------------------------

struct LtsOptions {
    bool conditioned = true;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    double learning_rate = 1e-2;
    std::size_t batch_samples = 8;
    std::size_t embedding_dim = 8;
    std::size_t lead_times = 0;  ///< 0 infers L from the data
};

/// conv3x3(K->8) relu pool2 conv3x3(8->8) [FiLM] relu pool2 conv3x3(8->8) [FiLM] relu
/// upsample2 upsample2 conv1x1(8->1). H and W must be multiples of 4.
[[nodiscard]] diffnet::Network<float> make_lts_network(std::size_t classes, std::size_t lead_times, bool conditioned,
                                                       std::uint64_t seed, std::size_t embedding_dim = 8);

[[nodiscard]] LtsRegressor fit_lts(const Tensor& logits, const Tensor& labels, const Tensor& lead_times,
                                   const LtsOptions& options);

/// Per-pixel temperatures, [N,H,W] f32, all > 0.
[[nodiscard]] Tensor lts_temperature_map(const LtsRegressor& calibrator, const Tensor& logits, const Tensor& lead_times);
[[nodiscard]] Tensor apply_lts(const LtsRegressor& calibrator, const Tensor& logits, const Tensor& lead_times);

// -- selective scaling --------------------------------------------------------

struct SsOptions {
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double learning_rate = 3e-3;
    std::size_t batch_pixels = 1024;
    std::size_t embedding_dim = 8;
    std::size_t lead_times = 0;
    std::size_t held_ratio = 111;  ///< one held-out sample per this many samples (at least one)
};

/// Per-pixel MLP K -> 64 [FiLM] relu -> 32 [FiLM] relu -> 1 sigmoid.
[[nodiscard]] diffnet::Network<float> make_ss_network(std::size_t classes, std::size_t lead_times, std::uint64_t seed,
                                                      std::size_t embedding_dim = 8);

/// Throws ValidationError when the training split holds no misprediction.
[[nodiscard]] SelectiveScaler fit_ss(const Tensor& logits, const Tensor& labels, const Tensor& lead_times,
                                     const SsOptions& options);

/// Classifier misprediction probability per pixel, [N,H,W] f32.
[[nodiscard]] Tensor ss_scores(const SelectiveScaler& calibrator, const Tensor& logits, const Tensor& lead_times);

/// Applies T_ss to pixels with flags[pixel] != 0 and leaves the rest at T = 1.
[[nodiscard]] Tensor apply_ss_flags(const SelectiveScaler& calibrator, const Tensor& logits,
                                    std::span<const std::uint8_t> flags);
[[nodiscard]] Tensor apply_ss(const SelectiveScaler& calibrator, const Tensor& logits, const Tensor& lead_times);

/// Misprediction indicator argmax(z) != y per pixel, [N*H*W].
[[nodiscard]] std::vector<std::uint8_t> mispredictions(const Tensor& logits, const Tensor& labels);

// -- uniform contract ---------------------------------------------------------

/// Dispatches to the method's apply function after checking the class count.
[[nodiscard]] Tensor apply_calibrator(const Calibrator& calibrator, const Tensor& logits, const Tensor& lead_times);

inline constexpr int calibrator_format_version = 1;

/// Writes manifest.json plus FCT1 parameter files into `dir`.
void save_calibrator(const Calibrator& calibrator, const std::filesystem::path& dir);

/// Throws FormatError on a missing/corrupt manifest, a version mismatch or a missing tensor file.
[[nodiscard]] Calibrator load_calibrator(const std::filesystem::path& dir);

/// Class count recorded at fit time.
[[nodiscard]] const FitMetadata& fit_metadata(const Calibrator& calibrator);
[[nodiscard]] FitMetadata& fit_metadata(Calibrator& calibrator);

}  // namespace tcal
