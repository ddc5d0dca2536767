#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tcal/tensor.hpp"

namespace tcal::synth {

struct NoDistortion {};

/// z = log(q) / tau everywhere.
struct GlobalTemperature {
    double tau = 1.0;
};

/// z = log(q) / tau[lead time].
struct LeadTimeSchedule {
    std::vector<double> tau;
};

/// z = log(q) / tau_bad where the top-two gap of log(q) is below `gap`,
/// z = log(q) elsewhere.
struct PlantedCorruption {
    double tau_bad = 0.3;
    double gap = 0.25;
};

using Distortion = std::variant<NoDistortion, GlobalTemperature, LeadTimeSchedule, PlantedCorruption>;

/// Evenly spaced schedule from 0.5 to 1.25 over L lead times.
[[nodiscard]] LeadTimeSchedule default_schedule(std::size_t lead_times);

/// Parses "none", "temp:<tau>", "schedule" or "schedule:<t0>,<t1>,...",
/// "planted" or "planted:<tau_bad>,<gap>". Throws std::invalid_argument.
[[nodiscard]] Distortion parse_distortion(std::string_view text, std::size_t lead_times);
[[nodiscard]] std::string distortion_to_string(const Distortion& distortion);

struct SynthScenario {
    std::size_t samples = 100;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t classes = 12;
    std::size_t lead_times = 6;
    std::vector<double> alpha;  ///< Dirichlet concentration; empty means default_alpha(classes)
    Distortion distortion = NoDistortion{};
    std::uint64_t seed = 42;

    /// 2.0 for class 0, then a linear taper from 0.5 down to 0.1.
    [[nodiscard]] static std::vector<double> default_alpha(std::size_t classes);
    [[nodiscard]] std::vector<double> resolved_alpha() const;

    /// Throws std::invalid_argument on an inconsistent scenario.
    void validate() const;
};

/// Lower bound applied to Dirichlet draws before renormalising.
inline constexpr double probability_floor = 1e-6;

struct SynthDataset {
    Tensor logits;      ///< [N,K,H,W] f32
    Tensor labels;      ///< [N,H,W] i64
    Tensor lead_times;  ///< [N] i64, sample n has lead time n mod L
};

/// Draws q ~ Dirichlet(alpha) per pixel, y ~ q, then emits distorted logits.
/// Every pixel draws from its own stream keyed by (seed, sample, pixel), so
/// output depends only on the scenario.
[[nodiscard]] SynthDataset generate(const SynthScenario& scenario);

/// The true class distribution of every pixel, [N,K,H,W] f32 (same draws as generate()).
[[nodiscard]] Tensor true_distribution(const SynthScenario& scenario);

/// True when the top-two gap of `logits` is below `gap`; ties always fire.
[[nodiscard]] bool planted_corruption_trigger(std::span<const double> logits, double gap);

/// Fraction of pixels whose undistorted logits fire the trigger.
[[nodiscard]] double trigger_rate(const SynthScenario& scenario, double gap);

/// Scenario as a JSON document (all fields and the seed).
[[nodiscard]] std::string scenario_to_json(const SynthScenario& scenario);

}  // namespace tcal::synth
