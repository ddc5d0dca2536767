#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tcal/diffnet/loss.hpp"
#include "tcal/random.hpp"

namespace tcal::diffnet {

struct GradientCheckReport {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t coordinates_checked = 0;
    std::size_t step_reductions = 0;  ///< times a ReLU kink forced a smaller step
    double tolerance = 1e-4;

    [[nodiscard]] bool passed() const { return max_relative_error < tolerance; }
};

/// Compares reverse-mode gradients with central finite differences in f64.
///
/// Up to `max_coordinates` parameter entries are drawn at random (every entry
/// when the network is smaller). Relative error is |a - n| / max(|a|, |n|, 1e-7).
/// If the ReLU pattern differs between theta + h and theta - h the step is
/// divided by 10, down to 1e-7, before the comparison is made.
template <typename Scalar>
GradientCheckReport finite_difference_check(const Network<Scalar>& network, const Activation<double>& input,
                                            std::span<const std::size_t> lead_times, const Loss<double>& loss,
                                            double tolerance = 1e-4, std::size_t max_coordinates = 200,
                                            std::uint64_t seed = 0, double step = 1e-3) {
    Network<double> net = network.template cast<double>();
    const auto analytic = loss_and_gradients(net, input, lead_times, loss).gradients;

    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    for (std::size_t p = 0; p < net.parameters().size(); ++p) {
        for (Eigen::Index j = 0; j < net.parameters()[p].size(); ++j) coords.emplace_back(p, j);
    }
    if (coords.size() > max_coordinates) {
        Rng rng(derive_key({seed, 0x6C4Eull}));
        for (std::size_t i = 0; i < max_coordinates; ++i) {
            std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
        }
        coords.resize(max_coordinates);
    }

    GradientCheckReport report;
    report.tolerance = tolerance;
    const auto& layers = net.layers();
    for (const auto& [p, j] : coords) {
        double& theta = net.parameters()[p].data()[j];
        const double original = theta;
        double h = step;
        double numeric = 0.0;
        for (;;) {
            Tape<double> plus_tape, minus_tape;
            theta = original + h;
            const double plus = loss_value(net, input, lead_times, loss, &plus_tape);
            theta = original - h;
            const double minus = loss_value(net, input, lead_times, loss, &minus_tape);
            theta = original;
            numeric = (plus - minus) / (2.0 * h);
            if (plus_tape.relu_pattern(layers) == minus_tape.relu_pattern(layers) || h <= 1e-7) break;
            h /= 10.0;
            ++report.step_reductions;
        }
        const double a = analytic[p].data()[j];
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-7});
        if (report.worst_parameter.empty() || err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_parameter = net.parameter_names()[p] + "[" + std::to_string(j) + "]";
        }
        ++report.coordinates_checked;
    }
    return report;
}

}  // namespace tcal::diffnet
