#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "tcal/diffnet/network.hpp"

namespace tcal::diffnet {

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive-moment optimiser with bias correction.
template <typename Scalar>
class Adam {
public:
    explicit Adam(AdamOptions options = {}) : options_(options) {}

    [[nodiscard]] const AdamOptions& options() const { return options_; }
    [[nodiscard]] std::size_t steps() const { return step_; }
    void set_learning_rate(double lr) { options_.learning_rate = lr; }

    void step(std::span<Matrix<Scalar>> params, std::span<const Matrix<Scalar>> grads) {
        if (params.size() != grads.size()) throw std::invalid_argument("parameter/gradient count mismatch");
        if (first_.empty()) {
            for (const auto& p : params) {
                first_.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
                second_.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
            }
        }
        if (first_.size() != params.size()) throw std::invalid_argument("optimiser state does not match parameters");
        ++step_;
        const double b1 = options_.beta1, b2 = options_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols()) {
                throw std::invalid_argument("gradient shape does not match parameter " + std::to_string(i));
            }
            first_[i] = Scalar(b1) * first_[i] + Scalar(1.0 - b1) * grads[i];
            second_[i] = Scalar(b2) * second_[i] + Scalar(1.0 - b2) * grads[i].cwiseAbs2();
            params[i].array() -= Scalar(options_.learning_rate) * (first_[i].array() / Scalar(c1)) /
                                 ((second_[i].array() / Scalar(c2)).sqrt() + Scalar(options_.epsilon));
        }
    }

private:
    AdamOptions options_;
    std::vector<Matrix<Scalar>> first_;
    std::vector<Matrix<Scalar>> second_;
    std::size_t step_ = 0;
};

}  // namespace tcal::diffnet
