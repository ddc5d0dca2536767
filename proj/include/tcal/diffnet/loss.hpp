#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "tcal/diffnet/network.hpp"

namespace tcal::diffnet {

/// Output rows are class logits; one class index per column.
struct SoftmaxCrossEntropy {
    std::span<const std::int64_t> targets;
};

/// Output is a single row of probabilities in (0, 1); targets are 0/1 per
/// column. Each column's loss is scaled by the weight of its target class.
struct BinaryCrossEntropy {
    std::span<const std::uint8_t> targets;
    double positive_weight = 1.0;
    double negative_weight = 1.0;
};

/// Output is a single row t of log-temperatures; loss is the cross-entropy of
/// softmax(z * exp(-t)) against the class targets, with z given per column.
template <typename Scalar>
struct TemperedCrossEntropy {
    const Matrix<Scalar>* logits = nullptr;  ///< classes x columns
    std::span<const std::int64_t> targets;
};

/// 0.5 * squared error summed over rows, averaged over columns.
template <typename Scalar>
struct SquaredError {
    const Matrix<Scalar>* targets = nullptr;
};

template <typename Scalar>
using Loss = std::variant<SoftmaxCrossEntropy, BinaryCrossEntropy, TemperedCrossEntropy<Scalar>, SquaredError<Scalar>>;

template <typename Scalar>
struct LossValue {
    double loss = 0.0;            ///< mean over columns, accumulated in f64
    Matrix<Scalar> gradient;      ///< d loss / d (network output)
};

namespace detail {

inline void check_columns(std::size_t expected, std::size_t got, const char* what) {
    if (expected != got) {
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(got) + " targets for " +
                                    std::to_string(expected) + " output columns");
    }
}

/// Stable log(sigmoid(a)).
inline double log_sigmoid(double a) { return a >= 0 ? -std::log1p(std::exp(-a)) : a - std::log1p(std::exp(a)); }

}  // namespace detail

/// Loss on the raw network output.
template <typename Scalar>
LossValue<Scalar> evaluate_loss(const Loss<Scalar>& loss, const Matrix<Scalar>& out) {
    const Eigen::Index cols = out.cols();
    const double inv = 1.0 / static_cast<double>(cols);
    LossValue<Scalar> result{0.0, Matrix<Scalar>(out.rows(), cols)};
    if (const auto* ce = std::get_if<SoftmaxCrossEntropy>(&loss)) {
        detail::check_columns(static_cast<std::size_t>(cols), ce->targets.size(), "softmax cross-entropy");
        for (Eigen::Index j = 0; j < cols; ++j) {
            const auto col = out.col(j).template cast<double>().eval();
            const double top = col.maxCoeff();
            const Eigen::VectorXd e = (col.array() - top).exp().matrix();
            const double sum = e.sum();
            const auto y = static_cast<Eigen::Index>(ce->targets[static_cast<std::size_t>(j)]);
            result.loss += (std::log(sum) - (col(y) - top)) * inv;
            Eigen::VectorXd g = e / sum;
            g(y) -= 1.0;
            result.gradient.col(j) = (g * inv).template cast<Scalar>();
        }
    } else if (const auto* bce = std::get_if<BinaryCrossEntropy>(&loss)) {
        detail::check_columns(static_cast<std::size_t>(cols), bce->targets.size(), "binary cross-entropy");
        if (out.rows() != 1) throw std::invalid_argument("binary cross-entropy needs a single output row");
        constexpr double eps = 1e-12;
        for (Eigen::Index j = 0; j < cols; ++j) {
            const double p = std::clamp(static_cast<double>(out(0, j)), eps, 1.0 - eps);
            const bool positive = bce->targets[static_cast<std::size_t>(j)] != 0;
            const double w = positive ? bce->positive_weight : bce->negative_weight;
            result.loss += -w * (positive ? std::log(p) : std::log1p(-p)) * inv;
            result.gradient(0, j) = static_cast<Scalar>(w * (positive ? -1.0 / p : 1.0 / (1.0 - p)) * inv);
        }
    } else if (const auto* tce = std::get_if<TemperedCrossEntropy<Scalar>>(&loss)) {
        detail::check_columns(static_cast<std::size_t>(cols), tce->targets.size(), "tempered cross-entropy");
        if (out.rows() != 1 || !tce->logits || tce->logits->cols() != cols) {
            throw std::invalid_argument("tempered cross-entropy needs one output row and logits per column");
        }
        for (Eigen::Index j = 0; j < cols; ++j) {
            const double scale = std::exp(-static_cast<double>(out(0, j)));
            const Eigen::VectorXd s = tce->logits->col(j).template cast<double>() * scale;
            const double top = s.maxCoeff();
            const Eigen::VectorXd e = (s.array() - top).exp().matrix();
            const double sum = e.sum();
            const auto y = static_cast<Eigen::Index>(tce->targets[static_cast<std::size_t>(j)]);
            result.loss += (std::log(sum) - (s(y) - top)) * inv;
            // dL/dt = -sum_k (p_k - [k == y]) s_k
            const double dt = -((e / sum).dot(s) - s(y));
            result.gradient(0, j) = static_cast<Scalar>(dt * inv);
        }
    } else {
        const auto& se = std::get<SquaredError<Scalar>>(loss);
        if (!se.targets || se.targets->rows() != out.rows() || se.targets->cols() != cols) {
            throw std::invalid_argument("squared error targets must match the output shape");
        }
        const Matrix<Scalar> diff = out - *se.targets;
        result.loss = 0.5 * diff.template cast<double>().squaredNorm() * inv;
        result.gradient = diff * static_cast<Scalar>(inv);
    }
    if (!std::isfinite(result.loss)) throw NumericalError("loss is not finite");
    return result;
}

template <typename Scalar>
struct LossAndGradients {
    double loss = 0.0;
    std::vector<Matrix<Scalar>> gradients;
};

namespace detail {

/// Loss plus its gradient w.r.t. the output of layer `from` (the last layer,
/// or the layer feeding a final sigmoid when the loss is a fused BCE).
template <typename Scalar>
struct SeededLoss {
    double loss = 0.0;
    Matrix<Scalar> gradient;
    std::size_t from = 0;
};

template <typename Scalar>
SeededLoss<Scalar> seeded_loss(const Network<Scalar>& network, const Tape<Scalar>& tape, const Loss<Scalar>& loss) {
    const auto& layers = network.layers();
    const auto* bce = std::get_if<BinaryCrossEntropy>(&loss);
    if (bce && layers.size() >= 2 && layers.back().kind == LayerKind::sigmoid) {
        const Matrix<Scalar>& logits = tape.inputs.back().values;
        const Eigen::Index cols = logits.cols();
        check_columns(static_cast<std::size_t>(cols), bce->targets.size(), "binary cross-entropy");
        const double inv = 1.0 / static_cast<double>(cols);
        SeededLoss<Scalar> out{0.0, Matrix<Scalar>(1, cols), layers.size() - 2};
        for (Eigen::Index j = 0; j < cols; ++j) {
            const double a = static_cast<double>(logits(0, j));
            const bool positive = bce->targets[static_cast<std::size_t>(j)] != 0;
            const double w = positive ? bce->positive_weight : bce->negative_weight;
            out.loss += -w * (positive ? log_sigmoid(a) : log_sigmoid(-a)) * inv;
            const double p = 1.0 / (1.0 + std::exp(-a));
            out.gradient(0, j) = static_cast<Scalar>(w * (p - (positive ? 1.0 : 0.0)) * inv);
        }
        if (!std::isfinite(out.loss)) throw NumericalError("loss is not finite");
        return out;
    }
    LossValue<Scalar> value = evaluate_loss(loss, tape.output.values);
    return {value.loss, std::move(value.gradient), layers.empty() ? 0 : layers.size() - 1};
}

}  // namespace detail

/// Forward, loss, and reverse pass. A binary cross-entropy on a network whose
/// last layer is a sigmoid is evaluated on the pre-sigmoid values, so saturated
/// outputs keep a usable gradient.
template <typename Scalar>
LossAndGradients<Scalar> loss_and_gradients(const Network<Scalar>& network, const Activation<Scalar>& input,
                                            std::span<const std::size_t> lead_times, const Loss<Scalar>& loss) {
    Tape<Scalar> tape;
    network.forward(input, lead_times, &tape);
    auto seeded = detail::seeded_loss(network, tape, loss);
    return {seeded.loss, network.backward(tape, std::move(seeded.gradient), seeded.from)};
}

/// Loss only, evaluated exactly as loss_and_gradients does. When `tape` is
/// given it receives the forward record.
template <typename Scalar>
double loss_value(const Network<Scalar>& network, const Activation<Scalar>& input,
                  std::span<const std::size_t> lead_times, const Loss<Scalar>& loss, Tape<Scalar>* tape = nullptr) {
    Tape<Scalar> local;
    Tape<Scalar>& t = tape ? *tape : local;
    network.forward(input, lead_times, &t);
    return detail::seeded_loss(network, t, loss).loss;
}

}  // namespace tcal::diffnet
