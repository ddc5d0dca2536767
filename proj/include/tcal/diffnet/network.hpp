#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tcal/errors.hpp"
#include "tcal/random.hpp"

namespace tcal::diffnet {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// A batch of feature maps stored channel-major: `values` is
/// channels x (batch * height * width), column index = (item * height + y) * width + x.
/// Per-pixel (MLP) inputs use height = width = 1 with one item per pixel.
template <typename Scalar>
struct Activation {
    Matrix<Scalar> values;
    std::size_t batch = 0;
    std::size_t height = 1;
    std::size_t width = 1;

    [[nodiscard]] std::size_t channels() const { return static_cast<std::size_t>(values.rows()); }
    [[nodiscard]] std::size_t spatial() const { return height * width; }
};

enum class LayerKind { dense, conv2d, avgpool2, upsample2, relu, sigmoid, film };

[[nodiscard]] inline const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::avgpool2: return "avgpool2";
        case LayerKind::upsample2: return "upsample2";
        case LayerKind::relu: return "relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::film: return "film";
    }
    return "?";
}

[[nodiscard]] inline LayerKind parse_layer_kind(const std::string& name) {
    for (LayerKind k : {LayerKind::dense, LayerKind::conv2d, LayerKind::avgpool2, LayerKind::upsample2, LayerKind::relu,
                        LayerKind::sigmoid, LayerKind::film}) {
        if (name == layer_kind_name(k)) return k;
    }
    throw std::invalid_argument("unknown layer kind '" + name + "'");
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 1;   ///< conv2d: 1 or 3, zero padded to preserve size
    std::size_t weight = 0;   ///< parameter index of W (dense/conv2d) or of the gamma head (film)
    std::size_t site = 0;     ///< film: site ordinal

    [[nodiscard]] std::string name(std::size_t index) const {
        return std::to_string(index) + ":" + layer_kind_name(kind);
    }
};

/// Lead-time conditioning: a learned embedding table feeding per-site FiLM heads.
struct Conditioning {
    std::size_t lead_times = 1;
    std::size_t embedding_dim = 8;
};

/// Intermediate values recorded by a forward pass, consumed by backward().
template <typename Scalar>
struct Tape {
    std::vector<Activation<Scalar>> inputs;       ///< input of each layer
    std::vector<Matrix<Scalar>> columns;          ///< conv2d: im2col matrix, else empty
    std::vector<std::size_t> lead_times;          ///< per batch item
    Activation<Scalar> output;

    /// Concatenated ReLU on/off pattern; used to detect kinks in finite differences.
    [[nodiscard]] std::vector<bool> relu_pattern(const std::vector<LayerSpec>& layers) const {
        std::vector<bool> pattern;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].kind != LayerKind::relu) continue;
            const auto& v = inputs[i].values;
            for (Eigen::Index j = 0; j < v.size(); ++j) pattern.push_back(v.data()[j] > Scalar(0));
        }
        return pattern;
    }
};

/// Sequential network over channel-major feature maps with optional FiLM
/// conditioning on a lead-time index.
///
/// Parameters live in one flat list so the optimiser and the serialiser can
/// treat every architecture alike. Trunk weights come from a stream keyed by
/// (seed, parameterised-layer ordinal) and FiLM parameters from a separate
/// stream, so a conditioned network and its unconditioned twin built from the
/// same seed share bit-identical trunks. FiLM heads start at zero, which makes
/// gamma = 1 and beta = 0 for every lead time.
template <typename Scalar>
class Network {
public:
    Network(std::size_t input_channels, std::uint64_t seed, std::optional<Conditioning> conditioning = std::nullopt)
        : input_channels_(input_channels), channels_(input_channels), seed_(seed), conditioning_(conditioning) {
        if (conditioning_) {
            if (conditioning_->lead_times == 0 || conditioning_->embedding_dim == 0) {
                throw std::invalid_argument("conditioning needs lead_times >= 1 and embedding_dim >= 1");
            }
            Rng rng = Rng::keyed({seed_, 0xF11Full});
            Matrix<Scalar> table(conditioning_->embedding_dim, conditioning_->lead_times);
            for (Eigen::Index j = 0; j < table.size(); ++j) table.data()[j] = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
            embedding_ = add_parameter("film.embedding", std::move(table));
        }
    }

    // -- builder ---------------------------------------------------------

    Network& dense(std::size_t out_channels) { return add_affine(LayerKind::dense, out_channels, 1); }

    Network& conv2d(std::size_t out_channels, std::size_t kernel) {
        if (kernel != 1 && kernel != 3) throw std::invalid_argument("conv2d kernel must be 1 or 3");
        return add_affine(LayerKind::conv2d, out_channels, kernel);
    }

    Network& avgpool2() { return add_plain(LayerKind::avgpool2); }
    Network& upsample2() { return add_plain(LayerKind::upsample2); }
    Network& relu() { return add_plain(LayerKind::relu); }
    Network& sigmoid() { return add_plain(LayerKind::sigmoid); }

    /// Adds a FiLM site on the current channels; a no-op for unconditioned networks.
    Network& film() {
        if (!conditioning_) return *this;
        const std::size_t c = channels_;
        const std::size_t d = conditioning_->embedding_dim;
        const std::string prefix = "film" + std::to_string(film_sites_);
        LayerSpec spec{LayerKind::film, c, c, 1, 0, film_sites_++};
        spec.weight = add_parameter(prefix + ".gamma_w", Matrix<Scalar>::Zero(c, d));
        add_parameter(prefix + ".gamma_b", Matrix<Scalar>::Zero(c, 1));
        add_parameter(prefix + ".beta_w", Matrix<Scalar>::Zero(c, d));
        add_parameter(prefix + ".beta_b", Matrix<Scalar>::Zero(c, 1));
        layers_.push_back(spec);
        return *this;
    }

    // -- introspection ---------------------------------------------------

    [[nodiscard]] std::size_t input_channels() const { return input_channels_; }
    [[nodiscard]] std::size_t output_channels() const { return channels_; }
    [[nodiscard]] std::uint64_t seed() const { return seed_; }
    [[nodiscard]] const std::optional<Conditioning>& conditioning() const { return conditioning_; }
    [[nodiscard]] const std::vector<LayerSpec>& layers() const { return layers_; }
    [[nodiscard]] const std::vector<std::string>& parameter_names() const { return names_; }
    [[nodiscard]] std::vector<Matrix<Scalar>>& parameters() { return params_; }
    [[nodiscard]] const std::vector<Matrix<Scalar>>& parameters() const { return params_; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
        return n;
    }

    /// Same architecture and weights in another scalar type.
    template <typename Other>
    [[nodiscard]] Network<Other> cast() const {
        Network<Other> out(input_channels_, seed_, conditioning_, layers_, names_, channels_, film_sites_, embedding_);
        for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i] = params_[i].template cast<Other>();
        return out;
    }

    // -- evaluation ------------------------------------------------------

    /// Runs the network. `lead_times` holds one index per batch item and may
    /// be empty for unconditioned networks. Pass a tape to enable backward().
    Activation<Scalar> forward(const Activation<Scalar>& input, std::span<const std::size_t> lead_times,
                               Tape<Scalar>* tape = nullptr) const {
        if (input.channels() != input_channels_) {
            throw std::invalid_argument("network input has " + std::to_string(input.channels()) +
                                        " channels, expected " + std::to_string(input_channels_));
        }
        if (static_cast<std::size_t>(input.values.cols()) != input.batch * input.spatial()) {
            throw std::invalid_argument("activation column count does not match batch x height x width");
        }
        if (conditioning_) check_lead_times(input.batch, lead_times);
        if (tape) {
            tape->inputs.clear();
            tape->columns.clear();
            tape->lead_times.assign(lead_times.begin(), lead_times.end());
        }

        Activation<Scalar> x = input;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const LayerSpec& layer = layers_[i];
            Matrix<Scalar> columns;
            Activation<Scalar> y = forward_layer(i, layer, x, lead_times, columns);
            if (!y.values.allFinite()) {
                throw NumericalError("non-finite activation after layer " + layer.name(i));
            }
            if (tape) {
                tape->inputs.push_back(std::move(x));
                tape->columns.push_back(std::move(columns));
            }
            x = std::move(y);
        }
        if (tape) tape->output = x;
        return x;
    }

    /// Reverse pass from d(loss)/d(output of layer `last`). Returns one
    /// gradient per parameter, in parameter order.
    [[nodiscard]] std::vector<Matrix<Scalar>> backward(const Tape<Scalar>& tape, Matrix<Scalar> grad,
                                                       std::optional<std::size_t> last = std::nullopt) const {
        std::vector<Matrix<Scalar>> grads(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) grads[i] = Matrix<Scalar>::Zero(params_[i].rows(), params_[i].cols());
        const std::size_t top = last.value_or(layers_.empty() ? 0 : layers_.size() - 1);
        if (layers_.empty()) return grads;
        for (std::size_t i = top + 1; i-- > 0;) grad = backward_layer(i, tape, grad, grads);
        return grads;
    }

private:
    template <typename>
    friend class Network;

    Network(std::size_t input_channels, std::uint64_t seed, std::optional<Conditioning> conditioning,
            std::vector<LayerSpec> layers, std::vector<std::string> names, std::size_t channels, std::size_t film_sites,
            std::size_t embedding)
        : input_channels_(input_channels),
          channels_(channels),
          seed_(seed),
          conditioning_(conditioning),
          layers_(std::move(layers)),
          names_(std::move(names)),
          params_(names_.size()),
          affine_layers_(0),
          film_sites_(film_sites),
          embedding_(embedding) {}

    std::size_t add_parameter(std::string name, Matrix<Scalar> value) {
        names_.push_back(std::move(name));
        params_.push_back(std::move(value));
        return params_.size() - 1;
    }

    Network& add_plain(LayerKind kind) {
        layers_.push_back({kind, channels_, channels_, 1, 0, 0});
        return *this;
    }

    Network& add_affine(LayerKind kind, std::size_t out_channels, std::size_t kernel) {
        const std::size_t fan_in = channels_ * kernel * kernel;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Rng rng = Rng::keyed({seed_, 0x7A0Cull, affine_layers_});
        Matrix<Scalar> w(out_channels, fan_in);
        Matrix<Scalar> b(out_channels, 1);
        for (Eigen::Index j = 0; j < w.size(); ++j) w.data()[j] = static_cast<Scalar>(rng.uniform(-bound, bound));
        for (Eigen::Index j = 0; j < b.size(); ++j) b.data()[j] = static_cast<Scalar>(rng.uniform(-bound, bound));
        const std::string prefix = std::string(layer_kind_name(kind)) + std::to_string(affine_layers_++);
        LayerSpec spec{kind, channels_, out_channels, kernel, 0, 0};
        spec.weight = add_parameter(prefix + ".weight", std::move(w));
        add_parameter(prefix + ".bias", std::move(b));
        layers_.push_back(spec);
        channels_ = out_channels;
        return *this;
    }

    void check_lead_times(std::size_t batch, std::span<const std::size_t> lead_times) const {
        if (lead_times.size() != batch) {
            throw std::invalid_argument("conditioned network needs one lead time per batch item (" +
                                        std::to_string(batch) + "), got " + std::to_string(lead_times.size()));
        }
        for (std::size_t l : lead_times) {
            if (l >= conditioning_->lead_times) {
                throw std::invalid_argument("lead time " + std::to_string(l) + " outside the embedding table (" +
                                            std::to_string(conditioning_->lead_times) + ")");
            }
        }
    }

    /// im2col for a k x k zero-padded convolution.
    static Matrix<Scalar> image_to_columns(const Activation<Scalar>& x, std::size_t kernel) {
        const std::size_t c_in = x.channels(), h = x.height, w = x.width, hw = h * w;
        const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
        Matrix<Scalar> cols = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(c_in * kernel * kernel), x.values.cols());
        for (std::size_t b = 0; b < x.batch; ++b) {
            for (std::size_t yy = 0; yy < h; ++yy) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const auto col = static_cast<Eigen::Index>(b * hw + yy * w + xx);
                    for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
                        const auto sy = static_cast<std::ptrdiff_t>(yy) + dy;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::ptrdiff_t dx = -half; dx <= half; ++dx) {
                            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                            const auto src = static_cast<Eigen::Index>(b * hw + static_cast<std::size_t>(sy) * w +
                                                                       static_cast<std::size_t>(sx));
                            const auto tap = static_cast<std::size_t>((dy + half) * static_cast<std::ptrdiff_t>(kernel) +
                                                                      (dx + half));
                            for (std::size_t c = 0; c < c_in; ++c) {
                                cols(static_cast<Eigen::Index>(c * kernel * kernel + tap), col) =
                                    x.values(static_cast<Eigen::Index>(c), src);
                            }
                        }
                    }
                }
            }
        }
        return cols;
    }

    /// Adjoint of image_to_columns.
    static Matrix<Scalar> columns_to_image(const Matrix<Scalar>& cols, const Activation<Scalar>& shape,
                                           std::size_t kernel) {
        const std::size_t c_in = shape.channels(), h = shape.height, w = shape.width, hw = h * w;
        const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(shape.values.rows(), shape.values.cols());
        for (std::size_t b = 0; b < shape.batch; ++b) {
            for (std::size_t yy = 0; yy < h; ++yy) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const auto col = static_cast<Eigen::Index>(b * hw + yy * w + xx);
                    for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
                        const auto sy = static_cast<std::ptrdiff_t>(yy) + dy;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::ptrdiff_t dxo = -half; dxo <= half; ++dxo) {
                            const auto sx = static_cast<std::ptrdiff_t>(xx) + dxo;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                            const auto dst = static_cast<Eigen::Index>(b * hw + static_cast<std::size_t>(sy) * w +
                                                                       static_cast<std::size_t>(sx));
                            const auto tap = static_cast<std::size_t>((dy + half) * static_cast<std::ptrdiff_t>(kernel) +
                                                                      (dxo + half));
                            for (std::size_t c = 0; c < c_in; ++c) {
                                dx(static_cast<Eigen::Index>(c), dst) +=
                                    cols(static_cast<Eigen::Index>(c * kernel * kernel + tap), col);
                            }
                        }
                    }
                }
            }
        }
        return dx;
    }

    /// Gamma (C x L) and beta (C x L) for every lead time at a FiLM site.
    std::pair<Matrix<Scalar>, Matrix<Scalar>> film_tables(const LayerSpec& layer) const {
        const Matrix<Scalar>& table = params_[embedding_];
        Matrix<Scalar> gamma = params_[layer.weight] * table;
        gamma.colwise() += params_[layer.weight + 1].col(0);
        gamma.array() += Scalar(1);
        Matrix<Scalar> beta = params_[layer.weight + 2] * table;
        beta.colwise() += params_[layer.weight + 3].col(0);
        return {std::move(gamma), std::move(beta)};
    }

    Activation<Scalar> forward_layer(std::size_t index, const LayerSpec& layer, const Activation<Scalar>& x,
                                     std::span<const std::size_t> lead_times, Matrix<Scalar>& columns) const {
        if (x.channels() != layer.in_channels) {
            throw std::invalid_argument("layer " + layer.name(index) + " expects " + std::to_string(layer.in_channels) +
                                        " channels, got " + std::to_string(x.channels()));
        }
        Activation<Scalar> y{Matrix<Scalar>(), x.batch, x.height, x.width};
        switch (layer.kind) {
            case LayerKind::dense:
            case LayerKind::conv2d: {
                const Matrix<Scalar>& w = params_[layer.weight];
                if (layer.kind == LayerKind::conv2d && layer.kernel == 3) {
                    columns = image_to_columns(x, 3);
                    y.values.noalias() = w * columns;
                } else {
                    y.values.noalias() = w * x.values;
                }
                y.values.colwise() += params_[layer.weight + 1].col(0);
                break;
            }
            case LayerKind::avgpool2: {
                if (x.height % 2 || x.width % 2) {
                    throw std::invalid_argument("layer " + layer.name(index) + " needs even height and width, got " +
                                                std::to_string(x.height) + "x" + std::to_string(x.width));
                }
                y.height = x.height / 2;
                y.width = x.width / 2;
                y.values = Matrix<Scalar>::Zero(x.values.rows(), static_cast<Eigen::Index>(x.batch * y.spatial()));
                for (std::size_t b = 0; b < x.batch; ++b) {
                    for (std::size_t yy = 0; yy < x.height; ++yy) {
                        for (std::size_t xx = 0; xx < x.width; ++xx) {
                            const auto src = static_cast<Eigen::Index>(b * x.spatial() + yy * x.width + xx);
                            const auto dst = static_cast<Eigen::Index>(b * y.spatial() + (yy / 2) * y.width + xx / 2);
                            y.values.col(dst) += Scalar(0.25) * x.values.col(src);
                        }
                    }
                }
                break;
            }
            case LayerKind::upsample2: {
                y.height = x.height * 2;
                y.width = x.width * 2;
                y.values.resize(x.values.rows(), static_cast<Eigen::Index>(x.batch * y.spatial()));
                for (std::size_t b = 0; b < x.batch; ++b) {
                    for (std::size_t yy = 0; yy < y.height; ++yy) {
                        for (std::size_t xx = 0; xx < y.width; ++xx) {
                            const auto src = static_cast<Eigen::Index>(b * x.spatial() + (yy / 2) * x.width + xx / 2);
                            y.values.col(static_cast<Eigen::Index>(b * y.spatial() + yy * y.width + xx)) = x.values.col(src);
                        }
                    }
                }
                break;
            }
            case LayerKind::relu:
                y.values = x.values.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(0); });
                break;
            case LayerKind::sigmoid:
                y.values = x.values.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
                break;
            case LayerKind::film: {
                const auto [gamma, beta] = film_tables(layer);
                y.values.resize(x.values.rows(), x.values.cols());
                const auto s = static_cast<Eigen::Index>(x.spatial());
                for (std::size_t b = 0; b < x.batch; ++b) {
                    const auto l = static_cast<Eigen::Index>(lead_times[b]);
                    const auto block = static_cast<Eigen::Index>(b) * s;
                    y.values.middleCols(block, s) =
                        (x.values.middleCols(block, s).array().colwise() * gamma.col(l).array()).colwise() +
                        beta.col(l).array();
                }
                break;
            }
        }
        return y;
    }

    Matrix<Scalar> backward_layer(std::size_t index, const Tape<Scalar>& tape, const Matrix<Scalar>& dy,
                                  std::vector<Matrix<Scalar>>& grads) const {
        const LayerSpec& layer = layers_[index];
        const Activation<Scalar>& x = tape.inputs[index];
        switch (layer.kind) {
            case LayerKind::dense:
            case LayerKind::conv2d: {
                const Matrix<Scalar>& w = params_[layer.weight];
                grads[layer.weight + 1] += dy.rowwise().sum();
                if (layer.kind == LayerKind::conv2d && layer.kernel == 3) {
                    const Matrix<Scalar>& cols = tape.columns[index];
                    grads[layer.weight].noalias() += dy * cols.transpose();
                    Matrix<Scalar> dcols = w.transpose() * dy;
                    return columns_to_image(dcols, x, 3);
                }
                grads[layer.weight].noalias() += dy * x.values.transpose();
                return w.transpose() * dy;
            }
            case LayerKind::avgpool2: {
                Matrix<Scalar> dx(x.values.rows(), x.values.cols());
                const std::size_t out_w = x.width / 2, out_s = (x.height / 2) * out_w;
                for (std::size_t b = 0; b < x.batch; ++b) {
                    for (std::size_t yy = 0; yy < x.height; ++yy) {
                        for (std::size_t xx = 0; xx < x.width; ++xx) {
                            const auto dst = static_cast<Eigen::Index>(b * x.spatial() + yy * x.width + xx);
                            const auto src = static_cast<Eigen::Index>(b * out_s + (yy / 2) * out_w + xx / 2);
                            dx.col(dst) = Scalar(0.25) * dy.col(src);
                        }
                    }
                }
                return dx;
            }
            case LayerKind::upsample2: {
                Matrix<Scalar> dx = Matrix<Scalar>::Zero(x.values.rows(), x.values.cols());
                const std::size_t out_w = x.width * 2, out_s = x.spatial() * 4;
                for (std::size_t b = 0; b < x.batch; ++b) {
                    for (std::size_t yy = 0; yy < 2 * x.height; ++yy) {
                        for (std::size_t xx = 0; xx < out_w; ++xx) {
                            const auto dst = static_cast<Eigen::Index>(b * x.spatial() + (yy / 2) * x.width + xx / 2);
                            dx.col(dst) += dy.col(static_cast<Eigen::Index>(b * out_s + yy * out_w + xx));
                        }
                    }
                }
                return dx;
            }
            case LayerKind::relu:
                return (x.values.array() > Scalar(0)).select(dy, Matrix<Scalar>::Zero(dy.rows(), dy.cols()));
            case LayerKind::sigmoid: {
                const Matrix<Scalar>& y = index + 1 < tape.inputs.size() ? tape.inputs[index + 1].values
                                                                          : tape.output.values;
                return (dy.array() * y.array() * (Scalar(1) - y.array())).matrix();
            }
            case LayerKind::film: {
                const auto [gamma, beta] = film_tables(layer);
                const Eigen::Index leads = gamma.cols();
                Matrix<Scalar> dgamma = Matrix<Scalar>::Zero(gamma.rows(), leads);
                Matrix<Scalar> dbeta = Matrix<Scalar>::Zero(beta.rows(), leads);
                Matrix<Scalar> dx(x.values.rows(), x.values.cols());
                const auto s = static_cast<Eigen::Index>(x.spatial());
                for (std::size_t b = 0; b < x.batch; ++b) {
                    const auto l = static_cast<Eigen::Index>(tape.lead_times[b]);
                    const auto block = static_cast<Eigen::Index>(b) * s;
                    const auto dyb = dy.middleCols(block, s);
                    dgamma.col(l) += (dyb.array() * x.values.middleCols(block, s).array()).rowwise().sum().matrix();
                    dbeta.col(l) += dyb.rowwise().sum();
                    dx.middleCols(block, s) = (dyb.array().colwise() * gamma.col(l).array()).matrix();
                }
                const Matrix<Scalar>& table = params_[embedding_];
                grads[layer.weight].noalias() += dgamma * table.transpose();
                grads[layer.weight + 1] += dgamma.rowwise().sum();
                grads[layer.weight + 2].noalias() += dbeta * table.transpose();
                grads[layer.weight + 3] += dbeta.rowwise().sum();
                grads[embedding_].noalias() += params_[layer.weight].transpose() * dgamma;
                grads[embedding_].noalias() += params_[layer.weight + 2].transpose() * dbeta;
                return dx;
            }
        }
        return dy;
    }

    std::size_t input_channels_;
    std::size_t channels_;
    std::uint64_t seed_;
    std::optional<Conditioning> conditioning_;
    std::vector<LayerSpec> layers_;
    std::vector<std::string> names_;
    std::vector<Matrix<Scalar>> params_;
    std::size_t affine_layers_ = 0;
    std::size_t film_sites_ = 0;
    std::size_t embedding_ = 0;
};

}  // namespace tcal::diffnet
