#include "tcal/calibrators.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "tcal/diffnet/io.hpp"
#include "tcal/diffnet/loss.hpp"
#include "tcal/diffnet/optimizer.hpp"
#include "tcal/metrics.hpp"
#include "tcal/random.hpp"
#include "tcal/softmax.hpp"
#include "tcal/tensor_io.hpp"

namespace tcal {

using diffnet::Activation;
using diffnet::Matrix;
using nlohmann::ordered_json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

double softplus(double a) { return a > 30.0 ? a : std::log1p(std::exp(a)); }

/// Pixel column index -> sample index.
std::vector<std::size_t> column_leads(const Tensor& lead_times, std::size_t pixels_per_sample) {
    const auto leads = lead_times.i64();
    std::vector<std::size_t> out(leads.size() * pixels_per_sample);
    for (std::size_t n = 0; n < leads.size(); ++n) {
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(n * pixels_per_sample), pixels_per_sample,
                    static_cast<std::size_t>(leads[n]));
    }
    return out;
}

/// Raw logits as a K x (N*H*W) matrix in f32.
Matrix<float> logit_columns(const Tensor& logits) {
    const std::size_t n_samples = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    const auto z = logits.f32();
    Matrix<float> out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n_samples * hw));
    for (std::size_t n = 0; n < n_samples; ++n) {
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t px = 0; px < hw; ++px) {
                out(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n * hw + px)) = z[(n * k + c) * hw + px];
            }
        }
    }
    return out;
}

/// Gathers the listed columns of `source`.
Matrix<float> gather_columns(const Matrix<float>& source, std::span<const std::size_t> columns) {
    Matrix<float> out(source.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = source.col(static_cast<Eigen::Index>(columns[j]));
    return out;
}

void shuffle(std::vector<std::size_t>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

void check_classes(const FitMetadata& fit, std::size_t classes) {
    if (fit.classes != 0 && fit.classes != classes) {
        throw ValidationError(ValidationError::Kind::incompatible, "logits",
                              "calibrator was fitted on K=" + std::to_string(fit.classes) + " classes, data has K=" +
                                  std::to_string(classes));
    }
}

void check_lead_times(const std::optional<diffnet::Conditioning>& conditioning, const Tensor& lead_times) {
    if (!conditioning) return;
    for (std::int64_t l : lead_times.i64()) {
        if (l < 0 || static_cast<std::size_t>(l) >= conditioning->lead_times) {
            throw ValidationError(ValidationError::Kind::out_of_range, "lead_times",
                                  "lead time " + std::to_string(l) + " outside the calibrator's " +
                                      std::to_string(conditioning->lead_times) + " lead times");
        }
    }
}

FitMetadata base_metadata(const DatasetDims& dims, std::uint64_t seed, std::size_t epochs) {
    FitMetadata fit;
    fit.samples = dims.samples;
    fit.pixels = dims.pixels();
    fit.classes = dims.classes;
    fit.lead_times = dims.lead_times;
    fit.seed = seed;
    fit.epochs = epochs;
    return fit;
}

/// Mean NLL of softmax(z / T) over the listed pixel columns.
double columns_nll(const Matrix<float>& z, std::span<const std::int64_t> labels, std::span<const std::size_t> columns,
                   double temperature) {
    if (columns.empty()) return 0.0;
    double total = 0.0;
    const Eigen::Index k = z.rows();
    for (std::size_t col : columns) {
        const auto j = static_cast<Eigen::Index>(col);
        double top = -INFINITY;
        for (Eigen::Index c = 0; c < k; ++c) top = std::max(top, static_cast<double>(z(c, j)) / temperature);
        double sum = 0.0;
        for (Eigen::Index c = 0; c < k; ++c) sum += std::exp(static_cast<double>(z(c, j)) / temperature - top);
        total += std::log(sum) - (static_cast<double>(z(static_cast<Eigen::Index>(labels[col]), j)) / temperature - top);
    }
    return total / static_cast<double>(columns.size());
}

}  // namespace

// ---------------------------------------------------------------------------

double SelectiveScaler::temperature() const { return 1.0 + softplus(temperature_param); }

std::string method_tag(const Calibrator& calibrator) {
    return std::visit(overloaded{
                          [](const GlobalTemperature&) { return std::string("ts"); },
                          [](const LtsRegressor&) { return std::string("lts"); },
                          [](const SelectiveScaler&) { return std::string("ss"); },
                      },
                      calibrator);
}

const FitMetadata& fit_metadata(const Calibrator& calibrator) {
    return std::visit([](const auto& c) -> const FitMetadata& { return c.fit; }, calibrator);
}

FitMetadata& fit_metadata(Calibrator& calibrator) {
    return std::visit([](auto& c) -> FitMetadata& { return c.fit; }, calibrator);
}

double golden_section_minimize(const std::function<double(double)>& f, double lo, double hi, double tol) {
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = f(c), fd = f(d);
    while (b - a > tol) {
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    // Report the better probe when the minimum sits on a bound.
    const double mid = 0.5 * (a + b);
    if (a == lo && f(lo) <= f(mid)) return lo;
    if (b == hi && f(hi) <= f(mid)) return hi;
    return mid;
}

double temperature_nll(const Tensor& logits, const Tensor& labels, double temperature) {
    const std::size_t n_samples = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    const auto z = logits.f32();
    const auto y = labels.i64();
    std::vector<double> s(k);
    double total = 0.0;
    for (std::size_t n = 0; n < n_samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            double top = -INFINITY;
            for (std::size_t c = 0; c < k; ++c) {
                s[c] = static_cast<double>(z[(n * k + c) * hw + px]) / temperature;
                top = std::max(top, s[c]);
            }
            double sum = 0.0;
            for (std::size_t c = 0; c < k; ++c) sum += std::exp(s[c] - top);
            total += std::log(sum) - (s[static_cast<std::size_t>(y[n * hw + px])] - top);
        }
    }
    return total / static_cast<double>(n_samples * hw);
}

// ---------------------------------------------------------------------------
// Input normalisation

InputNormalizer InputNormalizer::identity(std::size_t classes) {
    return {std::vector<float>(classes, 0.0f), std::vector<float>(classes, 1.0f)};
}

InputNormalizer InputNormalizer::measure(const Tensor& logits) {
    const Matrix<float> raw = InputNormalizer::identity(logits.dim(1)).features(logits);
    const Eigen::Index k = raw.rows();
    const auto cols = static_cast<double>(raw.cols());
    InputNormalizer out{std::vector<float>(static_cast<std::size_t>(k)), std::vector<float>(static_cast<std::size_t>(k))};
    for (Eigen::Index c = 0; c < k; ++c) {
        const Eigen::ArrayXd row = raw.row(c).transpose().cast<double>().array();
        const double mean = row.sum() / cols;
        const double var = (row - mean).square().sum() / cols;
        out.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
        out.scale[static_cast<std::size_t>(c)] = static_cast<float>(std::sqrt(var) > 1e-6 ? std::sqrt(var) : 1.0);
    }
    return out;
}

Matrix<float> InputNormalizer::features(const Tensor& logits) const {
    Matrix<float> x = logit_columns(logits);
    if (static_cast<std::size_t>(x.rows()) != mean.size()) {
        throw ValidationError(ValidationError::Kind::incompatible, "logits",
                              "input normaliser expects " + std::to_string(mean.size()) + " classes");
    }
    const Eigen::Map<const Eigen::ArrayXf> mu(mean.data(), x.rows());
    const Eigen::Map<const Eigen::ArrayXf> sd(scale.data(), x.rows());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const float top = x.col(j).maxCoeff();
        x.col(j) = (((x.col(j).array() - top) - mu) / sd).matrix();
    }
    return x;
}

// ---------------------------------------------------------------------------
// Global temperature

GlobalTemperature fit_temperature(const Tensor& logits, const Tensor& labels, const Tensor& lead_times) {
    const DatasetDims dims = validate_dataset(logits, labels, lead_times);
    GlobalTemperature cal;
    cal.fit = base_metadata(dims, 0, 0);

    bool flat = dims.classes < 2;
    if (!flat) {
        const auto z = logits.f32();
        const std::size_t hw = dims.pixels_per_sample();
        flat = true;
        for (std::size_t n = 0; n < dims.samples && flat; ++n) {
            for (std::size_t px = 0; px < hw && flat; ++px) {
                const float first = z[n * dims.classes * hw + px];
                for (std::size_t c = 1; c < dims.classes; ++c) {
                    if (z[(n * dims.classes + c) * hw + px] != first) {
                        flat = false;
                        break;
                    }
                }
            }
        }
    }
    if (flat) {
        std::cerr << "warning: temperature NLL is flat for this dataset (single class or constant logits); using T = 1\n";
        cal.temperature = 1.0;
        cal.fit.final_loss = temperature_nll(logits, labels, 1.0);
        cal.fit.notes.push_back("degenerate dataset: NLL independent of T, T set to 1");
        return cal;
    }
    const double log_t = golden_section_minimize([&](double lt) { return temperature_nll(logits, labels, std::exp(lt)); },
                                                 std::log(temperature_search_lo), std::log(temperature_search_hi), 1e-4);
    cal.temperature = std::exp(log_t);
    cal.fit.final_loss = temperature_nll(logits, labels, cal.temperature);
    return cal;
}

Tensor apply_temperature(const GlobalTemperature& calibrator, const Tensor& logits) {
    if (!(calibrator.temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (logits.rank() == 4) check_classes(calibrator.fit, logits.dim(1));
    const std::size_t pixels = logits.rank() == 4 ? logits.dim(0) * logits.dim(2) * logits.dim(3) : 0;
    const std::vector<double> t(pixels, calibrator.temperature);
    return tempered_softmax(logits, t);
}

// ---------------------------------------------------------------------------
// Local temperature scaling

diffnet::Network<float> make_lts_network(std::size_t classes, std::size_t lead_times, bool conditioned,
                                         std::uint64_t seed, std::size_t embedding_dim) {
    std::optional<diffnet::Conditioning> conditioning;
    if (conditioned) conditioning = diffnet::Conditioning{lead_times, embedding_dim};
    diffnet::Network<float> net(classes, seed, conditioning);
    net.conv2d(8, 3).relu().avgpool2();
    net.conv2d(8, 3).film().relu().avgpool2();
    net.conv2d(8, 3).film().relu();
    net.upsample2().upsample2().conv2d(1, 1);
    return net;
}

namespace {

/// Runs an LTS network over samples [first, first + count) and returns t (1 x count*HW).
Matrix<float> lts_forward(const diffnet::Network<float>& net, const Matrix<float>& features, const DatasetDims& dims,
                          std::span<const std::size_t> samples, std::span<const std::size_t> sample_leads,
                          diffnet::Tape<float>* tape = nullptr, Activation<float>* input_out = nullptr) {
    const std::size_t hw = dims.pixels_per_sample();
    Activation<float> input{Matrix<float>(features.rows(), static_cast<Eigen::Index>(samples.size() * hw)),
                            samples.size(), dims.height, dims.width};
    std::vector<std::size_t> leads(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        input.values.middleCols(static_cast<Eigen::Index>(i * hw), static_cast<Eigen::Index>(hw)) =
            features.middleCols(static_cast<Eigen::Index>(samples[i] * hw), static_cast<Eigen::Index>(hw));
        leads[i] = sample_leads[samples[i]];
    }
    std::span<const std::size_t> lead_span = net.conditioning() ? std::span<const std::size_t>(leads) : std::span<const std::size_t>();
    Matrix<float> out = net.forward(input, lead_span, tape).values;
    if (input_out) *input_out = std::move(input);
    return out;
}

std::vector<std::size_t> sample_lead_vector(const Tensor& lead_times) {
    std::vector<std::size_t> out;
    for (std::int64_t l : lead_times.i64()) out.push_back(static_cast<std::size_t>(l));
    return out;
}

}  // namespace

LtsRegressor fit_lts(const Tensor& logits, const Tensor& labels, const Tensor& lead_times, const LtsOptions& options) {
    const DatasetDims dims = validate_dataset(logits, labels, lead_times, options.lead_times);
    if (dims.height % 4 || dims.width % 4) {
        throw ValidationError(ValidationError::Kind::shape_mismatch, "logits",
                              "local temperature scaling needs H and W divisible by 4, got " +
                                  std::to_string(dims.height) + "x" + std::to_string(dims.width));
    }
    const std::size_t hw = dims.pixels_per_sample();
    LtsRegressor cal{make_lts_network(dims.classes, dims.lead_times, options.conditioned, options.seed,
                                      options.embedding_dim),
                     InputNormalizer::measure(logits), options.conditioned,
                     base_metadata(dims, options.seed, options.epochs)};
    const Matrix<float> features = cal.normalizer.features(logits);
    const Matrix<float> z = logit_columns(logits);
    const auto y = labels.i64();
    const auto sample_leads = sample_lead_vector(lead_times);

    diffnet::Adam<float> adam({options.learning_rate});
    std::vector<std::size_t> order(dims.samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t batch = std::max<std::size_t>(1, options.batch_samples);

    const auto full_loss = [&] {
        double total = 0.0;
        for (std::size_t first = 0; first < dims.samples; first += batch) {
            const std::size_t count = std::min(batch, dims.samples - first);
            std::vector<std::size_t> samples(count);
            std::iota(samples.begin(), samples.end(), first);
            const Matrix<float> t = lts_forward(cal.network, features, dims, samples, sample_leads);
            const Matrix<float> zb = z.middleCols(static_cast<Eigen::Index>(first * hw), static_cast<Eigen::Index>(count * hw));
            const diffnet::Loss<float> loss =
                diffnet::TemperedCrossEntropy<float>{&zb, y.subspan(first * hw, count * hw)};
            total += diffnet::evaluate_loss(loss, t).loss * static_cast<double>(count * hw);
        }
        return total / static_cast<double>(dims.pixels());
    };
    cal.fit.notes.push_back("initial_loss=" + format_double(full_loss()));

    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        Rng rng = Rng::keyed({options.seed, 0x175ull, epoch});
        shuffle(order, rng);
        try {
            for (std::size_t first = 0; first < dims.samples; first += batch) {
                const std::span<const std::size_t> samples(order.data() + first, std::min(batch, dims.samples - first));
                std::vector<std::size_t> columns;
                std::vector<std::int64_t> targets;
                for (std::size_t s : samples) {
                    for (std::size_t px = 0; px < hw; ++px) {
                        columns.push_back(s * hw + px);
                        targets.push_back(y[s * hw + px]);
                    }
                }
                const Matrix<float> zb = gather_columns(z, columns);
                diffnet::Tape<float> tape;
                Activation<float> input;
                lts_forward(cal.network, features, dims, samples, sample_leads, &tape, &input);
                const diffnet::Loss<float> loss = diffnet::TemperedCrossEntropy<float>{&zb, targets};
                const auto value = diffnet::evaluate_loss(loss, tape.output.values);
                const auto grads = cal.network.backward(tape, value.gradient);
                adam.step(cal.network.parameters(), grads);
            }
        } catch (const NumericalError& e) {
            throw NumericalError("local temperature scaling diverged in epoch " + std::to_string(epoch) + ": " + e.what());
        }
    }
    cal.fit.final_loss = full_loss();
    if (!std::isfinite(cal.fit.final_loss)) {
        throw NumericalError("local temperature scaling diverged in epoch " + std::to_string(options.epochs));
    }
    return cal;
}

Tensor lts_temperature_map(const LtsRegressor& calibrator, const Tensor& logits, const Tensor& lead_times) {
    const DatasetDims dims = validate_dataset(logits, Tensor::zeros(DType::i64, {logits.dim(0), logits.dim(2), logits.dim(3)}),
                                              lead_times);
    check_classes(calibrator.fit, dims.classes);
    check_lead_times(calibrator.network.conditioning(), lead_times);
    const Matrix<float> features = calibrator.normalizer.features(logits);
    const auto sample_leads = sample_lead_vector(lead_times);
    const std::size_t hw = dims.pixels_per_sample();
    std::vector<float> temps(dims.pixels());
    constexpr std::size_t batch = 16;
    for (std::size_t first = 0; first < dims.samples; first += batch) {
        const std::size_t count = std::min(batch, dims.samples - first);
        std::vector<std::size_t> samples(count);
        std::iota(samples.begin(), samples.end(), first);
        const Matrix<float> t = lts_forward(calibrator.network, features, dims, samples, sample_leads);
        for (Eigen::Index j = 0; j < t.cols(); ++j) {
            temps[first * hw + static_cast<std::size_t>(j)] = static_cast<float>(std::exp(static_cast<double>(t(0, j))));
        }
    }
    return Tensor::from_f32({dims.samples, dims.height, dims.width}, std::move(temps));
}

Tensor apply_lts(const LtsRegressor& calibrator, const Tensor& logits, const Tensor& lead_times) {
    const Tensor temps = lts_temperature_map(calibrator, logits, lead_times);
    const auto t = temps.f32();
    const std::vector<double> temperature(t.begin(), t.end());
    return tempered_softmax(logits, temperature);
}

// ---------------------------------------------------------------------------
// Selective scaling

diffnet::Network<float> make_ss_network(std::size_t classes, std::size_t lead_times, std::uint64_t seed,
                                        std::size_t embedding_dim) {
    diffnet::Network<float> net(classes, seed, diffnet::Conditioning{lead_times, embedding_dim});
    net.dense(64).film().relu();
    net.dense(32).film().relu();
    net.dense(1).sigmoid();
    return net;
}

std::vector<std::uint8_t> mispredictions(const Tensor& logits, const Tensor& labels) {
    const std::size_t n_samples = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    const auto z = logits.f32();
    const auto y = labels.i64();
    std::vector<std::uint8_t> out(n_samples * hw);
    for (std::size_t n = 0; n < n_samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c) {
                if (z[(n * k + c) * hw + px] > z[(n * k + best) * hw + px]) best = c;
            }
            out[n * hw + px] = y[n * hw + px] != static_cast<std::int64_t>(best) ? 1 : 0;
        }
    }
    return out;
}

namespace {

/// Classifier scores for the listed pixel columns.
std::vector<float> classify_columns(const diffnet::Network<float>& net, const Matrix<float>& features,
                                    std::span<const std::size_t> column_lead, std::span<const std::size_t> columns) {
    std::vector<float> scores(columns.size());
    constexpr std::size_t chunk = 1 << 15;
    for (std::size_t first = 0; first < columns.size(); first += chunk) {
        const auto part = columns.subspan(first, std::min(chunk, columns.size() - first));
        Activation<float> input{gather_columns(features, part), part.size(), 1, 1};
        std::vector<std::size_t> leads(part.size());
        for (std::size_t i = 0; i < part.size(); ++i) leads[i] = column_lead[part[i]];
        const Matrix<float> out = net.forward(input, leads).values;
        for (std::size_t i = 0; i < part.size(); ++i) scores[first + i] = out(0, static_cast<Eigen::Index>(i));
    }
    return scores;
}

/// Threshold maximising F1 of "score > threshold" against the targets.
double f1_optimal_threshold(std::span<const float> scores, std::span<const std::uint8_t> targets, double& best_f1) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto positives = static_cast<std::int64_t>(std::ranges::count(targets, std::uint8_t{1}));
    best_f1 = 0.0;
    double threshold = 0.5;
    std::int64_t tp = 0;
    for (std::size_t m = 1; m <= order.size(); ++m) {
        tp += targets[order[m - 1]] ? 1 : 0;
        // Only cut between distinct scores.
        if (m < order.size() && scores[order[m]] == scores[order[m - 1]]) continue;
        const std::int64_t fp = static_cast<std::int64_t>(m) - tp;
        const double f1 = f1_score({tp, fp, positives - tp, 0});
        if (f1 > best_f1) {
            best_f1 = f1;
            const double above = scores[order[m - 1]];
            const double below = m < order.size() ? static_cast<double>(scores[order[m]]) : 0.0;
            threshold = 0.5 * (above + below);
        }
    }
    return std::clamp(threshold, 1e-7, 1.0 - 1e-7);
}

}  // namespace

SelectiveScaler fit_ss(const Tensor& logits, const Tensor& labels, const Tensor& lead_times, const SsOptions& options) {
    const DatasetDims dims = validate_dataset(logits, labels, lead_times, options.lead_times);
    if (dims.samples < 2) {
        throw ValidationError(ValidationError::Kind::empty, "logits", "selective scaling needs at least 2 samples to split");
    }
    const std::size_t hw = dims.pixels_per_sample();
    SelectiveScaler cal{make_ss_network(dims.classes, dims.lead_times, options.seed, options.embedding_dim),
                        InputNormalizer::measure(logits), 0.5, -10.0, base_metadata(dims, options.seed, options.epochs)};

    // Split samples: a small held-out part fits theta and T_ss, the rest trains the classifier.
    std::vector<std::size_t> samples(dims.samples);
    std::iota(samples.begin(), samples.end(), std::size_t{0});
    Rng split_rng = Rng::keyed({options.seed, 0x5B117ull});
    shuffle(samples, split_rng);
    const std::size_t ratio = std::max<std::size_t>(1, options.held_ratio);
    const std::size_t held = std::clamp<std::size_t>((dims.samples + ratio - 1) / ratio, 1, dims.samples - 1);
    std::vector<std::size_t> held_samples(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<std::size_t> train_samples(samples.begin() + static_cast<std::ptrdiff_t>(held), samples.end());
    std::ranges::sort(held_samples);
    std::ranges::sort(train_samples);
    const auto columns_of = [&](const std::vector<std::size_t>& ss) {
        std::vector<std::size_t> cols;
        for (std::size_t s : ss) {
            for (std::size_t px = 0; px < hw; ++px) cols.push_back(s * hw + px);
        }
        return cols;
    };
    std::vector<std::size_t> train_cols = columns_of(train_samples);
    const std::vector<std::size_t> held_cols = columns_of(held_samples);

    const std::vector<std::uint8_t> mis = mispredictions(logits, labels);
    const auto positives = static_cast<std::size_t>(
        std::ranges::count_if(train_cols, [&](std::size_t c) { return mis[c] != 0; }));
    if (positives == 0) {
        throw ValidationError(ValidationError::Kind::empty, "labels",
                              "no mispredictions in the classifier training split; selective scaling has nothing to calibrate");
    }
    const std::size_t negatives = train_cols.size() - positives;
    const double total = static_cast<double>(train_cols.size());
    const double w_pos = total / (2.0 * static_cast<double>(positives));
    const double w_neg = negatives == 0 ? 1.0 : total / (2.0 * static_cast<double>(negatives));

    const Matrix<float> features = cal.normalizer.features(logits);
    const std::vector<std::size_t> column_lead = column_leads(lead_times, hw);

    diffnet::Adam<float> adam({options.learning_rate});
    const std::size_t batch = std::max<std::size_t>(1, options.batch_pixels);
    std::vector<std::uint8_t> targets;
    std::vector<std::size_t> leads;
    try {
        for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
            Rng rng = Rng::keyed({options.seed, 0x55ull, epoch});
            shuffle(train_cols, rng);
            for (std::size_t first = 0; first < train_cols.size(); first += batch) {
                const std::span<const std::size_t> part(train_cols.data() + first,
                                                        std::min(batch, train_cols.size() - first));
                Activation<float> input{gather_columns(features, part), part.size(), 1, 1};
                targets.resize(part.size());
                leads.resize(part.size());
                for (std::size_t i = 0; i < part.size(); ++i) {
                    targets[i] = mis[part[i]];
                    leads[i] = column_lead[part[i]];
                }
                const diffnet::Loss<float> loss = diffnet::BinaryCrossEntropy{targets, w_pos, w_neg};
                const auto result = diffnet::loss_and_gradients(cal.classifier, input, leads, loss);
                adam.step(cal.classifier.parameters(), result.gradients);
            }
        }
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("selective scaling classifier diverged: ") + e.what());
    }

    // Final weighted BCE over the training split.
    {
        const std::vector<float> scores = classify_columns(cal.classifier, features, column_lead, train_cols);
        double loss = 0.0;
        for (std::size_t i = 0; i < train_cols.size(); ++i) {
            const double p = std::clamp(static_cast<double>(scores[i]), 1e-12, 1.0 - 1e-12);
            loss += mis[train_cols[i]] ? -w_pos * std::log(p) : -w_neg * std::log1p(-p);
        }
        cal.fit.final_loss = loss / total;
    }

    // Flag threshold and temperature on the held-out split.
    const std::vector<float> held_scores = classify_columns(cal.classifier, features, column_lead, held_cols);
    std::vector<std::uint8_t> held_targets(held_cols.size());
    for (std::size_t i = 0; i < held_cols.size(); ++i) held_targets[i] = mis[held_cols[i]];
    double best_f1 = 0.0;
    cal.threshold = f1_optimal_threshold(held_scores, held_targets, best_f1);
    if (best_f1 == 0.0) cal.fit.notes.push_back("no misprediction in held-out split; threshold left at default");

    std::vector<std::size_t> flagged;
    for (std::size_t i = 0; i < held_cols.size(); ++i) {
        if (static_cast<double>(held_scores[i]) > cal.threshold) flagged.push_back(held_cols[i]);
    }
    if (flagged.empty()) {
        cal.temperature_param = -10.0;
        cal.fit.notes.push_back("no held-out pixel flagged; T_ss left near 1");
    } else {
        const Matrix<float> z = logit_columns(logits);
        const auto y = labels.i64();
        const double a_hi = std::log(std::expm1(temperature_search_hi - 1.0));
        cal.temperature_param = golden_section_minimize(
            [&](double a) { return columns_nll(z, y, flagged, 1.0 + softplus(a)); }, -10.0, a_hi, 1e-4);
    }
    cal.fit.notes.push_back("held_out_samples=" + std::to_string(held) + " held_out_f1=" + format_double(best_f1) +
                            " flagged_held_pixels=" + std::to_string(flagged.size()));
    return cal;
}

Tensor ss_scores(const SelectiveScaler& calibrator, const Tensor& logits, const Tensor& lead_times) {
    const DatasetDims dims = validate_dataset(logits, Tensor::zeros(DType::i64, {logits.dim(0), logits.dim(2), logits.dim(3)}),
                                              lead_times);
    check_classes(calibrator.fit, dims.classes);
    check_lead_times(calibrator.classifier.conditioning(), lead_times);
    const Matrix<float> features = calibrator.normalizer.features(logits);
    std::vector<std::size_t> columns(dims.pixels());
    std::iota(columns.begin(), columns.end(), std::size_t{0});
    std::vector<float> scores =
        classify_columns(calibrator.classifier, features, column_leads(lead_times, dims.pixels_per_sample()), columns);
    return Tensor::from_f32({dims.samples, dims.height, dims.width}, std::move(scores));
}

Tensor apply_ss_flags(const SelectiveScaler& calibrator, const Tensor& logits, std::span<const std::uint8_t> flags) {
    const double t_ss = calibrator.temperature();
    std::vector<double> temperature(flags.size());
    for (std::size_t i = 0; i < flags.size(); ++i) temperature[i] = flags[i] ? t_ss : 1.0;
    return tempered_softmax(logits, temperature);
}

Tensor apply_ss(const SelectiveScaler& calibrator, const Tensor& logits, const Tensor& lead_times) {
    const Tensor scores = ss_scores(calibrator, logits, lead_times);
    std::vector<std::uint8_t> flags(scores.size());
    const auto s = scores.f32();
    for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = static_cast<double>(s[i]) > calibrator.threshold ? 1 : 0;
    return apply_ss_flags(calibrator, logits, flags);
}

// ---------------------------------------------------------------------------
// Uniform contract

Tensor apply_calibrator(const Calibrator& calibrator, const Tensor& logits, const Tensor& lead_times) {
    if (logits.rank() != 4) {
        throw ValidationError(ValidationError::Kind::shape_mismatch, "logits", "logits must have shape [N,K,H,W]");
    }
    check_classes(fit_metadata(calibrator), logits.dim(1));
    return std::visit(overloaded{
                          [&](const GlobalTemperature& c) { return apply_temperature(c, logits); },
                          [&](const LtsRegressor& c) { return apply_lts(c, logits, lead_times); },
                          [&](const SelectiveScaler& c) { return apply_ss(c, logits, lead_times); },
                      },
                      calibrator);
}

namespace {

ordered_json fit_to_json(const FitMetadata& fit) {
    return ordered_json{{"samples", fit.samples},       {"pixels", fit.pixels},           {"classes", fit.classes},
                        {"lead_times", fit.lead_times}, {"seed", fit.seed},               {"epochs", fit.epochs},
                        {"final_loss", fit.final_loss}, {"dataset_digest", fit.dataset_digest}, {"notes", fit.notes}};
}

FitMetadata fit_from_json(const ordered_json& j) {
    FitMetadata fit;
    fit.samples = j.at("samples").get<std::size_t>();
    fit.pixels = j.at("pixels").get<std::size_t>();
    fit.classes = j.at("classes").get<std::size_t>();
    fit.lead_times = j.at("lead_times").get<std::size_t>();
    fit.seed = j.at("seed").get<std::uint64_t>();
    fit.epochs = j.at("epochs").get<std::size_t>();
    fit.final_loss = j.at("final_loss").get<double>();
    fit.dataset_digest = j.at("dataset_digest").get<std::string>();
    fit.notes = j.at("notes").get<std::vector<std::string>>();
    return fit;
}

double parse_exact(const ordered_json& j) {
    const std::string text = j.get<std::string>();
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) throw std::invalid_argument("bad decimal '" + text + "'");
    return value;
}

void save_normalizer(const InputNormalizer& norm, const std::filesystem::path& dir, ordered_json& doc) {
    write_tensor(Tensor::from_f32({norm.mean.size()}, norm.mean), dir / "input_mean.fct1");
    write_tensor(Tensor::from_f32({norm.scale.size()}, norm.scale), dir / "input_scale.fct1");
    doc["input_normalization"] = {{"transform", "(z - max(z) - mean) / scale"},
                                  {"mean_file", "input_mean.fct1"},
                                  {"scale_file", "input_scale.fct1"}};
}

InputNormalizer load_normalizer(const std::filesystem::path& dir, const ordered_json& doc) {
    const auto& n = doc.at("input_normalization");
    const Tensor mean = read_tensor(dir / n.at("mean_file").get<std::string>());
    const Tensor scale = read_tensor(dir / n.at("scale_file").get<std::string>());
    if (mean.shape() != scale.shape() || mean.rank() != 1) {
        throw FormatError(FormatError::Kind::bad_shape, "input normalisation tensors must be matching vectors");
    }
    return {std::vector<float>(mean.f32().begin(), mean.f32().end()),
            std::vector<float>(scale.f32().begin(), scale.f32().end())};
}

}  // namespace

void save_calibrator(const Calibrator& calibrator, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ordered_json doc;
    doc["format"] = "tcal.calibrator";
    doc["version"] = calibrator_format_version;
    doc["method"] = method_tag(calibrator);
    std::visit(overloaded{
                   [&](const GlobalTemperature& c) {
                       doc["temperature"] = format_double(c.temperature);
                       doc["parameter_count"] = 1;
                   },
                   [&](const LtsRegressor& c) {
                       doc["conditioned"] = c.conditioned;
                       doc["temperature_activation"] = "exp";
                       doc["parameter_count"] = c.network.parameter_count();
                       doc["network"] = diffnet::network_manifest(c.network, "network.");
                       diffnet::save_parameters(c.network, dir, "network.");
                       save_normalizer(c.normalizer, dir, doc);
                   },
                   [&](const SelectiveScaler& c) {
                       doc["conditioned"] = c.classifier.conditioning().has_value();
                       doc["threshold"] = format_double(c.threshold);
                       doc["temperature_param"] = format_double(c.temperature_param);
                       doc["temperature"] = format_double(c.temperature());
                       doc["temperature_activation"] = "1 + softplus(a)";
                       doc["parameter_count"] = c.classifier.parameter_count() + 1;
                       doc["network"] = diffnet::network_manifest(c.classifier, "classifier.");
                       diffnet::save_parameters(c.classifier, dir, "classifier.");
                       save_normalizer(c.normalizer, dir, doc);
                   },
               },
               calibrator);
    doc["fit"] = fit_to_json(fit_metadata(calibrator));
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << doc.dump(2) << '\n';
    if (!out) throw FormatError(FormatError::Kind::io_failure, "cannot write " + (dir / "manifest.json").string());
}

Calibrator load_calibrator(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw FormatError(FormatError::Kind::io_failure, "cannot open " + path.string());
    try {
        const ordered_json doc = ordered_json::parse(in);
        if (doc.at("format").get<std::string>() != "tcal.calibrator") {
            throw FormatError(FormatError::Kind::bad_magic, path.string() + " is not a calibrator manifest");
        }
        const int version = doc.at("version").get<int>();
        if (version != calibrator_format_version) {
            throw FormatError(FormatError::Kind::bad_shape, path.string() + ": unsupported calibrator version " +
                                                                std::to_string(version));
        }
        const std::string method = doc.at("method").get<std::string>();
        const FitMetadata fit = fit_from_json(doc.at("fit"));
        if (method == "ts") {
            GlobalTemperature c{parse_exact(doc.at("temperature")), fit};
            if (!(c.temperature > 0.0)) throw FormatError(FormatError::Kind::bad_shape, "temperature must be > 0");
            return c;
        }
        if (method == "lts") {
            return LtsRegressor{diffnet::load_network(doc.at("network"), dir), load_normalizer(dir, doc),
                                doc.at("conditioned").get<bool>(), fit};
        }
        if (method == "ss") {
            return SelectiveScaler{diffnet::load_network(doc.at("network"), dir), load_normalizer(dir, doc),
                                   parse_exact(doc.at("threshold")), parse_exact(doc.at("temperature_param")), fit};
        }
        throw FormatError(FormatError::Kind::bad_shape, path.string() + ": unknown method '" + method + "'");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::bad_shape, path.string() + ": malformed manifest: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::bad_shape, path.string() + ": " + e.what());
    }
}

}  // namespace tcal
