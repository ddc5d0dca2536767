#include "tcal/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "tcal/softmax.hpp"

namespace tcal {

namespace {

bool same_threshold(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b)); }

std::size_t lead_index(const Tensor& lead_times, std::size_t n) {
    return static_cast<std::size_t>(lead_times.i64()[n]);
}

/// Uniform average of the engaged entries; NaN when there are none.
double average_of(const std::vector<std::optional<double>>& values) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& v : values) {
        if (v) {
            sum += *v;
            ++n;
        }
    }
    return n == 0 ? std::nan("") : sum / static_cast<double>(n);
}

/// Gathers one pixel's K probabilities into `out` and returns the suffix sums
/// tail[k] = sum_{c >= k} p_c (tail has K+1 entries, tail[K] = 0).
void pixel_tail_sums(std::span<const float> probs, std::size_t base, std::size_t stride, std::size_t classes,
                     std::vector<double>& tail) {
    tail.assign(classes + 1, 0.0);
    for (std::size_t c = classes; c-- > 0;) tail[c] = tail[c + 1] + static_cast<double>(probs[base + c * stride]);
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Binnings

RateBinning RateBinning::default_for(std::size_t classes) {
    if (classes < 2) throw std::invalid_argument("rate binning needs at least 2 classes");
    if (classes == 12) return {{0.2, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0}};
    if (classes == 2) return {{1.0}};
    std::vector<double> edges(classes - 1);
    const double lo = std::log(0.2);
    const double hi = std::log(10.0);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(edges.size() - 1));
    }
    return {edges};
}

std::size_t RateBinning::threshold_index(double mm_per_h) const {
    for (std::size_t k = 0; k < edges_mm_per_h.size(); ++k) {
        if (same_threshold(edges_mm_per_h[k], mm_per_h)) return k;
    }
    throw std::invalid_argument("threshold " + format_double(mm_per_h) + " mm/h is not a rate-bin edge");
}

void RateBinning::validate() const {
    if (edges_mm_per_h.empty()) throw std::invalid_argument("rate binning needs at least one edge");
    for (std::size_t i = 0; i < edges_mm_per_h.size(); ++i) {
        if (!(edges_mm_per_h[i] > 0.0)) throw std::invalid_argument("rate edges must be positive");
        if (i > 0 && !(edges_mm_per_h[i] > edges_mm_per_h[i - 1])) {
            throw std::invalid_argument("rate edges must be strictly ascending");
        }
    }
}

void ConfidenceBinning::validate() const {
    if (bins < 2) throw std::invalid_argument("confidence binning needs B >= 2");
}

std::size_t assign_bin(double confidence, const ConfidenceBinning& binning) {
    if (!(confidence >= 0.0 && confidence <= 1.0)) {
        throw std::domain_error("confidence " + format_double(confidence) + " outside [0, 1]");
    }
    const std::size_t last = binning.bins - 1;
    auto b = std::min(static_cast<std::size_t>(confidence * static_cast<double>(binning.bins)), last);
    // Make the index agree with lower()/upper() where confidence*B rounds across an edge.
    while (b > 0 && confidence < binning.lower(b)) --b;
    while (b < last && confidence >= binning.lower(b + 1)) ++b;
    return b;
}

// ---------------------------------------------------------------------------
// Probabilities

Tensor class_probabilities(const Tensor& logits) { return tempered_softmax(logits, {}); }

Tensor exceedance_probabilities(const Tensor& probs, const RateBinning& binning) {
    if (probs.rank() != 4) throw ValidationError(ValidationError::Kind::shape_mismatch, "probs", "probs must be [N,K,H,W]");
    const std::size_t n_samples = probs.dim(0), classes = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
    if (classes != binning.classes()) {
        throw ValidationError(ValidationError::Kind::incompatible, "probs",
                              "probs have " + std::to_string(classes) + " classes, binning has " +
                                  std::to_string(binning.classes()));
    }
    const auto p = probs.f32();
    Tensor out = Tensor::zeros(DType::f32, {n_samples, classes - 1, probs.dim(2), probs.dim(3)});
    auto o = out.f32();
    std::vector<double> tail;
    for (std::size_t n = 0; n < n_samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            pixel_tail_sums(p, n * classes * hw + px, hw, classes, tail);
            for (std::size_t k = 0; k + 1 < classes; ++k) {
                o[(n * (classes - 1) + k) * hw + px] = static_cast<float>(clamp01(tail[k + 1]));
            }
        }
    }
    return out;
}

Tensor exceedance_labels(const Tensor& labels, const RateBinning& binning) {
    if (labels.rank() != 3) throw ValidationError(ValidationError::Kind::shape_mismatch, "labels", "labels must be [N,H,W]");
    const std::size_t n_samples = labels.dim(0), hw = labels.dim(1) * labels.dim(2);
    const std::size_t thresholds = binning.thresholds();
    const auto y = labels.i64();
    Tensor out = Tensor::zeros(DType::i64, {n_samples, thresholds, labels.dim(1), labels.dim(2)});
    auto o = out.i64();
    for (std::size_t n = 0; n < n_samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            const std::int64_t label = y[n * hw + px];
            if (label < 0 || label > static_cast<std::int64_t>(thresholds)) {
                throw ValidationError(ValidationError::Kind::out_of_range, "labels",
                                      "label value " + std::to_string(label) + " outside 0.." + std::to_string(thresholds));
            }
            for (std::size_t k = 0; k < thresholds; ++k) {
                o[(n * thresholds + k) * hw + px] = label > static_cast<std::int64_t>(k) ? 1 : 0;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reliability table

ReliabilityTable::ReliabilityTable(std::vector<double> thresholds_mm_per_h, std::size_t lead_times,
                                   ConfidenceBinning binning, std::vector<ReliabilityCell> cells)
    : thresholds_(std::move(thresholds_mm_per_h)), lead_times_(lead_times), binning_(binning), cells_(std::move(cells)) {
    if (cells_.size() != thresholds_.size() * lead_times_ * binning_.bins) {
        throw std::invalid_argument("reliability table cell count does not match its dimensions");
    }
}

std::int64_t ReliabilityTable::predictions(std::size_t threshold, std::size_t lead) const {
    std::int64_t total = 0;
    for (std::size_t b = 0; b < bins(); ++b) total += cell(threshold, lead, b).count;
    return total;
}

ReliabilityAccumulator::ReliabilityAccumulator(std::vector<double> thresholds_mm_per_h, std::size_t lead_times,
                                               ConfidenceBinning binning)
    : thresholds_(std::move(thresholds_mm_per_h)),
      lead_times_(lead_times),
      binning_(binning),
      sums_(thresholds_.size() * lead_times * binning.bins) {
    binning_.validate();
}

void ReliabilityAccumulator::add(std::size_t threshold, std::size_t lead, double confidence, bool event) {
    if (threshold >= thresholds_.size() || lead >= lead_times_) {
        throw std::out_of_range("reliability cell index out of range");
    }
    Sums& s = sums_[(threshold * lead_times_ + lead) * binning_.bins + assign_bin(confidence, binning_)];
    s.count += 1;
    s.conf += confidence;
    s.events += event ? 1.0 : 0.0;
}

ReliabilityTable ReliabilityAccumulator::finish() const {
    std::vector<ReliabilityCell> cells(sums_.size());
    for (std::size_t i = 0; i < sums_.size(); ++i) {
        const Sums& s = sums_[i];
        if (s.count > 0) {
            const auto n = static_cast<double>(s.count);
            cells[i] = {s.count, s.conf / n, s.events / n};
        }
    }
    return {thresholds_, lead_times_, binning_, std::move(cells)};
}

ReliabilityTable reliability_table(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                                   const RateBinning& rate_binning, const ConfidenceBinning& conf_binning,
                                   std::size_t lead_time_count) {
    const DatasetDims dims = validate_probabilities(probs, labels, lead_times, lead_time_count);
    if (dims.classes != rate_binning.classes()) {
        throw ValidationError(ValidationError::Kind::incompatible, "probs",
                              "probs have " + std::to_string(dims.classes) + " classes, rate binning has " +
                                  std::to_string(rate_binning.classes()));
    }
    const std::size_t hw = dims.pixels_per_sample();
    const auto p = probs.f32();
    const auto y = labels.i64();
    ReliabilityAccumulator acc(rate_binning.edges_mm_per_h, dims.lead_times, conf_binning);
    std::vector<double> tail;
    for (std::size_t n = 0; n < dims.samples; ++n) {
        const std::size_t lead = lead_index(lead_times, n);
        for (std::size_t px = 0; px < hw; ++px) {
            pixel_tail_sums(p, n * dims.classes * hw + px, hw, dims.classes, tail);
            const std::int64_t label = y[n * hw + px];
            for (std::size_t k = 0; k + 1 < dims.classes; ++k) {
                acc.add(k, lead, clamp01(tail[k + 1]), label > static_cast<std::int64_t>(k));
            }
        }
    }
    return acc.finish();
}

// ---------------------------------------------------------------------------
// Scores

namespace {

struct BinSums {
    std::int64_t count = 0;
    double conf = 0.0;
    double hits = 0.0;
};

/// sum_b (n_b / N) |hits_b/n_b - conf_b/n_b|
double weighted_gap(std::span<const BinSums> bins) {
    std::int64_t total = 0;
    for (const auto& b : bins) total += b.count;
    if (total == 0) return 0.0;
    double score = 0.0;
    for (const auto& b : bins) {
        if (b.count == 0) continue;
        const auto n = static_cast<double>(b.count);
        score += (n / static_cast<double>(total)) * std::abs(b.hits / n - b.conf / n);
    }
    return score;
}

}  // namespace

double ece_from_confidences(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                            const ConfidenceBinning& binning) {
    binning.validate();
    if (confidences.size() != correct.size()) throw std::invalid_argument("confidence/correctness length mismatch");
    std::vector<BinSums> bins(binning.bins);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        BinSums& b = bins[assign_bin(confidences[i], binning)];
        b.count += 1;
        b.conf += confidences[i];
        b.hits += correct[i] ? 1.0 : 0.0;
    }
    return weighted_gap(bins);
}

GroupedScore ece(const Tensor& probs, const Tensor& labels, const Tensor& lead_times, const ConfidenceBinning& binning,
                 std::size_t lead_time_count) {
    binning.validate();
    const DatasetDims dims = validate_probabilities(probs, labels, lead_times, lead_time_count);
    const std::size_t hw = dims.pixels_per_sample();
    const auto p = probs.f32();
    const auto y = labels.i64();
    std::vector<BinSums> bins(dims.lead_times * binning.bins);
    for (std::size_t n = 0; n < dims.samples; ++n) {
        const std::size_t lead = lead_index(lead_times, n);
        for (std::size_t px = 0; px < hw; ++px) {
            const std::size_t base = n * dims.classes * hw + px;
            std::size_t best = 0;
            for (std::size_t c = 1; c < dims.classes; ++c) {
                if (p[base + c * hw] > p[base + best * hw]) best = c;
            }
            const double conf = clamp01(p[base + best * hw]);
            BinSums& b = bins[lead * binning.bins + assign_bin(conf, binning)];
            b.count += 1;
            b.conf += conf;
            b.hits += y[n * hw + px] == static_cast<std::int64_t>(best) ? 1.0 : 0.0;
        }
    }
    GroupedScore score;
    for (std::size_t l = 0; l < dims.lead_times; ++l) {
        const std::span<const BinSums> lead_bins(bins.data() + l * binning.bins, binning.bins);
        const bool any = std::ranges::any_of(lead_bins, [](const BinSums& b) { return b.count > 0; });
        score.per_lead_time.push_back(any ? std::optional<double>(weighted_gap(lead_bins)) : std::nullopt);
    }
    score.average = average_of(score.per_lead_time);
    return score;
}

GroupedScore sce(const Tensor& probs, const Tensor& labels, const Tensor& lead_times, const ConfidenceBinning& binning,
                 std::size_t lead_time_count) {
    binning.validate();
    const DatasetDims dims = validate_probabilities(probs, labels, lead_times, lead_time_count);
    const std::size_t hw = dims.pixels_per_sample();
    const std::size_t B = binning.bins, K = dims.classes;
    const auto p = probs.f32();
    const auto y = labels.i64();
    std::vector<BinSums> bins(dims.lead_times * K * B);
    for (std::size_t n = 0; n < dims.samples; ++n) {
        const std::size_t lead = lead_index(lead_times, n);
        for (std::size_t px = 0; px < hw; ++px) {
            const std::int64_t label = y[n * hw + px];
            for (std::size_t c = 0; c < K; ++c) {
                const double conf = clamp01(p[(n * K + c) * hw + px]);
                BinSums& b = bins[(lead * K + c) * B + assign_bin(conf, binning)];
                b.count += 1;
                b.conf += conf;
                b.hits += label == static_cast<std::int64_t>(c) ? 1.0 : 0.0;
            }
        }
    }
    GroupedScore score;
    for (std::size_t l = 0; l < dims.lead_times; ++l) {
        double sum = 0.0;
        bool any = false;
        for (std::size_t c = 0; c < K; ++c) {
            const std::span<const BinSums> class_bins(bins.data() + (l * K + c) * B, B);
            any = any || std::ranges::any_of(class_bins, [](const BinSums& b) { return b.count > 0; });
            sum += weighted_gap(class_bins);
        }
        score.per_lead_time.push_back(any ? std::optional<double>(sum / static_cast<double>(K)) : std::nullopt);
    }
    score.average = average_of(score.per_lead_time);
    return score;
}

GroupedScore etce(const ReliabilityTable& table) {
    GroupedScore score;
    for (std::size_t l = 0; l < table.lead_times(); ++l) {
        double threshold_sum = 0.0;
        std::size_t thresholds_used = 0;
        for (std::size_t k = 0; k < table.thresholds(); ++k) {
            double gap_sum = 0.0;
            std::size_t nonempty = 0;
            for (std::size_t b = 0; b < table.bins(); ++b) {
                const ReliabilityCell& cell = table.cell(k, l, b);
                if (cell.count == 0) continue;
                gap_sum += std::abs(cell.obs_freq - cell.mean_conf);
                ++nonempty;
            }
            if (nonempty == 0) continue;
            threshold_sum += gap_sum / static_cast<double>(nonempty);
            ++thresholds_used;
        }
        score.per_lead_time.push_back(thresholds_used == 0
                                          ? std::nullopt
                                          : std::optional<double>(threshold_sum / static_cast<double>(thresholds_used)));
    }
    if (std::ranges::none_of(score.per_lead_time, [](const auto& v) { return v.has_value(); })) {
        throw ValidationError(ValidationError::Kind::empty, "", "reliability table holds no predictions");
    }
    score.average = average_of(score.per_lead_time);
    return score;
}

double f1_score(const ConfusionCounts& counts) {
    const std::int64_t denom = 2 * counts.tp + counts.fp + counts.fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(counts.tp) / static_cast<double>(denom);
}

GroupedScore f1_at_threshold(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                             const RateBinning& rate_binning, double threshold_mm_per_h, std::size_t lead_time_count) {
    const std::size_t k = rate_binning.threshold_index(threshold_mm_per_h);
    const DatasetDims dims = validate_probabilities(probs, labels, lead_times, lead_time_count);
    if (dims.classes != rate_binning.classes()) {
        throw ValidationError(ValidationError::Kind::incompatible, "probs", "class count does not match rate binning");
    }
    const std::size_t hw = dims.pixels_per_sample();
    const auto p = probs.f32();
    const auto y = labels.i64();
    std::vector<ConfusionCounts> counts(dims.lead_times);
    std::vector<bool> seen(dims.lead_times, false);
    std::vector<double> tail;
    for (std::size_t n = 0; n < dims.samples; ++n) {
        const std::size_t lead = lead_index(lead_times, n);
        seen[lead] = true;
        for (std::size_t px = 0; px < hw; ++px) {
            pixel_tail_sums(p, n * dims.classes * hw + px, hw, dims.classes, tail);
            const bool predicted = tail[k + 1] > 0.5;
            const bool observed = y[n * hw + px] > static_cast<std::int64_t>(k);
            ConfusionCounts& c = counts[lead];
            if (predicted && observed) ++c.tp;
            else if (predicted) ++c.fp;
            else if (observed) ++c.fn;
            else ++c.tn;
        }
    }
    GroupedScore score;
    for (std::size_t l = 0; l < dims.lead_times; ++l) {
        score.per_lead_time.push_back(seen[l] ? std::optional<double>(f1_score(counts[l])) : std::nullopt);
    }
    score.average = average_of(score.per_lead_time);
    return score;
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positives) {
    if (scores.size() != positives.size()) throw std::invalid_argument("score/label length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::ranges::sort(order, [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double positive_rank_sum = 0.0;
    double n_pos = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (std::size_t t = i; t < j; ++t) {
            if (positives[order[t]]) {
                positive_rank_sum += mid_rank;
                n_pos += 1.0;
            }
        }
        i = j;
    }
    const double n_neg = static_cast<double>(scores.size()) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) return std::nan("");
    return (positive_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

// ---------------------------------------------------------------------------
// Exports

std::vector<DiagramRow> diagram_export(const ReliabilityTable& table, const DiagramSelection& selection) {
    std::vector<DiagramRow> rows;
    for (std::size_t k = 0; k < table.thresholds(); ++k) {
        const double threshold = table.threshold_values()[k];
        if (selection.threshold_mm_per_h && !same_threshold(*selection.threshold_mm_per_h, threshold)) continue;
        for (std::size_t l = 0; l < table.lead_times(); ++l) {
            if (selection.lead_time && *selection.lead_time != l) continue;
            for (std::size_t b = 0; b < table.bins(); ++b) {
                const ReliabilityCell& cell = table.cell(k, l, b);
                DiagramRow row{threshold, l, table.binning().lower(b), table.binning().upper(b), cell.count, {}, {}, {}};
                if (cell.count > 0) {
                    row.mean_conf = cell.mean_conf;
                    row.obs_freq = cell.obs_freq;
                    row.abs_gap = std::abs(cell.obs_freq - cell.mean_conf);
                }
                rows.push_back(row);
            }
        }
    }
    return rows;
}

std::string format_double(double value) {
    char buf[64];
    const auto result = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 17);
    return {buf, result.ptr};
}

void write_diagram_csv(std::ostream& out, std::span<const DiagramRow> rows) {
    const auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    out << diagram_csv_header << '\n';
    for (const DiagramRow& r : rows) {
        out << format_double(r.threshold_mm_per_h) << ',' << r.lead_time << ',' << format_double(r.bin_lo) << ','
            << format_double(r.bin_hi) << ',' << r.count << ',' << opt(r.mean_conf) << ',' << opt(r.obs_freq) << ','
            << opt(r.abs_gap) << '\n';
    }
}

CalibrationReport evaluate(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                           const RateBinning& rate_binning, const ConfidenceBinning& conf_binning,
                           double f1_threshold_mm_per_h, std::size_t lead_time_count) {
    const DatasetDims dims = validate_probabilities(probs, labels, lead_times, lead_time_count);
    CalibrationReport report;
    report.table = reliability_table(probs, labels, lead_times, rate_binning, conf_binning, dims.lead_times);
    report.etce = etce(report.table);
    report.ece = ece(probs, labels, lead_times, conf_binning, dims.lead_times);
    report.sce = sce(probs, labels, lead_times, conf_binning, dims.lead_times);
    report.f1 = f1_at_threshold(probs, labels, lead_times, rate_binning, f1_threshold_mm_per_h, dims.lead_times);
    report.bins = conf_binning.bins;
    report.thresholds_mm_per_h = rate_binning.edges_mm_per_h;
    report.f1_threshold_mm_per_h = f1_threshold_mm_per_h;
    report.samples = dims.samples;
    report.pixels = dims.pixels();
    report.pixels_per_lead_time.assign(dims.lead_times, 0);
    for (std::size_t n = 0; n < dims.samples; ++n) {
        report.pixels_per_lead_time[lead_index(lead_times, n)] += static_cast<std::int64_t>(dims.pixels_per_sample());
    }
    return report;
}

std::string report_to_json(const CalibrationReport& report) {
    using nlohmann::ordered_json;
    const auto grouped = [](const GroupedScore& s) {
        ordered_json per = ordered_json::array();
        for (const auto& v : s.per_lead_time) per.push_back(v ? ordered_json(*v) : ordered_json(nullptr));
        ordered_json avg = std::isnan(s.average) ? ordered_json(nullptr) : ordered_json(s.average);
        return ordered_json{{"per_lead_time", per}, {"average", avg}};
    };
    ordered_json counts = ordered_json::array();
    const ReliabilityTable& t = report.table;
    for (std::size_t k = 0; k < t.thresholds(); ++k) {
        ordered_json per_lead = ordered_json::array();
        for (std::size_t l = 0; l < t.lead_times(); ++l) {
            ordered_json per_bin = ordered_json::array();
            for (std::size_t b = 0; b < t.bins(); ++b) per_bin.push_back(t.cell(k, l, b).count);
            per_lead.push_back(per_bin);
        }
        counts.push_back(per_lead);
    }
    ordered_json doc;
    doc["schema"] = "tcal.calibration_report";
    doc["schema_version"] = 1;
    doc["metadata"] = {
        {"bins", report.bins},
        {"thresholds_mm_h", report.thresholds_mm_per_h},
        {"samples", report.samples},
        {"pixels", report.pixels},
        {"lead_times", report.pixels_per_lead_time.size()},
        {"pixels_per_lead_time", report.pixels_per_lead_time},
        {"etce_bin_weighting", "uniform over non-empty bins"},
        {"lead_time_average", "uniform over lead times with data"},
        {"f1_threshold_mm_h", report.f1_threshold_mm_per_h},
        {"f1_decision_rule", "exceedance_probability > 0.5"},
    };
    doc["ece"] = grouped(report.ece);
    doc["sce"] = grouped(report.sce);
    doc["etce"] = grouped(report.etce);
    doc["f1"] = grouped(report.f1);
    doc["bin_counts"] = counts;
    return doc.dump(2) + "\n";
}

}  // namespace tcal
