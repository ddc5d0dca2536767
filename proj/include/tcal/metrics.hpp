#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tcal/tensor.hpp"
#include "tcal/tensor_io.hpp"

namespace tcal {

/// Precipitation rate classes, given by K-1 ascending interior edges in mm/h.
///
/// Class 0 is "below edges[0]" and class K-1 is "at or above edges[K-2]".
/// The exceedance thresholds are exactly these edges; the open top class has
/// no upper edge, so there are K-1 thresholds, not K.
struct RateBinning {
    std::vector<double> edges_mm_per_h;

    /// K = 12: 0.2, 0.5, 1, 1.5, 2, 3, 4, 5, 6, 8, 10. Other K: K-1 log-spaced
    /// edges over [0.2, 10] (a single edge at 1.0 for K = 2).
    static RateBinning default_for(std::size_t classes);

    [[nodiscard]] std::size_t classes() const { return edges_mm_per_h.size() + 1; }
    [[nodiscard]] std::size_t thresholds() const { return edges_mm_per_h.size(); }

    /// Index of the edge equal to `mm_per_h` (relative tolerance 1e-9).
    /// Throws std::invalid_argument when it is not an edge.
    [[nodiscard]] std::size_t threshold_index(double mm_per_h) const;

    /// Throws std::invalid_argument unless edges are non-empty, positive and strictly ascending.
    void validate() const;
};

/// B evenly spaced confidence bins over [0, 1]: [b/B, (b+1)/B), last bin closed.
struct ConfidenceBinning {
    std::size_t bins = 20;

    [[nodiscard]] double lower(std::size_t b) const { return static_cast<double>(b) / static_cast<double>(bins); }
    [[nodiscard]] double upper(std::size_t b) const { return static_cast<double>(b + 1) / static_cast<double>(bins); }
    void validate() const;
};

/// Throws std::domain_error for confidence outside [0, 1] (or NaN).
[[nodiscard]] std::size_t assign_bin(double confidence, const ConfidenceBinning& binning);

/// Per-pixel softmax over the K axis of [N,K,H,W] logits.
/// Throws NumericalError on NaN/Inf input.
[[nodiscard]] Tensor class_probabilities(const Tensor& logits);

/// [N,K,H,W] probabilities -> [N,K-1,H,W]; channel k = P(class > k).
[[nodiscard]] Tensor exceedance_probabilities(const Tensor& probs, const RateBinning& binning);

/// [N,H,W] labels -> [N,K-1,H,W] i64 indicators; channel k = 1 iff label > k.
[[nodiscard]] Tensor exceedance_labels(const Tensor& labels, const RateBinning& binning);

struct ReliabilityCell {
    std::int64_t count = 0;
    double mean_conf = 0.0;  ///< meaningful only when count > 0
    double obs_freq = 0.0;   ///< meaningful only when count > 0
};

/// Cells indexed by (threshold, lead time, confidence bin).
class ReliabilityTable {
public:
    ReliabilityTable() = default;
    ReliabilityTable(std::vector<double> thresholds_mm_per_h, std::size_t lead_times, ConfidenceBinning binning,
                     std::vector<ReliabilityCell> cells);

    [[nodiscard]] std::size_t thresholds() const { return thresholds_.size(); }
    [[nodiscard]] std::size_t lead_times() const { return lead_times_; }
    [[nodiscard]] std::size_t bins() const { return binning_.bins; }
    [[nodiscard]] const ConfidenceBinning& binning() const { return binning_; }
    [[nodiscard]] const std::vector<double>& threshold_values() const { return thresholds_; }

    [[nodiscard]] const ReliabilityCell& cell(std::size_t threshold, std::size_t lead, std::size_t bin) const {
        return cells_[(threshold * lead_times_ + lead) * binning_.bins + bin];
    }
    /// Number of predictions at (threshold, lead) summed over bins.
    [[nodiscard]] std::int64_t predictions(std::size_t threshold, std::size_t lead) const;

private:
    std::vector<double> thresholds_;
    std::size_t lead_times_ = 0;
    ConfidenceBinning binning_;
    std::vector<ReliabilityCell> cells_;
};

/// Streams (threshold, lead, confidence, event) observations into a table.
/// Sums are kept in f64 and reduced in insertion order.
class ReliabilityAccumulator {
public:
    ReliabilityAccumulator(std::vector<double> thresholds_mm_per_h, std::size_t lead_times, ConfidenceBinning binning);

    void add(std::size_t threshold, std::size_t lead, double confidence, bool event);
    [[nodiscard]] ReliabilityTable finish() const;

private:
    struct Sums {
        std::int64_t count = 0;
        double conf = 0.0;
        double events = 0.0;
    };
    std::vector<double> thresholds_;
    std::size_t lead_times_;
    ConfidenceBinning binning_;
    std::vector<Sums> sums_;
};

/// Builds the exceedance reliability table of a validated dataset.
/// `lead_time_count` = 0 infers L from the data. Throws ValidationError on empty input.
[[nodiscard]] ReliabilityTable reliability_table(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                                                 const RateBinning& rate_binning, const ConfidenceBinning& conf_binning,
                                                 std::size_t lead_time_count = 0);

/// A score evaluated per lead time plus its uniform average over the lead
/// times that have data. Lead times without predictions hold std::nullopt.
struct GroupedScore {
    std::vector<std::optional<double>> per_lead_time;
    double average = 0.0;
};

/// Sample-weighted ECE over (confidence, correct) pairs.
[[nodiscard]] double ece_from_confidences(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                                          const ConfidenceBinning& binning);

/// Top-class ECE, computed per lead time.
[[nodiscard]] GroupedScore ece(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                               const ConfidenceBinning& binning, std::size_t lead_time_count = 0);

/// Static calibration error: per-class binned error averaged over the K classes,
/// (1/K) sum_k sum_b (n_bk / N) |acc(b,k) - conf(b,k)|.
[[nodiscard]] GroupedScore sce(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                               const ConfidenceBinning& binning, std::size_t lead_time_count = 0);

/// ETCE per lead time: mean over thresholds of the uniformly weighted
/// |obs - conf| over that threshold's non-empty bins. Thresholds with no
/// non-empty bin drop out of the threshold average. Throws ValidationError
/// if the table holds no predictions at all.
[[nodiscard]] GroupedScore etce(const ReliabilityTable& table);

struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t tn = 0;
};

/// 2TP / (2TP + FP + FN), and 0 when TP + FP + FN = 0.
[[nodiscard]] double f1_score(const ConfusionCounts& counts);

/// F1 of the event "rate exceeds threshold", predicted positive iff the
/// exceedance probability is > 0.5. The threshold must be a rate edge.
[[nodiscard]] GroupedScore f1_at_threshold(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                                           const RateBinning& rate_binning, double threshold_mm_per_h,
                                           std::size_t lead_time_count = 0);

/// Area under the ROC curve (Mann-Whitney, ties count one half).
/// Returns NaN when either class is absent.
[[nodiscard]] double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positives);

struct DiagramRow {
    double threshold_mm_per_h = 0.0;
    std::size_t lead_time = 0;
    double bin_lo = 0.0;
    double bin_hi = 0.0;
    std::int64_t count = 0;
    std::optional<double> mean_conf;
    std::optional<double> obs_freq;
    std::optional<double> abs_gap;
};

struct DiagramSelection {
    std::optional<double> threshold_mm_per_h;
    std::optional<std::size_t> lead_time;
};

inline constexpr std::string_view diagram_csv_header =
    "threshold_mm_h,lead_time,bin_lo,bin_hi,count,mean_conf,obs_freq,abs_gap";

/// Rows ordered by (threshold, lead time, bin). Empty cells are emitted with
/// count 0 and no conf/freq/gap values. An unmatched threshold selects nothing.
[[nodiscard]] std::vector<DiagramRow> diagram_export(const ReliabilityTable& table, const DiagramSelection& selection = {});

/// Header line plus one line per row; blank fields for missing values, 17 significant digits.
void write_diagram_csv(std::ostream& out, std::span<const DiagramRow> rows);

struct CalibrationReport {
    GroupedScore ece;
    GroupedScore sce;
    GroupedScore etce;
    GroupedScore f1;
    ReliabilityTable table;
    std::size_t bins = 20;
    std::vector<double> thresholds_mm_per_h;
    double f1_threshold_mm_per_h = 1.0;
    std::size_t samples = 0;
    std::size_t pixels = 0;
    std::vector<std::int64_t> pixels_per_lead_time;
};

/// Computes every score on a probability field.
[[nodiscard]] CalibrationReport evaluate(const Tensor& probs, const Tensor& labels, const Tensor& lead_times,
                                         const RateBinning& rate_binning, const ConfidenceBinning& conf_binning,
                                         double f1_threshold_mm_per_h = 1.0, std::size_t lead_time_count = 0);

/// Serialises the report with the fixed key set documented in the README.
[[nodiscard]] std::string report_to_json(const CalibrationReport& report);

/// Formats with 17 significant digits (exact f64 round trip).
[[nodiscard]] std::string format_double(double value);

}  // namespace tcal
