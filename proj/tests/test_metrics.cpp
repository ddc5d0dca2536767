#include "doctest.h"

#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

#include "tcal/metrics.hpp"
#include "tcal/random.hpp"

using namespace tcal;

namespace {

/// True when a and b are at most `ulps` representable doubles apart.
bool within_ulps(double a, double b, int ulps) {
    for (int i = 0; i <= ulps; ++i) {
        if (a == b) return true;
        a = std::nextafter(a, b);
    }
    return a == b;
}

Tensor single_pixel_probs(const std::vector<float>& p) {
    return Tensor::from_f32({1, p.size(), 1, 1}, p);
}

/// Random [N,K,H,W] probability field with matching labels and lead times.
struct RandomField {
    Tensor probs, labels, leads;
};

RandomField random_field(std::uint64_t seed, std::size_t n, std::size_t k, std::size_t h, std::size_t w, std::size_t l) {
    Rng rng(seed);
    std::vector<float> p(n * k * h * w);
    std::vector<std::int64_t> y(n * h * w);
    std::vector<std::int64_t> lead(n);
    for (std::size_t s = 0; s < n; ++s) {
        lead[s] = static_cast<std::int64_t>(rng.below(l));
        for (std::size_t px = 0; px < h * w; ++px) {
            double sum = 0.0;
            std::vector<double> v(k);
            for (auto& x : v) sum += (x = rng.gamma(0.7));
            for (std::size_t c = 0; c < k; ++c) p[(s * k + c) * h * w + px] = static_cast<float>(v[c] / sum);
            y[s * h * w + px] = static_cast<std::int64_t>(rng.below(k));
        }
    }
    return {Tensor::from_f32({n, k, h, w}, p), Tensor::from_i64({n, h, w}, y), Tensor::from_i64({n}, lead)};
}

}  // namespace

TEST_CASE("rate binning defaults") {
    const RateBinning twelve = RateBinning::default_for(12);
    CHECK(twelve.edges_mm_per_h == std::vector<double>{0.2, 0.5, 1, 1.5, 2, 3, 4, 5, 6, 8, 10});
    CHECK(twelve.classes() == 12);
    CHECK(twelve.thresholds() == 11);
    CHECK(twelve.threshold_index(1.5) == 3);
    CHECK_THROWS_AS((void)twelve.threshold_index(1.7), std::invalid_argument);

    CHECK(RateBinning::default_for(2).edges_mm_per_h == std::vector<double>{1.0});
    const RateBinning five = RateBinning::default_for(5);
    REQUIRE(five.thresholds() == 4);
    CHECK(five.edges_mm_per_h.front() == doctest::Approx(0.2));
    CHECK(five.edges_mm_per_h.back() == doctest::Approx(10.0));
    CHECK_NOTHROW(five.validate());
    CHECK_THROWS_AS((RateBinning{{1.0, 0.5}}.validate()), std::invalid_argument);
    CHECK_THROWS_AS(ConfidenceBinning{1}.validate(), std::invalid_argument);
}

TEST_CASE("assign_bin edge policy") {
    const ConfidenceBinning b{20};
    CHECK(assign_bin(0.0, b) == 0);
    CHECK(assign_bin(1.0, b) == 19);
    CHECK(assign_bin(0.05, b) == 1);
    CHECK(assign_bin(0.0499999, b) == 0);
    CHECK(assign_bin(0.95, b) == 19);
    CHECK_THROWS_AS((void)assign_bin(1.0000001, b), std::domain_error);
    CHECK_THROWS_AS((void)assign_bin(-0.1, b), std::domain_error);
    CHECK_THROWS_AS((void)assign_bin(std::nan(""), b), std::domain_error);

    // Every bin's lower edge lands in that bin.
    for (std::size_t bins : {2u, 3u, 7u, 10u, 20u, 33u}) {
        const ConfidenceBinning cb{bins};
        for (std::size_t i = 0; i < bins; ++i) CHECK(assign_bin(cb.lower(i), cb) == i);
    }
}

TEST_CASE("class probabilities") {
    const Tensor uniform = class_probabilities(Tensor::zeros(DType::f32, {1, 12, 1, 1}));
    for (float p : uniform.f32()) CHECK(p == doctest::Approx(1.0 / 12.0));

    const Tensor two = class_probabilities(single_pixel_probs({static_cast<float>(std::log(2.0)), 0.0f}));
    CHECK(two.f32()[0] == doctest::Approx(2.0 / 3.0));
    CHECK(two.f32()[1] == doctest::Approx(1.0 / 3.0));

    Rng rng(3);
    std::vector<float> z(4 * 7 * 3 * 5);
    for (auto& v : z) v = static_cast<float>(rng.uniform(-30, 30));
    const Tensor p = class_probabilities(Tensor::from_f32({4, 7, 3, 5}, z));
    for (std::size_t n = 0; n < 4; ++n) {
        for (std::size_t px = 0; px < 15; ++px) {
            double sum = 0;
            for (std::size_t c = 0; c < 7; ++c) sum += p.f32()[(n * 7 + c) * 15 + px];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }

    CHECK_THROWS_AS((void)class_probabilities(single_pixel_probs({std::nanf(""), 0.0f})), NumericalError);
    CHECK_THROWS_AS((void)class_probabilities(single_pixel_probs({INFINITY, 0.0f})), NumericalError);
}

TEST_CASE("exceedance probabilities and labels") {
    const RateBinning three = RateBinning::default_for(3);
    const Tensor ex = exceedance_probabilities(single_pixel_probs({0.5f, 0.3f, 0.2f}), three);
    CHECK(ex.shape() == Shape{1, 2, 1, 1});
    CHECK(ex.f32()[0] == doctest::Approx(0.5));
    CHECK(ex.f32()[1] == doctest::Approx(0.2));

    const RateBinning twelve = RateBinning::default_for(12);
    std::vector<float> first(12, 0.0f), last(12, 0.0f);
    first[0] = 1.0f;
    last[11] = 1.0f;
    const Tensor none = exceedance_probabilities(single_pixel_probs(first), twelve);
    const Tensor all = exceedance_probabilities(single_pixel_probs(last), twelve);
    for (float v : none.f32()) CHECK(v == 0.0f);
    for (float v : all.f32()) CHECK(v == 1.0f);

    const Tensor labels = exceedance_labels(Tensor::from_i64({3, 1, 1}, {0, 11, 5}), twelve);
    REQUIRE(labels.shape() == Shape{3, 11, 1, 1});
    for (std::size_t k = 0; k < 11; ++k) {
        CHECK(labels.i64()[k] == 0);
        CHECK(labels.i64()[11 + k] == 1);
        CHECK(labels.i64()[22 + k] == (k < 5 ? 1 : 0));
    }
}

TEST_CASE("reliability cell from ten pixels") {
    ReliabilityAccumulator acc({1.0}, 1, ConfidenceBinning{20});
    for (int i = 0; i < 10; ++i) acc.add(0, 0, 0.82, i < 6);
    const ReliabilityTable table = acc.finish();
    const ReliabilityCell& cell = table.cell(0, 0, 16);
    CHECK(cell.count == 10);
    CHECK(cell.mean_conf == doctest::Approx(0.82).epsilon(1e-15));
    CHECK(cell.obs_freq == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(table.predictions(0, 0) == 10);
}

TEST_CASE("reliability table invariants") {
    const RandomField f = random_field(11, 9, 12, 4, 5, 3);
    const RateBinning rates = RateBinning::default_for(12);
    const ReliabilityTable table = reliability_table(f.probs, f.labels, f.leads, rates, ConfidenceBinning{20}, 3);
    std::vector<std::int64_t> per_lead(3, 0);
    for (std::int64_t l : f.leads.i64()) per_lead[static_cast<std::size_t>(l)] += 20;
    for (std::size_t k = 0; k < table.thresholds(); ++k) {
        for (std::size_t l = 0; l < 3; ++l) {
            std::int64_t sum = 0;
            for (std::size_t b = 0; b < 20; ++b) {
                const auto& c = table.cell(k, l, b);
                sum += c.count;
                if (c.count > 0) {
                    CHECK(c.mean_conf >= table.binning().lower(b));
                    CHECK(c.mean_conf <= table.binning().upper(b));
                }
            }
            CHECK(sum == per_lead[l]);
        }
    }
}

TEST_CASE("sharp correct predictions fill the outer bins only") {
    const std::vector<std::int64_t> y{0, 3, 11, 6};
    std::vector<float> p(4 * 12, 0.0f);
    for (std::size_t s = 0; s < 4; ++s) p[s * 12 + static_cast<std::size_t>(y[s])] = 1.0f;
    const Tensor probs = Tensor::from_f32({4, 12, 1, 1}, p);
    const Tensor labels = Tensor::from_i64({4, 1, 1}, y);
    const Tensor leads = Tensor::from_i64({4}, {0, 0, 0, 0});
    const ReliabilityTable t = reliability_table(probs, labels, leads, RateBinning::default_for(12), ConfidenceBinning{20});
    for (std::size_t k = 0; k < 11; ++k) {
        for (std::size_t b = 1; b < 19; ++b) CHECK(t.cell(k, 0, b).count == 0);
        if (t.cell(k, 0, 0).count) CHECK(t.cell(k, 0, 0).obs_freq == 0.0);
        if (t.cell(k, 0, 19).count) CHECK(t.cell(k, 0, 19).obs_freq == 1.0);
    }
    CHECK(etce(t).average == 0.0);
    CHECK(ece(probs, labels, leads, ConfidenceBinning{20}).average == 0.0);
    CHECK(sce(probs, labels, leads, ConfidenceBinning{20}).average == 0.0);
}

TEST_CASE("ECE hand instance") {
    const std::vector<double> conf{0.9, 0.8, 0.6, 0.55};
    const std::vector<std::uint8_t> correct{1, 0, 1, 1};
    // Bin [0.5, 0.75): acc 1, conf 0.575, weight 1/2. Bin [0.75, 1]: acc 0.5, conf 0.85, weight 1/2.
    // Those are the upper two of four equal bins.
    const double expected = 0.5 * std::abs(1.0 - 0.575) + 0.5 * std::abs(0.5 - 0.85);
    const double got = ece_from_confidences(conf, correct, ConfidenceBinning{4});
    CHECK(within_ulps(got, 0.3875, 4));
    CHECK(within_ulps(got, expected, 4));

    // With two bins all four points share [0.5, 1]: |0.75 - 0.7125|.
    CHECK(ece_from_confidences(conf, correct, ConfidenceBinning{2}) == doctest::Approx(0.0375).epsilon(1e-12));

    const std::vector<double> ones(5, 1.0);
    const std::vector<std::uint8_t> all(5, 1);
    CHECK(ece_from_confidences(ones, all, ConfidenceBinning{20}) == 0.0);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> c(37);
        std::vector<std::uint8_t> ok(37);
        for (std::size_t i = 0; i < c.size(); ++i) {
            c[i] = rng.uniform();
            ok[i] = rng.below(2) ? 1 : 0;
        }
        const double e = ece_from_confidences(c, ok, ConfidenceBinning{10});
        CHECK(e >= 0.0);
        CHECK(e <= 1.0);
    }
}

TEST_CASE("SCE two-class hand instance") {
    // Class 0 confidences 0.8, 0.3, 0.1 (correct 1, 0, 1); class 1 is the complement (correct 0, 1, 0).
    // B = 2: class 0 -> 2/3 * |0.5 - 0.2| + 1/3 * |1 - 0.8| = 4/15; class 1 -> 1/3 * 0.2 + 2/3 * |0.5 - 0.8| = 4/15.
    const Tensor probs = Tensor::from_f32({1, 2, 1, 3}, {0.8f, 0.3f, 0.1f, 0.2f, 0.7f, 0.9f});
    const Tensor labels = Tensor::from_i64({1, 1, 3}, {0, 1, 0});
    const Tensor leads = Tensor::from_i64({1}, {0});
    const GroupedScore s = sce(probs, labels, leads, ConfidenceBinning{2});
    CHECK(s.average == doctest::Approx(4.0 / 15.0).epsilon(1e-6));
    REQUIRE(s.per_lead_time.size() == 1);
    CHECK(*s.per_lead_time[0] == doctest::Approx(4.0 / 15.0).epsilon(1e-6));
}

TEST_CASE("SCE with a single class equals that class's ECE") {
    const Tensor probs = Tensor::from_f32({1, 1, 2, 2}, {1.0f, 1.0f, 1.0f, 1.0f});
    const Tensor labels = Tensor::zeros(DType::i64, {1, 2, 2});
    const Tensor leads = Tensor::from_i64({1}, {0});
    const std::vector<double> conf(4, 1.0);
    const std::vector<std::uint8_t> correct(4, 1);
    CHECK(sce(probs, labels, leads, ConfidenceBinning{20}).average ==
          ece_from_confidences(conf, correct, ConfidenceBinning{20}));
}

TEST_CASE("SCE against a brute-force oracle") {
    const RandomField f = random_field(21, 3, 4, 2, 3, 2);
    const ConfidenceBinning bins{5};
    const GroupedScore got = sce(f.probs, f.labels, f.leads, bins, 2);
    const auto p = f.probs.f32();
    const auto y = f.labels.i64();
    const auto leads = f.leads.i64();
    for (std::size_t l = 0; l < 2; ++l) {
        // Enumerate every (class, bin) pair directly.
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < 3; ++s) n += static_cast<std::size_t>(leads[s]) == l ? 6 : 0;
        if (n == 0) {
            CHECK_FALSE(got.per_lead_time[l].has_value());
            continue;
        }
        for (std::size_t k = 0; k < 4; ++k) {
            for (std::size_t b = 0; b < 5; ++b) {
                double conf = 0.0, hits = 0.0, count = 0.0;
                for (std::size_t s = 0; s < 3; ++s) {
                    if (static_cast<std::size_t>(leads[s]) != l) continue;
                    for (std::size_t px = 0; px < 6; ++px) {
                        const double c = p[(s * 4 + k) * 6 + px];
                        const auto bin = static_cast<std::size_t>(std::min(4.0, std::floor(c * 5.0)));
                        if (bin != b) continue;
                        conf += c;
                        hits += y[s * 6 + px] == static_cast<std::int64_t>(k) ? 1.0 : 0.0;
                        count += 1.0;
                    }
                }
                if (count > 0) total += count / static_cast<double>(n) * std::abs(hits / count - conf / count);
            }
        }
        REQUIRE(got.per_lead_time[l].has_value());
        CHECK(*got.per_lead_time[l] == doctest::Approx(total / 4.0).epsilon(1e-12));
    }
}

TEST_CASE("ETCE hand instances") {
    ReliabilityAccumulator single({1.0}, 1, ConfidenceBinning{20});
    for (int i = 0; i < 10; ++i) single.add(0, 0, 0.82, i < 6);
    const GroupedScore one = etce(single.finish());
    CHECK(within_ulps(one.average, 0.22, 4));
    CHECK(within_ulps(one.average, std::abs(0.6 - 0.82), 4));

    ReliabilityAccumulator pair({1.0}, 1, ConfidenceBinning{20});
    for (int i = 0; i < 4; ++i) pair.add(0, 0, 0.1, i == 0);
    for (int i = 0; i < 2; ++i) pair.add(0, 0, 0.9, i == 0);
    const GroupedScore two = etce(pair.finish());
    CHECK(two.average == 0.275);

    ReliabilityAccumulator exact({1.0, 2.0}, 2, ConfidenceBinning{4});
    for (int i = 0; i < 4; ++i) exact.add(0, 0, 0.25, i == 0);
    for (int i = 0; i < 2; ++i) exact.add(1, 1, 0.5, i == 0);
    CHECK(etce(exact.finish()).average == 0.0);

    CHECK_THROWS_AS((void)etce(ReliabilityAccumulator({1.0}, 1, ConfidenceBinning{20}).finish()), ValidationError);
}

TEST_CASE("ETCE skips thresholds and lead times without data") {
    ReliabilityAccumulator acc({0.5, 1.0}, 3, ConfidenceBinning{10});
    for (int i = 0; i < 10; ++i) acc.add(1, 2, 0.82, i < 6);
    const GroupedScore s = etce(acc.finish());
    CHECK_FALSE(s.per_lead_time[0].has_value());
    CHECK_FALSE(s.per_lead_time[1].has_value());
    REQUIRE(s.per_lead_time[2].has_value());
    CHECK(s.average == *s.per_lead_time[2]);
}

TEST_CASE("F1") {
    CHECK(f1_score({2, 1, 1, 0}) == doctest::Approx(2.0 / 3.0));
    CHECK(f1_score({5, 0, 0, 3}) == 1.0);
    CHECK(f1_score({0, 0, 0, 9}) == 0.0);

    // Exceedance probabilities at 1 mm/h (edge index 2): 0.9, 0.4, 0.6, 0.1; events 1, 1, 0, 0.
    std::vector<float> p(4 * 12, 0.0f);
    const std::vector<float> above{0.9f, 0.4f, 0.6f, 0.1f};
    for (std::size_t s = 0; s < 4; ++s) {
        p[s * 12 + 11] = above[s];
        p[s * 12 + 0] = 1.0f - above[s];
    }
    const Tensor probs = Tensor::from_f32({4, 12, 1, 1}, p);
    const Tensor labels = Tensor::from_i64({4, 1, 1}, {5, 3, 2, 0});
    const Tensor leads = Tensor::from_i64({4}, {0, 0, 0, 0});
    // TP 1, FP 1, FN 1 -> 0.5
    CHECK(f1_at_threshold(probs, labels, leads, RateBinning::default_for(12), 1.0).average == doctest::Approx(0.5));
    CHECK_THROWS_AS((void)f1_at_threshold(probs, labels, leads, RateBinning::default_for(12), 1.2), std::invalid_argument);
}

TEST_CASE("ROC AUC") {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<std::uint8_t> y{0, 0, 1, 1};
    CHECK(roc_auc(s, y) == doctest::Approx(0.75));
    const std::vector<double> tied{0.5, 0.5};
    const std::vector<std::uint8_t> ty{0, 1};
    CHECK(roc_auc(tied, ty) == 0.5);
    const std::vector<std::uint8_t> none{0, 0};
    CHECK(std::isnan(roc_auc(tied, none)));
}

TEST_CASE("diagram export") {
    const RandomField f = random_field(31, 6, 12, 3, 3, 2);
    const RateBinning rates = RateBinning::default_for(12);
    const ReliabilityTable table = reliability_table(f.probs, f.labels, f.leads, rates, ConfidenceBinning{20}, 2);
    const auto rows = diagram_export(table);
    REQUIRE(rows.size() == 11 * 2 * 20);
    CHECK(rows[0].threshold_mm_per_h == 0.2);
    CHECK(rows[0].lead_time == 0);
    CHECK(rows[0].bin_lo == 0.0);
    CHECK(rows[19].bin_hi == 1.0);
    CHECK(rows[20].lead_time == 1);

    // Re-aggregate abs_gap the way ETCE does.
    std::map<std::pair<double, std::size_t>, std::pair<double, int>> groups;
    for (const auto& r : rows) {
        if (r.count == 0) {
            CHECK_FALSE(r.mean_conf.has_value());
            CHECK_FALSE(r.abs_gap.has_value());
            continue;
        }
        REQUIRE(r.abs_gap.has_value());
        CHECK(*r.abs_gap == std::abs(*r.obs_freq - *r.mean_conf));
        auto& g = groups[{r.threshold_mm_per_h, r.lead_time}];
        g.first += *r.abs_gap;
        g.second += 1;
    }
    std::vector<double> per_lead_sum(2, 0.0);
    std::vector<int> per_lead_n(2, 0);
    for (const auto& [key, g] : groups) {
        per_lead_sum[key.second] += g.first / g.second;
        per_lead_n[key.second] += 1;
    }
    const GroupedScore score = etce(table);
    double avg = 0.0;
    for (std::size_t l = 0; l < 2; ++l) {
        const double v = per_lead_sum[l] / per_lead_n[l];
        CHECK(std::abs(v - *score.per_lead_time[l]) < 1e-12);
        avg += v / 2.0;
    }
    CHECK(std::abs(avg - score.average) < 1e-12);

    const auto filtered = diagram_export(table, {1.5, std::nullopt});
    CHECK(filtered.size() == 2 * 20);
    for (const auto& r : filtered) CHECK(r.threshold_mm_per_h == 1.5);
    CHECK(diagram_export(table, {1.7, std::nullopt}).empty());
    CHECK(diagram_export(table, {std::nullopt, std::size_t{1}}).size() == 11 * 20);
}

TEST_CASE("diagram CSV format") {
    ReliabilityAccumulator acc({1.0}, 1, ConfidenceBinning{2});
    acc.add(0, 0, 0.75, true);
    const auto rows = diagram_export(acc.finish());
    std::ostringstream out;
    write_diagram_csv(out, rows);
    CHECK(out.str() ==
          "threshold_mm_h,lead_time,bin_lo,bin_hi,count,mean_conf,obs_freq,abs_gap\n"
          "1,0,0,0.5,0,,,\n"
          "1,0,0.5,1,1,0.75,1,0.25\n");

    std::ostringstream empty;
    write_diagram_csv(empty, {});
    CHECK(empty.str() == std::string(diagram_csv_header) + "\n");
}

TEST_CASE("report JSON schema") {
    const RandomField f = random_field(41, 4, 12, 2, 2, 2);
    const CalibrationReport report =
        evaluate(f.probs, f.labels, f.leads, RateBinning::default_for(12), ConfidenceBinning{20}, 1.0, 2);
    const auto doc = nlohmann::ordered_json::parse(report_to_json(report));
    std::vector<std::string> keys;
    for (const auto& [k, v] : doc.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"schema", "schema_version", "metadata", "ece", "sce", "etce", "f1", "bin_counts"});
    for (const char* score : {"ece", "sce", "etce", "f1"}) {
        CHECK(doc[score]["per_lead_time"].size() == 2);
        CHECK(doc[score]["average"].is_number());
    }
    CHECK(doc["bin_counts"].size() == 11);
    CHECK(doc["bin_counts"][0].size() == 2);
    CHECK(doc["bin_counts"][0][0].size() == 20);
    CHECK(doc["metadata"]["f1_threshold_mm_h"] == 1.0);
    CHECK(doc["etce"]["average"].get<double>() == report.etce.average);
    CHECK(report_to_json(report) == report_to_json(report));
}

TEST_CASE("format_double round trips") {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
        const double v = rng.uniform(-1e6, 1e6) * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
        CHECK(std::stod(format_double(v)) == v);
    }
    CHECK(format_double(0.1) == "0.10000000000000001");
}
