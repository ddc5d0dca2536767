#include "doctest.h"

#include <cmath>

#include "json.hpp"

#include "tcal/metrics.hpp"
#include "tcal/synth.hpp"

using namespace tcal;
using namespace tcal::synth;

namespace {

SynthScenario small(Distortion d = NoDistortion{}) {
    SynthScenario s;
    s.samples = 12;
    s.height = 4;
    s.width = 5;
    s.distortion = std::move(d);
    return s;
}

}  // namespace

TEST_CASE("generation is deterministic") {
    const SynthDataset a = generate(small(PlantedCorruption{}));
    const SynthDataset b = generate(small(PlantedCorruption{}));
    CHECK(a.logits == b.logits);
    CHECK(a.labels == b.labels);
    CHECK(a.lead_times == b.lead_times);

    SynthScenario other = small(PlantedCorruption{});
    other.seed = 43;
    CHECK_FALSE(generate(other).labels == a.labels);
}

TEST_CASE("shapes and lead times") {
    const SynthDataset d = generate(small());
    CHECK(d.logits.shape() == Shape{12, 12, 4, 5});
    CHECK(d.labels.shape() == Shape{12, 4, 5});
    CHECK(d.lead_times.shape() == Shape{12});
    for (std::size_t n = 0; n < 12; ++n) CHECK(d.lead_times.i64()[n] == static_cast<std::int64_t>(n % 6));
    CHECK_NOTHROW((void)validate_dataset(d.logits, d.labels, d.lead_times, 6));
}

TEST_CASE("labels are drawn before distortion") {
    const SynthDataset cold = generate(small(GlobalTemperature{0.5}));
    const SynthDataset plain = generate(small(GlobalTemperature{1.0}));
    CHECK(cold.labels == plain.labels);
    CHECK_FALSE(cold.logits == plain.logits);
    CHECK(generate(small(LeadTimeSchedule{default_schedule(6)})).labels == plain.labels);
}

TEST_CASE("undistorted logits recover the true distribution") {
    const SynthScenario s = small();
    const Tensor p = class_probabilities(generate(s).logits);
    const Tensor q = true_distribution(s);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p.f32()[i] - q.f32()[i]) < 1e-6);

    // Every pixel is a proper distribution respecting the floor.
    for (std::size_t n = 0; n < 12; ++n) {
        for (std::size_t px = 0; px < 20; ++px) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 12; ++c) {
                const double v = q.f32()[(n * 12 + c) * 20 + px];
                CHECK(v >= probability_floor * 0.99);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("temperature below one sharpens every pixel") {
    const SynthScenario s = small(GlobalTemperature{0.5});
    const Tensor p = class_probabilities(generate(s).logits);
    const Tensor q = true_distribution(s);
    for (std::size_t n = 0; n < 12; ++n) {
        for (std::size_t px = 0; px < 20; ++px) {
            float pmax = 0, qmax = 0, qmin = 1;
            for (std::size_t c = 0; c < 12; ++c) {
                pmax = std::max(pmax, p.f32()[(n * 12 + c) * 20 + px]);
                qmax = std::max(qmax, q.f32()[(n * 12 + c) * 20 + px]);
                qmin = std::min(qmin, q.f32()[(n * 12 + c) * 20 + px]);
            }
            if (qmax > qmin) CHECK(pmax > qmax);
        }
    }
}

TEST_CASE("schedule applies per lead time") {
    const SynthScenario s = small(LeadTimeSchedule{default_schedule(6)});
    const SynthDataset d = generate(s);
    const SynthDataset base = generate(small());
    const auto tau = default_schedule(6).tau;
    CHECK(tau.front() == 0.5);
    CHECK(tau.back() == 1.25);
    for (std::size_t n = 0; n < 12; ++n) {
        const double t = tau[n % 6];
        for (std::size_t i = 0; i < 12 * 20; ++i) {
            const std::size_t at = n * 12 * 20 + i;
            const double expected = base.logits.f32()[at] / t;
            CHECK(std::abs(d.logits.f32()[at] - expected) <= 1e-6 * std::abs(expected) + 1e-6);
        }
    }
}

TEST_CASE("planted corruption trigger") {
    const std::vector<double> sharp{0.0, -50.0, -60.0};
    CHECK_FALSE(planted_corruption_trigger(sharp, 0.25));
    const std::vector<double> tied{-1.0, -3.0, -1.0};
    CHECK(planted_corruption_trigger(tied, 0.25));
    CHECK(planted_corruption_trigger(tied, 0.0));
    const std::vector<double> close{-1.0, -1.2, -4.0};
    CHECK(planted_corruption_trigger(close, 0.25));
    CHECK_FALSE(planted_corruption_trigger(close, 0.15));

    // Default scenario, fixed seed: regression value 0.2431640625.
    const double rate = trigger_rate(SynthScenario{}, PlantedCorruption{}.gap);
    CHECK(rate >= 0.1);
    CHECK(rate <= 0.4);
    CHECK(rate == 0.2431640625);
}

TEST_CASE("planted corruption only touches firing pixels") {
    const SynthScenario s = small(PlantedCorruption{0.3, 0.25});
    const SynthDataset d = generate(s);
    const SynthDataset base = generate(small());
    std::size_t changed = 0;
    for (std::size_t n = 0; n < 12; ++n) {
        for (std::size_t px = 0; px < 20; ++px) {
            std::vector<double> z(12);
            for (std::size_t c = 0; c < 12; ++c) z[c] = base.logits.f32()[(n * 12 + c) * 20 + px];
            const bool fires = planted_corruption_trigger(z, 0.25);
            const std::size_t at = n * 12 * 20 + px;
            if (!fires) {
                CHECK(d.logits.f32()[at] == base.logits.f32()[at]);
            } else {
                ++changed;
                CHECK(d.logits.f32()[at] == doctest::Approx(base.logits.f32()[at] / 0.3).epsilon(1e-5));
            }
        }
    }
    CHECK(changed > 0);
}

TEST_CASE("distortion parsing") {
    CHECK(std::holds_alternative<NoDistortion>(parse_distortion("none", 6)));
    CHECK(std::get<GlobalTemperature>(parse_distortion("temp:0.5", 6)).tau == 0.5);
    CHECK(std::get<LeadTimeSchedule>(parse_distortion("schedule", 4)).tau.size() == 4);
    CHECK(std::get<LeadTimeSchedule>(parse_distortion("schedule:1,2", 2)).tau == std::vector<double>{1, 2});
    const auto planted = std::get<PlantedCorruption>(parse_distortion("planted:0.4,0.5", 6));
    CHECK(planted.tau_bad == 0.4);
    CHECK(planted.gap == 0.5);
    CHECK(distortion_to_string(parse_distortion("temp:0.8", 6)) == "temp:0.80000000000000004");
    CHECK_THROWS_AS((void)parse_distortion("temp", 6), std::invalid_argument);
    CHECK_THROWS_AS((void)parse_distortion("temp:abc", 6), std::invalid_argument);
    CHECK_THROWS_AS((void)parse_distortion("warp:2", 6), std::invalid_argument);
    CHECK_THROWS_AS((void)parse_distortion("planted:0.3", 6), std::invalid_argument);
}

TEST_CASE("scenario validation") {
    SynthScenario s = small(GlobalTemperature{0.0});
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = small(LeadTimeSchedule{{1.0, 2.0}});
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = small();
    s.classes = 1;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = small();
    s.lead_times = 0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = small();
    s.alpha = {1.0, 2.0};
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("default prior") {
    const auto a = SynthScenario::default_alpha(12);
    CHECK(a[0] == 2.0);
    CHECK(a[1] == 0.5);
    CHECK(a[11] == doctest::Approx(0.1));
    for (std::size_t c = 2; c < 12; ++c) CHECK(a[c] < a[c - 1]);
}

TEST_CASE("scenario JSON carries every field") {
    const auto doc = nlohmann::json::parse(scenario_to_json(small(PlantedCorruption{})));
    CHECK(doc["seed"] == 42);
    CHECK(doc["samples"] == 12);
    CHECK(doc["alpha"].size() == 12);
    CHECK(doc["distortion"] == "planted:0.29999999999999999,0.25");
}
