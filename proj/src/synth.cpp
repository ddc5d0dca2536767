#include "tcal/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "tcal/metrics.hpp"
#include "tcal/random.hpp"

namespace tcal::synth {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

double parse_number(std::string_view text) {
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw std::invalid_argument("not a number: '" + std::string(text) + "'");
    }
    return value;
}

std::vector<double> parse_list(std::string_view text) {
    std::vector<double> out;
    while (!text.empty()) {
        const auto comma = text.find(',');
        out.push_back(parse_number(text.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        text.remove_prefix(comma + 1);
    }
    return out;
}

/// One pixel's true distribution and label.
struct PixelDraw {
    std::vector<double> q;
    std::int64_t label = 0;
};

void draw_pixel(const SynthScenario& s, std::span<const double> alpha, std::size_t n, std::size_t px, PixelDraw& out) {
    Rng rng = Rng::keyed({s.seed, n, px});
    const std::size_t k = alpha.size();
    out.q.resize(k);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        out.q[c] = rng.gamma(alpha[c]);
        sum += out.q[c];
    }
    double floored_sum = 0.0;
    for (double& v : out.q) {
        v = std::max(sum > 0.0 ? v / sum : 0.0, probability_floor);
        floored_sum += v;
    }
    for (double& v : out.q) v /= floored_sum;

    const double u = rng.uniform();
    double cumulative = 0.0;
    out.label = static_cast<std::int64_t>(k - 1);
    for (std::size_t c = 0; c + 1 < k; ++c) {
        cumulative += out.q[c];
        if (u < cumulative) {
            out.label = static_cast<std::int64_t>(c);
            break;
        }
    }
}

}  // namespace

LeadTimeSchedule default_schedule(std::size_t lead_times) {
    LeadTimeSchedule schedule;
    for (std::size_t l = 0; l < lead_times; ++l) {
        schedule.tau.push_back(lead_times == 1 ? 0.5
                                               : 0.5 + 0.75 * static_cast<double>(l) / static_cast<double>(lead_times - 1));
    }
    return schedule;
}

Distortion parse_distortion(std::string_view text, std::size_t lead_times) {
    const auto colon = text.find(':');
    const std::string_view kind = text.substr(0, colon);
    const std::string_view args = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
    if (kind == "none" && args.empty()) return NoDistortion{};
    if (kind == "temp" && !args.empty()) return GlobalTemperature{parse_number(args)};
    if (kind == "schedule") return args.empty() ? default_schedule(lead_times) : LeadTimeSchedule{parse_list(args)};
    if (kind == "planted") {
        if (args.empty()) return PlantedCorruption{};
        const auto values = parse_list(args);
        if (values.size() != 2) throw std::invalid_argument("planted distortion takes <tau_bad>,<gap>");
        return PlantedCorruption{values[0], values[1]};
    }
    throw std::invalid_argument("unknown distortion '" + std::string(text) +
                                "' (expected none | temp:<tau> | schedule[:t0,t1,...] | planted[:tau_bad,gap])");
}

std::string distortion_to_string(const Distortion& distortion) {
    return std::visit(overloaded{
                          [](const NoDistortion&) { return std::string("none"); },
                          [](const GlobalTemperature& d) { return "temp:" + format_double(d.tau); },
                          [](const LeadTimeSchedule& d) {
                              std::string out = "schedule:";
                              for (std::size_t i = 0; i < d.tau.size(); ++i) out += (i ? "," : "") + format_double(d.tau[i]);
                              return out;
                          },
                          [](const PlantedCorruption& d) {
                              return "planted:" + format_double(d.tau_bad) + "," + format_double(d.gap);
                          },
                      },
                      distortion);
}

std::vector<double> SynthScenario::default_alpha(std::size_t classes) {
    std::vector<double> alpha(classes);
    if (classes == 0) return alpha;
    alpha[0] = 2.0;
    for (std::size_t c = 1; c < classes; ++c) {
        alpha[c] = classes == 2 ? 0.5 : 0.5 - 0.4 * static_cast<double>(c - 1) / static_cast<double>(classes - 2);
    }
    return alpha;
}

std::vector<double> SynthScenario::resolved_alpha() const { return alpha.empty() ? default_alpha(classes) : alpha; }

void SynthScenario::validate() const {
    if (samples == 0 || height == 0 || width == 0) throw std::invalid_argument("samples, height and width must be >= 1");
    if (classes < 2) throw std::invalid_argument("at least 2 classes are required");
    if (lead_times < 1) throw std::invalid_argument("at least 1 lead time is required");
    const auto a = resolved_alpha();
    if (a.size() != classes) throw std::invalid_argument("alpha must have one entry per class");
    if (std::ranges::any_of(a, [](double v) { return !(v > 0.0) || !std::isfinite(v); })) {
        throw std::invalid_argument("alpha entries must be positive and finite");
    }
    const auto positive = [](double t) { return t > 0.0 && std::isfinite(t); };
    std::visit(overloaded{
                   [](const NoDistortion&) {},
                   [&](const GlobalTemperature& d) {
                       if (!positive(d.tau)) throw std::invalid_argument("tau must be > 0");
                   },
                   [&](const LeadTimeSchedule& d) {
                       if (d.tau.size() != lead_times) {
                           throw std::invalid_argument("schedule needs one tau per lead time (" +
                                                       std::to_string(lead_times) + ")");
                       }
                       if (!std::ranges::all_of(d.tau, positive)) throw std::invalid_argument("tau must be > 0");
                   },
                   [&](const PlantedCorruption& d) {
                       if (!positive(d.tau_bad) || d.tau_bad >= 1.0) throw std::invalid_argument("tau_bad must be in (0, 1)");
                       if (!(d.gap >= 0.0)) throw std::invalid_argument("trigger gap must be >= 0");
                   },
               },
               distortion);
}

bool planted_corruption_trigger(std::span<const double> logits, double gap) {
    if (logits.size() < 2) return false;
    double first = -INFINITY, second = -INFINITY;
    for (double v : logits) {
        if (v > first) {
            second = first;
            first = v;
        } else if (v > second) {
            second = v;
        }
    }
    return first - second < gap || first == second;
}

SynthDataset generate(const SynthScenario& scenario) {
    scenario.validate();
    const auto alpha = scenario.resolved_alpha();
    const std::size_t n_samples = scenario.samples, k = scenario.classes;
    const std::size_t hw = scenario.height * scenario.width;

    std::vector<float> logits(n_samples * k * hw);
    std::vector<std::int64_t> labels(n_samples * hw);
    std::vector<std::int64_t> leads(n_samples);
    PixelDraw draw;
    std::vector<double> base(k);
    for (std::size_t n = 0; n < n_samples; ++n) {
        const std::size_t lead = n % scenario.lead_times;
        leads[n] = static_cast<std::int64_t>(lead);
        for (std::size_t px = 0; px < hw; ++px) {
            draw_pixel(scenario, alpha, n, px, draw);
            labels[n * hw + px] = draw.label;
            for (std::size_t c = 0; c < k; ++c) base[c] = std::log(draw.q[c]);
            const double tau = std::visit(overloaded{
                                              [](const NoDistortion&) { return 1.0; },
                                              [](const GlobalTemperature& d) { return d.tau; },
                                              [&](const LeadTimeSchedule& d) { return d.tau[lead]; },
                                              [&](const PlantedCorruption& d) {
                                                  return planted_corruption_trigger(base, d.gap) ? d.tau_bad : 1.0;
                                              },
                                          },
                                          scenario.distortion);
            for (std::size_t c = 0; c < k; ++c) logits[(n * k + c) * hw + px] = static_cast<float>(base[c] / tau);
        }
    }
    const Shape field{n_samples, k, scenario.height, scenario.width};
    return {Tensor::from_f32(field, std::move(logits)),
            Tensor::from_i64({n_samples, scenario.height, scenario.width}, std::move(labels)),
            Tensor::from_i64({n_samples}, std::move(leads))};
}

Tensor true_distribution(const SynthScenario& scenario) {
    scenario.validate();
    const auto alpha = scenario.resolved_alpha();
    const std::size_t k = scenario.classes, hw = scenario.height * scenario.width;
    std::vector<float> q(scenario.samples * k * hw);
    PixelDraw draw;
    for (std::size_t n = 0; n < scenario.samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            draw_pixel(scenario, alpha, n, px, draw);
            for (std::size_t c = 0; c < k; ++c) q[(n * k + c) * hw + px] = static_cast<float>(draw.q[c]);
        }
    }
    return Tensor::from_f32({scenario.samples, k, scenario.height, scenario.width}, std::move(q));
}

double trigger_rate(const SynthScenario& scenario, double gap) {
    scenario.validate();
    const auto alpha = scenario.resolved_alpha();
    const std::size_t hw = scenario.height * scenario.width;
    PixelDraw draw;
    std::vector<double> base(scenario.classes);
    std::size_t fired = 0;
    for (std::size_t n = 0; n < scenario.samples; ++n) {
        for (std::size_t px = 0; px < hw; ++px) {
            draw_pixel(scenario, alpha, n, px, draw);
            std::ranges::transform(draw.q, base.begin(), [](double v) { return std::log(v); });
            fired += planted_corruption_trigger(base, gap) ? 1 : 0;
        }
    }
    return static_cast<double>(fired) / static_cast<double>(scenario.samples * hw);
}

std::string scenario_to_json(const SynthScenario& scenario) {
    nlohmann::ordered_json doc;
    doc["samples"] = scenario.samples;
    doc["height"] = scenario.height;
    doc["width"] = scenario.width;
    doc["classes"] = scenario.classes;
    doc["lead_times"] = scenario.lead_times;
    doc["alpha"] = scenario.resolved_alpha();
    doc["distortion"] = distortion_to_string(scenario.distortion);
    doc["probability_floor"] = probability_floor;
    doc["lead_time_assignment"] = "sample_index mod lead_times";
    doc["seed"] = scenario.seed;
    return doc.dump(2) + "\n";
}

}  // namespace tcal::synth
