#include "tcal/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "tcal/calibrators.hpp"
#include "tcal/digest.hpp"
#include "tcal/metrics.hpp"
#include "tcal/softmax.hpp"
#include "tcal/synth.hpp"
#include "tcal/tensor_io.hpp"

namespace tcal::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

/// Bad flag values that CLI11 cannot check on its own.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Dataset {
    Tensor logits;
    Tensor labels;
    Tensor lead_times;
};

Dataset load_dataset(const fs::path& dir) {
    return {read_tensor(dir / "logits.fct1"), read_tensor(dir / "labels.fct1"), read_tensor(dir / "lead_times.fct1")};
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw FormatError(FormatError::Kind::io_failure, "cannot write " + path.string());
}

/// Collects what a command read and wrote, then writes the run manifest.
class RunRecord {
public:
    RunRecord(std::string command, const std::vector<std::string>& args)
        : command_(std::move(command)), args_(args), start_(std::chrono::steady_clock::now()) {}

    void argument(const std::string& name, ordered_json value) { resolved_[name] = std::move(value); }
    void dataset(const std::string& role, const fs::path& dir) {
        inputs_.push_back({{"role", role}, {"path", dir.string()}, {"digest", dataset_digest(dir)}});
    }
    void input_file(const std::string& role, const fs::path& path) {
        inputs_.push_back({{"role", role}, {"path", path.string()}, {"digest", file_sha256(path)}});
    }
    void input_digest(const std::string& role, const fs::path& path, const std::string& digest) {
        inputs_.push_back({{"role", role}, {"path", path.string()}, {"digest", digest}});
    }
    void output(const fs::path& path) {
        outputs_.push_back({{"path", path.string()}, {"digest", file_sha256(path)}});
    }
    void seed(std::uint64_t s) { seed_ = s; }

    void write(const fs::path& path) const {
        ordered_json doc;
        doc["format"] = "tcal.run";
        doc["command"] = command_;
        doc["argv"] = args_;
        doc["arguments"] = resolved_;
        doc["inputs"] = inputs_;
        doc["outputs"] = outputs_;
        doc["seed"] = seed_ ? ordered_json(*seed_) : ordered_json(nullptr);
        doc["version"] = std::string(toolkit_version);
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
        doc["wall_clock_seconds"] = elapsed.count();
        write_text(path, doc.dump(2) + "\n");
    }

private:
    std::string command_;
    std::vector<std::string> args_;
    ordered_json resolved_ = ordered_json::object();
    ordered_json inputs_ = ordered_json::array();
    ordered_json outputs_ = ordered_json::array();
    std::optional<std::uint64_t> seed_;
    std::chrono::steady_clock::time_point start_;
};

fs::path file_manifest_path(const fs::path& file) { return fs::path(file.string() + ".run_manifest.json"); }

// -- synth --------------------------------------------------------------------

struct SynthArgs {
    synth::SynthScenario scenario;
    std::string distortion = "none";
    double alpha_scale = 1.0;
    fs::path out;
};

void add_synth(CLI::App& app, SynthArgs& a) {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic logit dataset");
    cmd->add_option("--samples", a.scenario.samples, "number of samples N")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--height", a.scenario.height, "field height H")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--width", a.scenario.width, "field width W")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--classes", a.scenario.classes, "rate classes K")->capture_default_str()->check(CLI::Range(2, 1 << 16));
    cmd->add_option("--lead-times", a.scenario.lead_times, "lead times L")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--distortion", a.distortion, "none | temp:<tau> | schedule[:t0,...] | planted[:tau_bad,gap]")
        ->capture_default_str();
    cmd->add_option("--seed", a.scenario.seed, "generator seed")->capture_default_str();
    cmd->add_option("--alpha-scale", a.alpha_scale, "multiplier on the default Dirichlet concentration")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cmd->add_option("--out", a.out, "output directory")->required();
}

int cmd_synth(SynthArgs& a, RunRecord& record) {
    try {
        a.scenario.distortion = synth::parse_distortion(a.distortion, a.scenario.lead_times);
        if (a.alpha_scale != 1.0) {
            a.scenario.alpha = synth::SynthScenario::default_alpha(a.scenario.classes);
            for (double& v : a.scenario.alpha) v *= a.alpha_scale;
        }
        a.scenario.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const synth::SynthDataset data = synth::generate(a.scenario);
    fs::create_directories(a.out);
    write_tensor(data.logits, a.out / "logits.fct1");
    write_tensor(data.labels, a.out / "labels.fct1");
    write_tensor(data.lead_times, a.out / "lead_times.fct1");
    write_text(a.out / "scenario.json", synth::scenario_to_json(a.scenario));

    record.argument("samples", a.scenario.samples);
    record.argument("height", a.scenario.height);
    record.argument("width", a.scenario.width);
    record.argument("classes", a.scenario.classes);
    record.argument("lead_times", a.scenario.lead_times);
    record.argument("distortion", synth::distortion_to_string(a.scenario.distortion));
    record.argument("alpha_scale", a.alpha_scale);
    record.argument("out", a.out.string());
    record.seed(a.scenario.seed);
    for (const char* name : {"logits.fct1", "labels.fct1", "lead_times.fct1", "scenario.json"}) record.output(a.out / name);
    record.write(a.out / "run_manifest.json");
    std::cout << "wrote dataset " << a.out.string() << " (" << data.labels.size() << " pixels)\n";
    return ok;
}

// -- eval ---------------------------------------------------------------------

struct EvalArgs {
    fs::path data;
    fs::path probs;
    std::size_t bins = 20;
    double f1_threshold = 1.0;
    fs::path diagram;
    fs::path out;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    auto* cmd = app.add_subcommand("eval", "Score calibration of a dataset or of calibrated probabilities");
    cmd->add_option("--data", a.data, "dataset directory (labels, lead times, and logits)")->required();
    cmd->add_option("--probs", a.probs, "probability tensor [N,K,H,W]; defaults to softmax of the logits");
    cmd->add_option("--bins", a.bins, "confidence bins B")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--f1-threshold", a.f1_threshold, "rate edge (mm/h) for the F1 score")->capture_default_str();
    cmd->add_option("--diagram", a.diagram, "also write the full reliability CSV here");
    cmd->add_option("--out", a.out, "report JSON path (stdout when omitted)");
}

/// Probabilities to score: --probs when given, softmax of the logits otherwise.
Tensor load_probabilities(const fs::path& probs_path, const Dataset& data, RunRecord& record) {
    if (probs_path.empty()) {
        (void)validate_dataset(data.logits, data.labels, data.lead_times);
        return class_probabilities(data.logits);
    }
    record.input_file("probs", probs_path);
    Tensor probs = read_tensor(probs_path);
    (void)validate_probabilities(probs, data.labels, data.lead_times);
    return probs;
}

Dataset load_eval_inputs(const fs::path& dir, bool need_logits) {
    if (need_logits) return load_dataset(dir);
    return {Tensor{}, read_tensor(dir / "labels.fct1"), read_tensor(dir / "lead_times.fct1")};
}

RateBinning checked_binning(std::size_t classes) {
    if (classes < 2) throw ValidationError(ValidationError::Kind::shape_mismatch, "probs", "need at least 2 classes");
    return RateBinning::default_for(classes);
}

double checked_threshold(const RateBinning& binning, double mm_per_h) {
    try {
        return binning.edges_mm_per_h[binning.threshold_index(mm_per_h)];
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

int cmd_eval(const EvalArgs& a, RunRecord& record) {
    const Dataset data = load_eval_inputs(a.data, a.probs.empty());
    record.dataset("data", a.data);
    const Tensor probs = load_probabilities(a.probs, data, record);
    const RateBinning rates = checked_binning(probs.dim(1));
    const double f1_threshold = checked_threshold(rates, a.f1_threshold);
    const CalibrationReport report = evaluate(probs, data.labels, data.lead_times, rates, ConfidenceBinning{a.bins}, f1_threshold);

    record.argument("bins", a.bins);
    record.argument("f1_threshold_mm_h", f1_threshold);
    record.argument("probs", a.probs.string());
    const std::string json = report_to_json(report);
    if (!a.diagram.empty()) {
        const auto rows = diagram_export(report.table);
        if (a.diagram.has_parent_path()) fs::create_directories(a.diagram.parent_path());
        std::ofstream csv(a.diagram, std::ios::binary | std::ios::trunc);
        write_diagram_csv(csv, rows);
        if (!csv) throw FormatError(FormatError::Kind::io_failure, "cannot write " + a.diagram.string());
        csv.close();
        record.argument("diagram", a.diagram.string());
        record.output(a.diagram);
    }
    if (a.out.empty()) {
        std::cout << json;
    } else {
        write_text(a.out, json);
        record.argument("out", a.out.string());
        record.output(a.out);
        std::cout << "ETCE " << format_double(report.etce.average) << "  ECE " << format_double(report.ece.average)
                  << "  F1@" << format_double(f1_threshold) << " " << format_double(report.f1.average) << '\n';
    }
    if (!a.out.empty()) {
        record.write(file_manifest_path(a.out));
    } else if (!a.diagram.empty()) {
        record.write(file_manifest_path(a.diagram));
    }
    return ok;
}

// -- fit ----------------------------------------------------------------------

struct FitArgs {
    fs::path data;
    std::string method;
    bool conditioned = true;
    std::optional<std::size_t> epochs;
    std::uint64_t seed = 0;
    fs::path out;
};

void add_fit(CLI::App& app, FitArgs& a) {
    auto* cmd = app.add_subcommand("fit", "Fit a calibrator and write a bundle directory");
    cmd->add_option("--data", a.data, "fit dataset directory")->required();
    cmd->add_option("--method", a.method, "ts | lts | ss")->required()->check(CLI::IsMember({"ts", "lts", "ss"}));
    cmd->add_option("--conditioned", a.conditioned, "FiLM lead-time conditioning for lts (true|false)")
        ->capture_default_str();
    cmd->add_option("--epochs", a.epochs, "training epochs (lts default 20, ss default 10)");
    cmd->add_option("--seed", a.seed, "training seed")->capture_default_str();
    cmd->add_option("--out", a.out, "bundle directory")->required();
}

int cmd_fit(const FitArgs& a, RunRecord& record) {
    const Dataset data = load_dataset(a.data);
    const std::string digest = dataset_digest(a.data);
    record.input_digest("data", a.data, digest);
    record.argument("method", a.method);
    record.seed(a.seed);

    Calibrator calibrator;
    if (a.method == "ts") {
        calibrator = fit_temperature(data.logits, data.labels, data.lead_times);
    } else if (a.method == "lts") {
        LtsOptions options;
        options.conditioned = a.conditioned;
        options.seed = a.seed;
        if (a.epochs) options.epochs = *a.epochs;
        record.argument("conditioned", a.conditioned);
        record.argument("epochs", options.epochs);
        calibrator = fit_lts(data.logits, data.labels, data.lead_times, options);
    } else {
        if (!a.conditioned) throw UsageError("selective scaling is always lead-time conditioned");
        SsOptions options;
        options.seed = a.seed;
        if (a.epochs) options.epochs = *a.epochs;
        record.argument("epochs", options.epochs);
        calibrator = fit_ss(data.logits, data.labels, data.lead_times, options);
    }
    fit_metadata(calibrator).dataset_digest = digest;
    if (a.method == "ts") fit_metadata(calibrator).seed = a.seed;

    if (fs::exists(a.out / "manifest.json")) fs::remove(a.out / "manifest.json");
    save_calibrator(calibrator, a.out);
    record.argument("out", a.out.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(a.out)) {
        if (entry.is_regular_file() && entry.path().filename() != "run_manifest.json") files.push_back(entry.path());
    }
    std::ranges::sort(files);
    for (const auto& f : files) record.output(f);
    record.write(a.out / "run_manifest.json");

    std::cout << "fitted " << a.method << " (final loss " << format_double(fit_metadata(calibrator).final_loss) << ")";
    if (const auto* ts = std::get_if<GlobalTemperature>(&calibrator)) std::cout << " T = " << format_double(ts->temperature);
    if (const auto* ss = std::get_if<SelectiveScaler>(&calibrator)) {
        std::cout << " theta = " << format_double(ss->threshold) << " T_ss = " << format_double(ss->temperature());
    }
    std::cout << '\n';
    return ok;
}

// -- apply --------------------------------------------------------------------

struct ApplyArgs {
    fs::path bundle;
    fs::path data;
    fs::path out;
};

void add_apply(CLI::App& app, ApplyArgs& a) {
    auto* cmd = app.add_subcommand("apply", "Apply a fitted calibrator to a dataset's logits");
    cmd->add_option("--bundle", a.bundle, "calibrator bundle directory")->required();
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--out", a.out, "output probability tensor (FCT1)")->required();
}

int cmd_apply(const ApplyArgs& a, RunRecord& record) {
    const Calibrator calibrator = load_calibrator(a.bundle);
    const Dataset data = load_dataset(a.data);
    const std::string digest = dataset_digest(a.data);
    record.input_digest("bundle", a.bundle, bundle_digest(a.bundle));
    record.input_digest("data", a.data, digest);
    if (fit_metadata(calibrator).dataset_digest == digest) {
        std::cerr << "warning: applying a calibrator to the dataset it was fitted on (digest " << digest << ")\n";
    }
    (void)validate_dataset(data.logits, data.labels, data.lead_times);
    const Tensor probs = apply_calibrator(calibrator, data.logits, data.lead_times);
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    write_tensor(probs, a.out);
    record.argument("method", method_tag(calibrator));
    record.argument("out", a.out.string());
    record.output(a.out);
    record.write(file_manifest_path(a.out));
    std::cout << "wrote " << a.out.string() << " " << shape_string(probs.shape()) << '\n';
    return ok;
}

// -- diagram ------------------------------------------------------------------

struct DiagramArgs {
    fs::path data;
    fs::path probs;
    std::optional<double> threshold;
    std::optional<std::size_t> lead_time;
    std::size_t bins = 20;
    fs::path out;
};

void add_diagram(CLI::App& app, DiagramArgs& a) {
    auto* cmd = app.add_subcommand("diagram", "Export reliability diagram data as CSV");
    cmd->add_option("--data", a.data, "dataset directory")->required();
    cmd->add_option("--probs", a.probs, "probability tensor; defaults to softmax of the logits");
    cmd->add_option("--threshold", a.threshold, "restrict to one rate edge (mm/h)");
    cmd->add_option("--lead-time", a.lead_time, "restrict to one lead time");
    cmd->add_option("--bins", a.bins, "confidence bins B")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--out", a.out, "CSV path")->required();
}

int cmd_diagram(const DiagramArgs& a, RunRecord& record) {
    const Dataset data = load_eval_inputs(a.data, a.probs.empty());
    record.dataset("data", a.data);
    const Tensor probs = load_probabilities(a.probs, data, record);
    const RateBinning rates = checked_binning(probs.dim(1));
    DiagramSelection selection;
    if (a.threshold) selection.threshold_mm_per_h = checked_threshold(rates, *a.threshold);
    selection.lead_time = a.lead_time;
    const ReliabilityTable table = reliability_table(probs, data.labels, data.lead_times, rates, ConfidenceBinning{a.bins});
    const auto rows = diagram_export(table, selection);

    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::ofstream csv(a.out, std::ios::binary | std::ios::trunc);
    write_diagram_csv(csv, rows);
    if (!csv) throw FormatError(FormatError::Kind::io_failure, "cannot write " + a.out.string());
    csv.close();

    record.argument("bins", a.bins);
    record.argument("threshold_mm_h", selection.threshold_mm_per_h ? ordered_json(*selection.threshold_mm_per_h) : nullptr);
    record.argument("lead_time", a.lead_time ? ordered_json(*a.lead_time) : nullptr);
    record.argument("probs", a.probs.string());
    record.argument("out", a.out.string());
    record.output(a.out);
    record.write(file_manifest_path(a.out));
    std::cout << "wrote " << rows.size() << " rows to " << a.out.string() << '\n';
    return ok;
}

}  // namespace

std::string dataset_digest(const fs::path& dir) {
    std::string joined;
    for (const char* name : {"logits.fct1", "labels.fct1", "lead_times.fct1"}) joined += file_sha256(dir / name) + "\n";
    return sha256_hex(joined);
}

std::string bundle_digest(const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file() && name != "run_manifest.json") names.push_back(name);
    }
    std::ranges::sort(names);
    std::string joined;
    for (const auto& name : names) joined += name + ":" + file_sha256(dir / name) + "\n";
    return sha256_hex(joined);
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"Calibration toolkit for gridded probabilistic precipitation nowcasts", "tcal"};
    app.set_version_flag("--version", std::string(toolkit_version));
    app.require_subcommand(1);
    SynthArgs synth_args;
    EvalArgs eval_args;
    FitArgs fit_args;
    ApplyArgs apply_args;
    DiagramArgs diagram_args;
    add_synth(app, synth_args);
    add_eval(app, eval_args);
    add_fit(app, fit_args);
    add_apply(app, apply_args);
    add_diagram(app, diagram_args);

    std::vector<std::string> storage{"tcal"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    RunRecord record(command, args);
    try {
        if (command == "synth") return cmd_synth(synth_args, record);
        if (command == "eval") return cmd_eval(eval_args, record);
        if (command == "fit") return cmd_fit(fit_args, record);
        if (command == "apply") return cmd_apply(apply_args, record);
        return cmd_diagram(diagram_args, record);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return usage;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return numerical;
    } catch (const ValidationError& e) {
        std::cerr << "invalid data";
        if (!e.tensor().empty()) std::cerr << " (" << e.tensor() << ")";
        std::cerr << ": " << e.what() << '\n';
        return invalid_data;
    } catch (const FormatError& e) {
        std::cerr << "invalid data: " << e.what() << '\n';
        return invalid_data;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return invalid_data;
    }
}

}  // namespace tcal::cli
