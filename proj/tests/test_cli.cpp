#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "tcal/cli.hpp"
#include "tcal/metrics.hpp"
#include "tcal/tensor_io.hpp"

using namespace tcal;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Workspace {
    fs::path root;
    explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("tcal_cli_" + name)) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }
    std::string operator/(const std::string& leaf) const { return (root / leaf).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int synth(const std::string& out, const std::string& distortion, const std::string& seed = "7",
          const std::string& samples = "24") {
    return cli::run({"synth", "--samples", samples, "--distortion", distortion, "--seed", seed, "--out", out});
}

std::size_t line_count(const std::string& text) {
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_CASE("cli usage errors") {
    CHECK(cli::run({}) == cli::usage);
    CHECK(cli::run({"frobnicate"}) == cli::usage);
    CHECK(cli::run({"synth"}) == cli::usage);
    CHECK(cli::run({"--help"}) == cli::ok);
    Workspace ws("usage");
    CHECK(synth(ws / "d", "warp:3") == cli::usage);
    CHECK(cli::run({"eval", "--data", ws / "missing"}) == cli::invalid_data);
}

TEST_CASE("cli synth writes a deterministic dataset") {
    Workspace ws("synth");
    REQUIRE(synth(ws / "a", "none") == cli::ok);
    REQUIRE(synth(ws / "b", "none") == cli::ok);
    for (const char* name : {"logits.fct1", "labels.fct1", "lead_times.fct1", "scenario.json"}) {
        CHECK(fs::exists(ws.root / "a" / name));
        CHECK(slurp(ws.root / "a" / name) == slurp(ws.root / "b" / name));
    }
    CHECK(read_tensor(ws.root / "a" / "logits.fct1").shape() == Shape{24, 12, 16, 16});

    const json run = json::parse(slurp(ws.root / "a" / "run_manifest.json"));
    CHECK(run["format"] == "tcal.run");
    CHECK(run["command"] == "synth");
    CHECK(run["seed"] == 7);
    CHECK(run["version"] == cli::toolkit_version);
    CHECK(run["outputs"].size() == 4);
    CHECK(run["outputs"][0]["digest"].get<std::string>().size() == 64);

    REQUIRE(synth(ws / "cold", "temp:0.5") == cli::ok);
    CHECK(slurp(ws.root / "cold" / "labels.fct1") == slurp(ws.root / "a" / "labels.fct1"));
    CHECK(slurp(ws.root / "cold" / "logits.fct1") != slurp(ws.root / "a" / "logits.fct1"));
    CHECK(cli::dataset_digest(ws.root / "a") == cli::dataset_digest(ws.root / "b"));
    CHECK(cli::dataset_digest(ws.root / "a") != cli::dataset_digest(ws.root / "cold"));
}

TEST_CASE("cli eval writes the report schema") {
    Workspace ws("eval");
    REQUIRE(synth(ws / "d", "temp:0.5") == cli::ok);
    REQUIRE(cli::run({"eval", "--data", ws / "d", "--out", ws / "report.json", "--diagram", ws / "diagram.csv"}) ==
            cli::ok);
    const json report = json::parse(slurp(ws / "report.json"));
    CHECK(report["schema"] == "tcal.calibration_report");
    for (const char* metric : {"ece", "sce", "etce", "f1"}) {
        CHECK(report[metric]["per_lead_time"].size() == 6);
        CHECK(report[metric]["average"].is_number());
    }
    CHECK(report["metadata"]["bins"] == 20);
    CHECK(report["metadata"]["thresholds_mm_h"].size() == 11);
    CHECK(report["bin_counts"].size() == 11);
    CHECK(line_count(slurp(ws / "diagram.csv")) == 1 + 11 * 6 * 20);
    CHECK(fs::exists(ws / "report.json.run_manifest.json"));

    CHECK(cli::run({"eval", "--data", ws / "d", "--f1-threshold", "1.7"}) == cli::usage);
    CHECK(cli::run({"eval", "--data", ws / "d", "--probs", ws / "d/labels.fct1"}) == cli::invalid_data);
}

TEST_CASE("cli fit ts and apply") {
    Workspace ws("fit_ts");
    REQUIRE(synth(ws / "fit", "temp:0.5", "1", "48") == cli::ok);
    REQUIRE(synth(ws / "eval", "temp:0.5", "2") == cli::ok);
    REQUIRE(cli::run({"fit", "--data", ws / "fit", "--method", "ts", "--out", ws / "ts"}) == cli::ok);

    const json manifest = json::parse(slurp(ws.root / "ts" / "manifest.json"));
    CHECK(manifest["method"] == "ts");
    const double t = std::stod(manifest["temperature"].get<std::string>());
    CHECK(t > 1.7);
    CHECK(t < 2.3);
    CHECK(manifest["fit"]["dataset_digest"] == cli::dataset_digest(ws.root / "fit"));
    const json run = json::parse(slurp(ws.root / "ts" / "run_manifest.json"));
    CHECK(run["command"] == "fit");
    CHECK(run["inputs"][0]["digest"] == cli::dataset_digest(ws.root / "fit"));

    REQUIRE(cli::run({"apply", "--bundle", ws / "ts", "--data", ws / "eval", "--out", ws / "p.fct1"}) == cli::ok);
    const Tensor probs = read_tensor(ws / "p.fct1");
    CHECK(probs.shape() == Shape{24, 12, 16, 16});
    const json applied = json::parse(slurp(ws / "p.fct1.run_manifest.json"));
    CHECK(applied["inputs"][0]["digest"] == cli::bundle_digest(ws.root / "ts"));

    // Calibrated probabilities feed back into eval.
    REQUIRE(cli::run({"eval", "--data", ws / "eval", "--probs", ws / "p.fct1", "--out", ws / "after.json"}) == cli::ok);
    REQUIRE(cli::run({"eval", "--data", ws / "eval", "--out", ws / "before.json"}) == cli::ok);
    const double before = json::parse(slurp(ws / "before.json"))["etce"]["average"];
    const double after = json::parse(slurp(ws / "after.json"))["etce"]["average"];
    CHECK(after < before);
}

TEST_CASE("cli apply with unit temperature matches softmax") {
    Workspace ws("apply_t1");
    REQUIRE(synth(ws / "d", "none") == cli::ok);
    REQUIRE(cli::run({"fit", "--data", ws / "d", "--method", "ts", "--out", ws / "ts"}) == cli::ok);
    auto manifest = json::parse(slurp(ws.root / "ts" / "manifest.json"));
    manifest["temperature"] = "1";
    std::ofstream(ws.root / "ts" / "manifest.json", std::ios::trunc) << manifest.dump(2);
    REQUIRE(cli::run({"apply", "--bundle", ws / "ts", "--data", ws / "d", "--out", ws / "p.fct1"}) == cli::ok);
    CHECK(read_tensor(ws / "p.fct1") == class_probabilities(read_tensor(ws.root / "d" / "logits.fct1")));
}

TEST_CASE("cli apply rejects a class-count mismatch") {
    Workspace ws("mismatch");
    REQUIRE(synth(ws / "k12", "none") == cli::ok);
    REQUIRE(cli::run({"synth", "--samples", "6", "--classes", "5", "--out", ws / "k5"}) == cli::ok);
    REQUIRE(cli::run({"fit", "--data", ws / "k12", "--method", "ts", "--out", ws / "ts"}) == cli::ok);
    CHECK(cli::run({"apply", "--bundle", ws / "ts", "--data", ws / "k5", "--out", ws / "p.fct1"}) ==
          cli::invalid_data);
    CHECK_FALSE(fs::exists(ws / "p.fct1"));
}

TEST_CASE("cli lts conditioning switch") {
    Workspace ws("lts");
    REQUIRE(synth(ws / "d", "schedule") == cli::ok);
    REQUIRE(cli::run({"fit", "--data", ws / "d", "--method", "lts", "--epochs", "1", "--out", ws / "film"}) ==
            cli::ok);
    REQUIRE(cli::run({"fit", "--data", ws / "d", "--method", "lts", "--epochs", "1", "--conditioned", "false",
                      "--out", ws / "plain"}) == cli::ok);
    const json film = json::parse(slurp(ws.root / "film" / "manifest.json"));
    const json plain = json::parse(slurp(ws.root / "plain" / "manifest.json"));
    CHECK(film["conditioned"] == true);
    CHECK(plain["conditioned"] == false);
    CHECK(film["parameter_count"].get<std::size_t>() > plain["parameter_count"].get<std::size_t>());
    CHECK(cli::bundle_digest(ws.root / "film") != cli::bundle_digest(ws.root / "plain"));
    REQUIRE(cli::run({"apply", "--bundle", ws / "film", "--data", ws / "d", "--out", ws / "p.fct1"}) == cli::ok);
}

TEST_CASE("cli ss fit, apply, and failure without mispredictions") {
    Workspace ws("ss");
    REQUIRE(synth(ws / "d", "planted") == cli::ok);
    REQUIRE(cli::run({"fit", "--data", ws / "d", "--method", "ss", "--epochs", "1", "--out", ws / "ss"}) == cli::ok);
    const json manifest = json::parse(slurp(ws.root / "ss" / "manifest.json"));
    CHECK(manifest["method"] == "ss");
    CHECK(std::stod(manifest["temperature"].get<std::string>()) > 1.0);
    REQUIRE(cli::run({"apply", "--bundle", ws / "ss", "--data", ws / "d", "--out", ws / "p.fct1"}) == cli::ok);
    CHECK(cli::run({"fit", "--data", ws / "d", "--method", "ss", "--conditioned", "false", "--out", ws / "x"}) ==
          cli::usage);

    // Replace the labels with the argmax class: nothing is mispredicted.
    const Tensor logits = read_tensor(ws.root / "d" / "logits.fct1");
    const std::size_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    std::vector<std::int64_t> y(n * hw);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t px = 0; px < hw; ++px) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c) {
                if (logits.f32()[(s * k + c) * hw + px] > logits.f32()[(s * k + best) * hw + px]) best = c;
            }
            y[s * hw + px] = static_cast<std::int64_t>(best);
        }
    }
    write_tensor(Tensor::from_i64({n, logits.dim(2), logits.dim(3)}, y), ws.root / "d" / "labels.fct1");
    const int code = cli::run({"fit", "--data", ws / "d", "--method", "ss", "--epochs", "1", "--out", ws / "none"});
    CHECK(code != cli::ok);
    CHECK(code == cli::invalid_data);
}

TEST_CASE("cli diagram filters") {
    Workspace ws("diagram");
    REQUIRE(synth(ws / "d", "none") == cli::ok);
    REQUIRE(cli::run({"diagram", "--data", ws / "d", "--out", ws / "all.csv"}) == cli::ok);
    CHECK(line_count(slurp(ws / "all.csv")) == 1 + 11 * 6 * 20);
    REQUIRE(cli::run({"diagram", "--data", ws / "d", "--threshold", "1.5", "--out", ws / "t.csv"}) == cli::ok);
    const std::string t = slurp(ws / "t.csv");
    CHECK(line_count(t) == 1 + 6 * 20);
    std::istringstream rows(t);
    std::string header, row;
    std::getline(rows, header);
    while (std::getline(rows, row)) CHECK(row.rfind("1.5,", 0) == 0);

    REQUIRE(cli::run({"diagram", "--data", ws / "d", "--threshold", "1.5", "--lead-time", "2", "--out", ws / "tl.csv"}) ==
            cli::ok);
    CHECK(line_count(slurp(ws / "tl.csv")) == 1 + 20);
    REQUIRE(cli::run({"diagram", "--data", ws / "d", "--lead-time", "9", "--out", ws / "empty.csv"}) == cli::ok);
    CHECK(slurp(ws / "empty.csv") == header + "\n");
    CHECK(cli::run({"diagram", "--data", ws / "d", "--threshold", "1.7", "--out", ws / "bad.csv"}) == cli::usage);
}
