#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "rsc/experiment.hpp"

using namespace rsc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("rsc_test_experiment_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; }

std::string read(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        if (!line.empty() && line.back() == ',') cols.emplace_back();
        rows.push_back(cols);
    }
    return rows;
}

/// A quick tabular experiment writing into `out`.
ExperimentConfig tiny(const fs::path& out) {
    ExperimentConfig c;
    c.benchmark = "tabular-shift";
    c.data.source_samples = 60;
    c.data.target_samples = 80;
    c.train.epochs = 3;
    c.output = out;
    return c;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("defaults round-trip through JSON") {
    const ExperimentConfig c;
    const auto back = experiment_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(back.train.rsc.drop_percentage == 33.3);
    CHECK(back.train.rsc.batch_percentage == 33.3);
    CHECK(back.train.rsc.mode == MaskMode::SpatialChannel);
}

TEST_CASE("a single override changes one field") {
    Json doc = to_json(ExperimentConfig{});
    apply_override(doc, "train.rsc.drop_percentage=5");
    apply_override(doc, "train.baseline=none");
    const auto c = experiment_from_json(doc);
    CHECK(c.train.rsc.drop_percentage == 5.0);
    CHECK(c.train.baseline == Baseline::None);
    CHECK(c.train.epochs == ExperimentConfig{}.train.epochs);

    CHECK_THROWS_AS(apply_override(doc, "train.rsc.dropout=5"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "no-equals-sign"), ConfigError);
}

TEST_CASE("type errors name the field") {
    Json doc = to_json(ExperimentConfig{});
    doc["train"]["epochs"] = "ten";
    try {
        experiment_from_json(doc);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("train.epochs") != std::string::npos);
    }
    doc = to_json(ExperimentConfig{});
    doc["train"]["rsc"]["mode"] = "diagonal";
    CHECK_THROWS_AS(experiment_from_json(doc), ConfigError);
}

TEST_CASE("precedence: command line over file over RSC_SEED over defaults") {
    const auto dir = scratch("layers");
    write(dir / "exp.json", R"({"train": {"epochs": 4, "learning_rate": 0.2}, "seeds": [7]})");
    const std::vector<std::string> overrides{"train.epochs=6"};

    const auto all = load_experiment(dir / "exp.json", overrides, std::string("3"));
    CHECK(all.train.epochs == 6);             // command line
    CHECK(all.train.learning_rate == 0.2);    // file
    CHECK(all.seeds == std::vector<std::uint64_t>{7});
    CHECK(all.train.batch_size == 32);        // default

    const auto env_only = load_experiment(std::nullopt, {}, std::string("3"));
    CHECK(env_only.seeds == std::vector<std::uint64_t>{3});
    CHECK(load_experiment(std::nullopt, {}, std::nullopt).seeds == std::vector<std::uint64_t>{0});
    const std::vector<std::string> seed_override{"seeds=[1,2]"};
    CHECK(load_experiment(std::nullopt, seed_override, std::string("3")).seeds == std::vector<std::uint64_t>{1, 2});

    CHECK_THROWS_AS(load_experiment(std::nullopt, {}, std::string("x1")), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("config file errors carry a location") {
    const auto dir = scratch("errors");
    write(dir / "bad.json", "{\n  \"train\": {\n    \"epochs\": 4,\n  }\n}\n");
    try {
        load_experiment(dir / "bad.json", {}, std::nullopt);
        FAIL("expected a parse error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        INFO(msg);
        CHECK(msg.find("bad.json:4:") != std::string::npos);
    }
    write(dir / "unknown.json", R"({"train": {"epoch": 4}})");
    try {
        load_experiment(dir / "unknown.json", {}, std::nullopt);
        FAIL("expected an unknown-field error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("train.epoch") != std::string::npos);
    }
    CHECK_THROWS_AS(load_experiment(dir / "missing.json", {}, std::nullopt), IoError);
    fs::remove_all(dir);
}

TEST_CASE("spatial+channel resolves to elementwise on tabular data") {
    RscConfig r;
    CHECK(adapt_to_benchmark(r, BenchmarkKind::TabularShift).mode == MaskMode::Elementwise);
    CHECK(adapt_to_benchmark(r, BenchmarkKind::ShapeColor).mode == MaskMode::SpatialChannel);
    r.mode = MaskMode::Channel;
    CHECK(adapt_to_benchmark(r, BenchmarkKind::TabularShift).mode == MaskMode::Channel);
}

TEST_CASE("sweep expansion is a cartesian product, last axis fastest") {
    ExperimentConfig c;
    c.sweep = {{"train.baseline", {"none", "rsc"}}, {"train.rsc.drop_percentage", {5, 33.3}}};
    const auto cells = expand_sweep(c);
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].name == "baseline=none__drop_percentage=5");
    CHECK(cells[1].name == "baseline=none__drop_percentage=33.3");
    CHECK(cells[3].name == "baseline=rsc__drop_percentage=33.3");
    CHECK(expand_sweep(ExperimentConfig{}).front().name == "default");

    Json doc = to_json(ExperimentConfig{});
    doc["sweep"] = Json::parse(R"([{"field": "train.nothing", "values": [1]}])");
    CHECK_THROWS_AS(experiment_from_json(doc), ConfigError);
}

TEST_CASE("a strategy sweep writes a four-row summary and reruns bitwise") {
    const auto dir = scratch("sweep");
    auto c = tiny(dir / "a");
    c.seeds = {0, 1};
    c.sweep = {{"train.baseline", {"none", "random", "top-activation", "rsc"}}};
    const auto result = run_experiment(c);
    CHECK(result.runs.size() == 8);
    CHECK_FALSE(result.any_diverged());

    const auto rows = csv_rows(dir / "a" / "summary.csv");
    REQUIRE(rows.size() == 5);
    CHECK(rows[0][0] == "cell");
    CHECK(rows[0][1] == "train.baseline");
    CHECK(rows[1][1] == "none");
    CHECK(rows[4][1] == "rsc");
    CHECK(rows[1][2] == "2");
    CHECK(fs::exists(dir / "a" / "baseline=top-activation" / "seed_1" / "metrics.csv"));
    CHECK(fs::exists(dir / "a" / "baseline=rsc" / "seed_0" / "checkpoint.bin"));
    CHECK(fs::exists(dir / "a" / "config.json"));

    c.output = dir / "b";
    run_experiment(c);
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
        if (e.path().extension() != ".csv") continue;
        const auto twin = dir / "b" / fs::relative(e.path(), dir / "a");
        CHECK(read(e.path()) == read(twin));
        ++compared;
    }
    CHECK(compared == 9);
    fs::remove_all(dir);
}

TEST_CASE("report: a single run gives one curve row per epoch") {
    const auto dir = scratch("single");
    run_experiment(tiny(dir));
    const auto r = report(dir);
    const auto curve = csv_rows(r.gamma_curve);
    CHECK(curve.size() == 1 + 3);
    CHECK(curve[0] == std::vector<std::string>{"cell", "epoch", "runs", "gamma_mean", "gamma_std"});
    CHECK(curve[3][1] == "3");
    CHECK(r.text.find("default") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("report: seed means equal averages recomputed from the metrics files") {
    const auto dir = scratch("seeds");
    auto c = tiny(dir);
    c.seeds = {0, 1, 2, 3, 4};
    run_experiment(c);
    const auto r = report(dir);

    std::map<std::size_t, double> gamma_sum;
    double acc_sum = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        for (const auto& row : csv_rows(dir / "default" / ("seed_" + std::to_string(s)) / "metrics.csv")) {
            if (row[0] == "epoch") continue;
            const std::size_t epoch = std::stoul(row[0]);
            if (row[1] == "train") gamma_sum[epoch] += std::stod(row[5]);
            if (row[1] == "target" && epoch == 3) acc_sum += std::stod(row[4]);
        }
    }
    const auto curve = csv_rows(r.gamma_curve);
    REQUIRE(curve.size() == 4);
    for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i][2] == "5");
        CHECK(std::stod(curve[i][3]) == doctest::Approx(gamma_sum[std::stoul(curve[i][1])] / 5.0).epsilon(1e-8));
    }
    const auto ablation = csv_rows(r.ablation);
    REQUIRE(ablation.size() == 2);
    CHECK(ablation[1][0] == "default");
    CHECK(std::stod(ablation[1][2]) == doctest::Approx(acc_sum / 5.0).epsilon(1e-8));
    fs::remove_all(dir);
}

TEST_CASE("report: a malformed row names the file and line") {
    const auto dir = scratch("malformed");
    fs::create_directories(dir / "cell" / "seed_0");
    write(dir / "cell" / "seed_0" / "metrics.csv",
          "epoch,split,domain,loss,acc,gamma_mean,gamma_ratio_mean,a4_rate,grad_sq_norm\n"
          "1,train,sources,0.5,0.8,0.1,1.2,1,0.3\n"
          "2,train,sources,zero,0.8,0.1,1.2,1,0.3\n");
    try {
        report(dir);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("metrics.csv:3:") != std::string::npos);
        CHECK(msg.find("loss") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("report: an empty or missing directory is an error") {
    const auto dir = scratch("empty");
    CHECK_THROWS_AS(report(dir), ConfigError);
    CHECK_THROWS_AS(report(dir / "absent"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("mean and sample standard deviation") {
    const std::vector<double> v{1, 2, 3, 4};
    const auto s = mean_std(v);
    CHECK(s.mean == 2.5);
    CHECK(s.std == doctest::Approx(1.2909944487));
    CHECK(mean_std(std::vector<double>{5}).std == 0.0);
}

TEST_CASE("gen-data writes one file per domain") {
    const auto dir = scratch("gendata");
    BenchmarkOptions o;
    o.source_samples = 10;
    o.target_samples = 10;
    const auto tab = generate_data("tabular-shift", 0, o, dir / "tab");
    CHECK(tab.size() == 4);
    CHECK(fs::exists(dir / "tab" / "target.csv"));
    const auto img = generate_data("shape-color", 0, o, dir / "img");
    CHECK(read_image_tensor(dir / "img" / "source1.rscdata").size() == 10);
    CHECK(img.size() == 4);
    CHECK_THROWS_AS(generate_data("mnist", 0, o, dir), ConfigError);
    fs::remove_all(dir);
}

}
