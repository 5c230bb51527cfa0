// rsc: run experiments, summarize results, dump benchmarks, run self-checks.
//
//   rsc run --config exp.json --set train.rsc.drop_percentage=33.3
//   rsc report runs/table1
//   rsc gen-data --set benchmark=tabular-shift --out data/
//   rsc check gradient masks corollary2

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rsc/checks.hpp"
#include "rsc/experiment.hpp"

namespace {

std::optional<std::string> env_seed() {
    if (const char* v = std::getenv("RSC_SEED")) return std::string(v);
    return std::nullopt;
}

struct ConfigFlags {
    std::string config;
    std::vector<std::string> sets;
    std::vector<std::uint64_t> seeds;
    std::string out;

    void add_to(CLI::App* cmd, const char* out_help) {
        cmd->add_option("-c,--config", config, "JSON experiment config")->check(CLI::ExistingFile);
        cmd->add_option("-s,--set", sets, "override a field: dotted.path=value (repeatable)");
        cmd->add_option("--seed", seeds, "seed (repeatable); default from config, then RSC_SEED, then 0");
        cmd->add_option("-o,--out", out, out_help);
    }

    rsc::ExperimentConfig load() const {
        std::vector<std::string> overrides = sets;
        if (!seeds.empty()) {
            std::string list = "seeds=[";
            for (std::size_t i = 0; i < seeds.size(); ++i) list += (i ? "," : "") + std::to_string(seeds[i]);
            overrides.push_back(list + "]");
        }
        if (!out.empty()) overrides.push_back("output=" + rsc::Json(out).dump());
        return rsc::load_experiment(config.empty() ? std::nullopt : std::optional<std::filesystem::path>(config),
                                    overrides, env_seed());
    }
};

int cmd_run(const ConfigFlags& flags, bool quiet) {
    const rsc::ExperimentConfig cfg = flags.load();
    const rsc::ExperimentResult result = rsc::run_experiment(cfg, quiet ? nullptr : &std::cerr);
    std::cout << "wrote " << (cfg.output / "summary.csv").string() << " (" << result.runs.size() << " runs)\n";
    if (result.any_diverged()) {
        for (const auto& r : result.runs)
            if (r.diverged) std::cerr << "diverged: " << r.cell << " seed " << r.seed << ": " << r.divergence_message << '\n';
        return rsc::kExitDiverged;
    }
    return rsc::kExitOk;
}

int cmd_report(const std::string& dir) {
    const rsc::ReportResult r = rsc::report(dir);
    std::cout << r.text << "wrote " << r.gamma_curve.string() << " and " << r.ablation.string() << '\n';
    return rsc::kExitOk;
}

int cmd_gen_data(const ConfigFlags& flags) {
    ConfigFlags f = flags;
    const std::string out = f.out.empty() ? "data" : f.out;
    f.out.clear();
    const rsc::ExperimentConfig cfg = f.load();
    int status = rsc::kExitOk;
    for (auto seed : cfg.seeds) {
        const std::filesystem::path dir = cfg.seeds.size() > 1 ? std::filesystem::path(out) / ("seed_" + std::to_string(seed))
                                                               : std::filesystem::path(out);
        for (const auto& p : rsc::generate_data(cfg.benchmark, seed, cfg.data, dir)) std::cout << p.string() << '\n';
    }
    return status;
}

int cmd_check(std::vector<std::string> suites, std::uint64_t seed) {
    if (suites.empty()) suites = {"gradient", "masks", "corollary2"};
    bool ok = true;
    for (const auto& s : suites) {
        if (s == "gradient") {
            const auto r = rsc::checks::gradient_check(seed);
            std::printf("gradient: %zu operator instances, max error %.3g (worst: %s); %zu networks, max error %.3g; "
                        "%.1fs: %s\n",
                        r.operator_instances, r.max_operator_error, r.worst_operator.c_str(), r.network_instances,
                        r.max_network_error, r.seconds, r.passed() ? "PASS" : "FAIL");
            ok = ok && r.passed();
        } else if (s == "masks") {
            const auto r = rsc::checks::mask_properties(seed);
            std::printf("masks: %zu pairs, failures: cardinality %zu, containment %zu, ties %zu, broadcast %zu; "
                        "%.2fs: %s\n",
                        r.pairs, r.cardinality_failures, r.containment_failures, r.tie_failures, r.broadcast_failures,
                        r.seconds, r.passed() ? "PASS" : "FAIL");
            ok = ok && r.passed();
        } else if (s == "corollary2") {
            const auto r = rsc::checks::corollary2(seed);
            std::printf("corollary2: %zu instances at eta %.0e, max residual/Gamma %.3g, residual(2eta)/residual(eta) in "
                        "[%.3f, %.3f]; first-order expansion ratio in [%.3f, %.3f]; %.2fs: %s\n",
                        r.instances, r.eta, r.max_relative_residual, r.min_ratio, r.max_ratio,
                        r.min_first_order_ratio, r.max_first_order_ratio, r.seconds, r.passed() ? "PASS" : "FAIL");
            ok = ok && r.passed();
        } else {
            std::fprintf(stderr, "rsc check: unknown suite '%s' (gradient, masks, corollary2)\n", s.c_str());
            return rsc::kExitParse;
        }
    }
    return ok ? rsc::kExitOk : rsc::kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Representation self-challenging workbench"};
    app.require_subcommand(1);

    ConfigFlags run_flags, data_flags;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "train every sweep cell for every seed");
    run_flags.add_to(run, "output directory (overrides the config's output)");
    run->add_flag("-q,--quiet", quiet, "no per-epoch progress on stderr");

    std::string report_dir;
    auto* rep = app.add_subcommand("report", "gamma curves and ablation summary from a results directory");
    rep->add_option("dir", report_dir, "results directory")->required();

    auto* gen = app.add_subcommand("gen-data", "dump a benchmark's domains to files");
    data_flags.add_to(gen, "output directory (default: data)");

    std::vector<std::string> suites;
    std::uint64_t check_seed = 0;
    auto* chk = app.add_subcommand("check", "gradient check, mask properties, loss-difference recurrence");
    chk->add_option("suites", suites, "gradient, masks, corollary2 (default: all)");
    chk->add_option("--seed", check_seed, "seed for the random instances");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return rsc::kExitParse;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (*run) return cmd_run(run_flags, quiet);
        if (*rep) return cmd_report(report_dir);
        if (*gen) return cmd_gen_data(data_flags);
        if (*chk) return cmd_check(suites, check_seed);
    } catch (const rsc::ConfigError& e) {
        std::cerr << "rsc " << name << ": " << e.what() << '\n';
        return rsc::kExitParse;
    } catch (const rsc::IoError& e) {
        std::cerr << "rsc " << name << ": " << e.what() << '\n';
        return rsc::kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "rsc " << name << ": " << e.what() << '\n';
        return rsc::kExitFailure;
    }
    return rsc::kExitFailure;
}
