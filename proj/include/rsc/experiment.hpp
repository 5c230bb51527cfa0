#pragma once

// Experiment orchestration behind the command-line tool: layered JSON
// configuration, sweep expansion, per-run artifacts, summaries and reports.
//
// Configuration layers, lowest to highest precedence: built-in defaults,
// the RSC_SEED environment variable (seed list only), the config file, and
// command-line overrides given as dotted paths (`train.rsc.drop_percentage=5`).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rsc/datagen.hpp"
#include "rsc/trainer.hpp"

namespace rsc {

using Json = nlohmann::ordered_json;

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitParse = 2,
    kExitDiverged = 3,
    kExitIo = 4,
};

/// Malformed configuration, override, or input file. Maps to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unreadable or unwritable path. Maps to exit code 4.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SweepAxis {
    std::string field;  ///< dotted path into the config document
    std::vector<Json> values;
};

struct ExperimentConfig {
    std::string benchmark = "shape-color";
    BenchmarkOptions data{};
    TrainConfig train{};
    std::filesystem::path output = "runs";
    std::vector<SweepAxis> sweep;
    std::vector<std::uint64_t> seeds{0};
    bool checkpoints = true;
};

Json to_json(const ExperimentConfig& config);
/// Strict: every key must be known and correctly typed; errors name the field.
ExperimentConfig experiment_from_json(const Json& doc);

/// Applies `path=value`. The value is read as JSON when it parses and as a
/// bare string otherwise, so `train.baseline=none` works unquoted.
void apply_override(Json& doc, std::string_view assignment);

/// Recursively merges `layer` into `doc`; keys absent from `doc` are errors.
void merge_layer(Json& doc, const Json& layer, const std::string& where);

/// Resolves all layers. `env_seed` is the raw RSC_SEED value, if any.
ExperimentConfig load_experiment(const std::optional<std::filesystem::path>& config_file,
                                 std::span<const std::string> overrides,
                                 const std::optional<std::string>& env_seed);

/// The spatial+channel default has no meaning on a 1x1 tabular
/// representation; it resolves to elementwise there.
RscConfig adapt_to_benchmark(RscConfig rsc, BenchmarkKind kind);

struct SweepCell {
    std::string name;  ///< directory name; "default" without sweep axes
    std::vector<std::pair<std::string, Json>> assignments;
};

/// Cartesian product of the sweep axes in declaration order, last axis fastest.
std::vector<SweepCell> expand_sweep(const ExperimentConfig& config);

struct RunOutcome {
    std::string cell;
    std::uint64_t seed = 0;
    std::size_t epochs_completed = 0;
    double target_accuracy = 0.0;  ///< final epoch, averaged over target domains
    double target_loss = 0.0;
    double final_gamma = 0.0;      ///< final-epoch mean |loss(z) - loss(z̃)|
    double a4_rate = 0.0;          ///< post-warm-up
    double core_probe = 0.0;
    double spurious_probe = 0.0;
    bool diverged = false;
    std::string divergence_message;
};

/// Trains one configuration with one seed: benchmark, initialization and
/// training all derive from `seed`.
RunOutcome run_single(const ExperimentConfig& config, std::uint64_t seed, const std::string& cell,
                      const std::optional<std::filesystem::path>& run_dir, std::ostream* log = nullptr);

struct ExperimentResult {
    std::vector<RunOutcome> runs;
    bool any_diverged() const;
};

/// Runs every sweep cell for every seed. Writes `<output>/config.json`,
/// `<output>/<cell>/seed_<n>/{metrics.csv,checkpoint.bin}` and
/// `<output>/summary.csv`.
ExperimentResult run_experiment(const ExperimentConfig& config, std::ostream* log = nullptr);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation; 0 for a single value
};
MeanStd mean_std(std::span<const double> values);

/// Rows parsed from a metrics CSV.
struct MetricsRow {
    std::size_t epoch = 0;
    std::string split;
    std::string domain;
    double loss = 0.0;
    double accuracy = 0.0;
    std::optional<double> gamma_mean;
    std::optional<double> gamma_ratio_mean;
    std::optional<double> a4_rate;
    std::optional<double> grad_sq_norm;
};

/// Throws ConfigError as "<file>:<line>: <problem>".
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct ReportResult {
    std::filesystem::path gamma_curve;  ///< cell,epoch,runs,gamma_mean,gamma_std
    std::filesystem::path ablation;     ///< one row per cell, mean and std over runs
    std::string text;
};

/// Scans `dir` for metrics.csv files, grouping `<cell>/seed_<n>/metrics.csv`
/// by cell. Throws ConfigError when none are found or one is malformed.
ReportResult report(const std::filesystem::path& dir);

/// Dumps every domain of a benchmark: `<id>.csv` for tabular data,
/// `<id>.rscdata` for images. Returns the files written.
std::vector<std::filesystem::path> generate_data(const std::string& benchmark, std::uint64_t seed,
                                                 const BenchmarkOptions& options, const std::filesystem::path& dir);

}  // namespace rsc
