#include "rsc/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace rsc {
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t at = s.find(sep, start);
        out.emplace_back(s.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start));
        if (at == std::string_view::npos) return out;
        start = at + 1;
    }
}

// Typed reads that name the offending field.
template <class T>
T field(const Json& doc, const std::string& path) {
    const Json* node = &doc;
    for (const auto& key : split(path, '.')) node = &node->at(key);
    try {
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
            if (!node->is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer, got " + node->dump());
        } else if constexpr (std::is_same_v<T, double>) {
            if (!node->is_number()) throw ConfigError(path + ": expected a number, got " + node->dump());
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!node->is_boolean()) throw ConfigError(path + ": expected true or false, got " + node->dump());
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!node->is_string()) throw ConfigError(path + ": expected a string, got " + node->dump());
        }
        return node->get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

template <class Parse>
auto enum_field(const Json& doc, const std::string& path, Parse parse) {
    const auto text = field<std::string>(doc, path);
    try {
        return parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::vector<double> number_list(const Json& doc, const std::string& path) {
    const Json* node = &doc;
    for (const auto& key : split(path, '.')) node = &node->at(key);
    if (!node->is_array()) throw ConfigError(path + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& v : *node) {
        if (!v.is_number()) throw ConfigError(path + ": expected numbers, got " + v.dump());
        out.push_back(v.get<double>());
    }
    return out;
}

const Json* find_path(const Json& doc, const std::string& path) {
    const Json* node = &doc;
    for (const auto& key : split(path, '.')) {
        if (!node->is_object() || !node->contains(key)) return nullptr;
        node = &(*node)[key];
    }
    return node;
}

std::string value_label(const Json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
}

std::string sanitize(std::string s) {
    for (auto& c : s) {
        const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+' || c == '=' || c == '_';
        if (!ok) c = '_';
    }
    return s;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::pair<std::size_t, std::size_t> line_and_column(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void ensure_directory(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

template <class F>
void guarded_write(const fs::path& path, F&& write) {
    try {
        write();
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    os.flush();
    if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
    const auto& d = c.data;
    const auto& t = c.train;
    Json j;
    j["benchmark"] = c.benchmark;
    j["output"] = c.output.string();
    j["seeds"] = c.seeds;
    j["checkpoints"] = c.checkpoints;
    j["data"] = {
        {"source_correlations", d.source_correlations},
        {"target_correlation", d.target_correlation},
        {"source_samples", d.source_samples},
        {"target_samples", d.target_samples},
        {"tabular_noise", d.tabular_noise},
        {"image_noise", d.image_noise},
        {"tabular",
         {{"core_dims", d.tabular.core_dims},
          {"spurious_dims", d.tabular.spurious_dims},
          {"core_mean", d.tabular.core_mean},
          {"spurious_mean", d.tabular.spurious_mean},
          {"core_std", d.tabular.core_std}}},
        {"shape_color",
         {{"jitter", d.shape_color.jitter},
          {"patch", d.shape_color.patch},
          {"shape_intensity", d.shape_color.shape_intensity},
          {"patch_intensity", d.shape_color.patch_intensity}}},
    };
    j["train"] = {
        {"epochs", t.epochs},
        {"learning_rate", t.learning_rate},
        {"lr_decay", t.lr_decay},
        {"lr_decay_epoch", t.lr_decay_epoch ? Json(*t.lr_decay_epoch) : Json(nullptr)},
        {"batch_size", t.batch_size},
        {"baseline", std::string(to_string(t.baseline))},
        {"warmup_epochs", t.warmup_epochs},
        {"rsc",
         {{"drop_percentage", t.rsc.drop_percentage},
          {"batch_percentage", t.rsc.batch_percentage},
          {"mode", std::string(to_string(t.rsc.mode))},
          {"strategy", std::string(to_string(t.rsc.strategy))},
          {"batch_selection", std::string(to_string(t.rsc.batch_selection))},
          {"seed", t.rsc.seed},
          {"combine_spatial_and_channel", t.rsc.combine_spatial_and_channel}}},
    };
    Json axes = Json::array();
    for (const auto& a : c.sweep) axes.push_back({{"field", a.field}, {"values", a.values}});
    j["sweep"] = axes;
    return j;
}

void merge_layer(Json& doc, const Json& layer, const std::string& where) {
    if (!layer.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = layer.begin(); it != layer.end(); ++it) {
        const std::string path = where.empty() ? it.key() : where + "." + it.key();
        if (!doc.contains(it.key())) throw ConfigError(path + ": unknown field");
        Json& target = doc[it.key()];
        if (target.is_object()) merge_layer(target, it.value(), path);
        else target = it.value();
    }
}

ExperimentConfig experiment_from_json(const Json& raw) {
    Json doc = to_json(ExperimentConfig{});
    merge_layer(doc, raw, "");

    ExperimentConfig c;
    c.benchmark = field<std::string>(doc, "benchmark");
    try {
        (void)parse_benchmark(c.benchmark);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("benchmark: ") + e.what());
    }
    c.output = field<std::string>(doc, "output");
    c.checkpoints = field<bool>(doc, "checkpoints");
    if (!doc["seeds"].is_array() || doc["seeds"].empty()) throw ConfigError("seeds: expected a non-empty array");
    c.seeds.clear();
    for (const auto& s : doc["seeds"]) {
        if (!s.is_number_unsigned()) throw ConfigError("seeds: expected non-negative integers, got " + s.dump());
        c.seeds.push_back(s.get<std::uint64_t>());
    }

    auto& d = c.data;
    d.source_correlations = number_list(doc, "data.source_correlations");
    if (d.source_correlations.empty()) throw ConfigError("data.source_correlations: at least one source domain is needed");
    d.target_correlation = field<double>(doc, "data.target_correlation");
    for (double rho : d.source_correlations) {
        if (!(rho >= -1.0 && rho <= 1.0)) throw ConfigError("data.source_correlations: values must lie in [-1, 1]");
    }
    if (!(d.target_correlation >= -1.0 && d.target_correlation <= 1.0)) {
        throw ConfigError("data.target_correlation: must lie in [-1, 1]");
    }
    d.source_samples = field<std::size_t>(doc, "data.source_samples");
    d.target_samples = field<std::size_t>(doc, "data.target_samples");
    if (d.source_samples == 0 || d.target_samples == 0) throw ConfigError("data: sample counts must be positive");
    d.tabular_noise = field<double>(doc, "data.tabular_noise");
    d.image_noise = field<double>(doc, "data.image_noise");
    if (!(d.tabular_noise >= 0.0) || !(d.image_noise >= 0.0)) throw ConfigError("data: noise must be non-negative");
    d.tabular.core_dims = field<std::size_t>(doc, "data.tabular.core_dims");
    d.tabular.spurious_dims = field<std::size_t>(doc, "data.tabular.spurious_dims");
    if (d.tabular.core_dims == 0 || d.tabular.spurious_dims == 0) throw ConfigError("data.tabular: dims must be at least 1");
    d.tabular.core_mean = field<double>(doc, "data.tabular.core_mean");
    d.tabular.spurious_mean = field<double>(doc, "data.tabular.spurious_mean");
    d.tabular.core_std = field<double>(doc, "data.tabular.core_std");
    d.shape_color.jitter = field<std::size_t>(doc, "data.shape_color.jitter");
    d.shape_color.patch = field<std::size_t>(doc, "data.shape_color.patch");
    d.shape_color.shape_intensity = field<double>(doc, "data.shape_color.shape_intensity");
    d.shape_color.patch_intensity = field<double>(doc, "data.shape_color.patch_intensity");

    auto& t = c.train;
    t.epochs = field<std::size_t>(doc, "train.epochs");
    t.learning_rate = field<double>(doc, "train.learning_rate");
    t.lr_decay = field<double>(doc, "train.lr_decay");
    if (doc["train"]["lr_decay_epoch"].is_null()) t.lr_decay_epoch.reset();
    else t.lr_decay_epoch = field<std::size_t>(doc, "train.lr_decay_epoch");
    t.batch_size = field<std::size_t>(doc, "train.batch_size");
    t.baseline = enum_field(doc, "train.baseline", parse_baseline);
    t.warmup_epochs = field<std::size_t>(doc, "train.warmup_epochs");
    t.rsc.drop_percentage = field<double>(doc, "train.rsc.drop_percentage");
    t.rsc.batch_percentage = field<double>(doc, "train.rsc.batch_percentage");
    t.rsc.mode = enum_field(doc, "train.rsc.mode", parse_mask_mode);
    t.rsc.strategy = enum_field(doc, "train.rsc.strategy", parse_drop_strategy);
    t.rsc.batch_selection = enum_field(doc, "train.rsc.batch_selection", parse_batch_selection);
    t.rsc.seed = field<std::uint64_t>(doc, "train.rsc.seed");
    t.rsc.combine_spatial_and_channel = field<bool>(doc, "train.rsc.combine_spatial_and_channel");
    try {
        t.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    const Json& axes = doc["sweep"];
    if (!axes.is_array()) throw ConfigError("sweep: expected an array of {field, values}");
    const Json defaults = to_json(ExperimentConfig{});
    for (std::size_t i = 0; i < axes.size(); ++i) {
        const std::string where = "sweep[" + std::to_string(i) + "]";
        const Json& a = axes[i];
        if (!a.is_object() || !a.contains("field") || !a.contains("values") || !a["field"].is_string() ||
            !a["values"].is_array() || a.size() != 2) {
            throw ConfigError(where + ": expected {\"field\": string, \"values\": array}");
        }
        SweepAxis axis{a["field"].get<std::string>(), {}};
        const std::string root = split(axis.field, '.').front();
        if (root != "data" && root != "train" && root != "benchmark") {
            throw ConfigError(where + ": field " + axis.field + " cannot be swept");
        }
        const Json* leaf = find_path(defaults, axis.field);
        if (!leaf || leaf->is_object()) throw ConfigError(where + ": unknown field " + axis.field);
        if (a["values"].empty()) throw ConfigError(where + ": no values");
        for (const auto& v : a["values"]) axis.values.push_back(v);
        c.sweep.push_back(std::move(axis));
    }
    return c;
}

void apply_override(Json& doc, std::string_view assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "': expected path=value");
    }
    const std::string path(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    Json* node = &doc;
    for (const auto& key : split(path, '.')) {
        if (!node->is_object() || !node->contains(key)) {
            throw ConfigError("override '" + std::string(assignment) + "': unknown field " + path);
        }
        node = &(*node)[key];
    }
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = std::move(value);
}

ExperimentConfig load_experiment(const std::optional<fs::path>& config_file, std::span<const std::string> overrides,
                                 const std::optional<std::string>& env_seed) {
    Json doc = to_json(ExperimentConfig{});
    if (env_seed && !env_seed->empty()) {
        std::uint64_t seed = 0;
        const char* end = env_seed->data() + env_seed->size();
        const auto [ptr, ec] = std::from_chars(env_seed->data(), end, seed);
        if (ec != std::errc() || ptr != end) throw ConfigError("RSC_SEED: '" + *env_seed + "' is not an unsigned integer");
        doc["seeds"] = Json::array({seed});
    }
    if (config_file) {
        const std::string text = read_file(*config_file);
        Json layer;
        try {
            layer = Json::parse(text);
        } catch (const Json::parse_error& e) {
            const auto [line, col] = line_and_column(text, e.byte == 0 ? 0 : e.byte - 1);
            throw ConfigError(config_file->string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                              ": invalid JSON");
        }
        try {
            merge_layer(doc, layer, "");
        } catch (const ConfigError& e) {
            throw ConfigError(config_file->string() + ": " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return experiment_from_json(doc);
}

RscConfig adapt_to_benchmark(RscConfig rsc, BenchmarkKind kind) {
    if (kind == BenchmarkKind::TabularShift && rsc.mode == MaskMode::SpatialChannel) rsc.mode = MaskMode::Elementwise;
    return rsc;
}

std::vector<SweepCell> expand_sweep(const ExperimentConfig& config) {
    std::vector<SweepCell> cells{SweepCell{}};
    for (const auto& axis : config.sweep) {
        std::vector<SweepCell> next;
        for (const auto& cell : cells) {
            for (const auto& v : axis.values) {
                SweepCell c = cell;
                c.assignments.emplace_back(axis.field, v);
                next.push_back(std::move(c));
            }
        }
        cells = std::move(next);
    }
    for (auto& cell : cells) {
        if (cell.assignments.empty()) {
            cell.name = "default";
            continue;
        }
        for (const auto& [path, value] : cell.assignments) {
            if (!cell.name.empty()) cell.name += "__";
            cell.name += split(path, '.').back() + "=" + value_label(value);
        }
        cell.name = sanitize(cell.name);
    }
    return cells;
}

RunOutcome run_single(const ExperimentConfig& config, std::uint64_t seed, const std::string& cell,
                      const std::optional<fs::path>& run_dir, std::ostream* log) {
    const BenchmarkKind kind = parse_benchmark(config.benchmark);
    const Benchmark bench = make_benchmark(kind, seed, config.data);
    TrainConfig tc = config.train;
    tc.seed = seed;
    tc.rsc = adapt_to_benchmark(tc.rsc, kind);

    const auto on_epoch = [&](const EpochMetrics& m) {
        if (!log) return;
        *log << cell << " seed " << seed << " epoch " << m.epoch << ": train loss " << format_double(m.train_loss)
             << " acc " << format_double(m.train_accuracy) << ", target acc "
             << format_double(m.targets.empty() ? 0.0 : m.targets.front().accuracy) << ", gamma "
             << format_double(m.gamma_mean) << '\n';
    };
    const TrainResult result = train(NetworkParams::initialize(bench.architecture, derive_seed(seed, 2)), bench, tc, on_epoch);

    RunOutcome out;
    out.cell = cell;
    out.seed = seed;
    out.epochs_completed = result.epochs.size();
    out.diverged = result.diverged;
    out.divergence_message = result.divergence_message;
    if (!result.epochs.empty()) {
        const auto& last = result.epochs.back();
        for (const auto& t : last.targets) {
            out.target_accuracy += t.accuracy / static_cast<double>(last.targets.size());
            out.target_loss += t.loss / static_cast<double>(last.targets.size());
        }
        out.final_gamma = last.gamma_mean;
        out.a4_rate = post_warmup_rates(result.epochs, tc.warmup_epochs).a4_rate;
    }
    const ProbeResult probe = probe_feature_reliance(result.params, bench);
    out.core_probe = probe.core_accuracy;
    out.spurious_probe = probe.spurious_accuracy;

    if (run_dir) {
        ensure_directory(*run_dir);
        const fs::path metrics = *run_dir / "metrics.csv";
        guarded_write(metrics, [&] { write_metrics_csv(result.epochs, metrics); });
        if (config.checkpoints) {
            const fs::path ckpt = *run_dir / "checkpoint.bin";
            guarded_write(ckpt, [&] { save_checkpoint(result.params, ckpt); });
        }
    }
    return out;
}

bool ExperimentResult::any_diverged() const {
    return std::any_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.diverged; });
}

MeanStd mean_std(std::span<const double> values) {
    MeanStd r;
    if (values.empty()) return r;
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return r;
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::ostream* log) {
    ensure_directory(config.output);
    const Json doc = to_json(config);
    write_text(config.output / "config.json", doc.dump(2) + "\n");

    const auto cells = expand_sweep(config);
    ExperimentResult result;
    std::ostringstream summary;
    summary << "cell";
    for (const auto& axis : config.sweep) summary << ',' << csv_field(axis.field);
    summary << ",seeds,target_acc_mean,target_acc_std,target_loss_mean,target_loss_std,final_gamma_mean,"
               "final_gamma_std,a4_rate_mean,a4_rate_std,core_probe_mean,core_probe_std,spurious_probe_mean,"
               "spurious_probe_std,diverged_runs\n";

    for (const auto& cell : cells) {
        Json cell_doc = doc;
        cell_doc["sweep"] = Json::array();
        for (const auto& [path, value] : cell.assignments) {
            Json* node = &cell_doc;
            for (const auto& key : split(path, '.')) node = &(*node)[key];
            *node = value;
        }
        ExperimentConfig cell_config;
        try {
            cell_config = experiment_from_json(cell_doc);
        } catch (const ConfigError& e) {
            throw ConfigError("sweep cell " + cell.name + ": " + e.what());
        }

        std::vector<RunOutcome> runs;
        for (auto seed : config.seeds) {
            const fs::path dir = config.output / cell.name / ("seed_" + std::to_string(seed));
            runs.push_back(run_single(cell_config, seed, cell.name, dir, log));
        }

        const auto stat = [&](double RunOutcome::*member) {
            std::vector<double> v;
            for (const auto& r : runs) v.push_back(r.*member);
            const MeanStd s = mean_std(v);
            return format_double(s.mean) + ',' + format_double(s.std);
        };
        const auto diverged = std::count_if(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.diverged; });
        summary << csv_field(cell.name);
        for (const auto& [path, value] : cell.assignments) summary << ',' << csv_field(value_label(value));
        summary << ',' << runs.size() << ',' << stat(&RunOutcome::target_accuracy) << ','
                << stat(&RunOutcome::target_loss) << ',' << stat(&RunOutcome::final_gamma) << ','
                << stat(&RunOutcome::a4_rate) << ',' << stat(&RunOutcome::core_probe) << ','
                << stat(&RunOutcome::spurious_probe) << ',' << diverged << '\n';
        result.runs.insert(result.runs.end(), runs.begin(), runs.end());
    }
    write_text(config.output / "summary.csv", summary.str());
    return result;
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    const auto fail = [&](std::size_t line, const std::string& what) {
        throw ConfigError(path.string() + ":" + std::to_string(line) + ": " + what);
    };
    const std::string header = "epoch,split,domain,loss,acc,gamma_mean,gamma_ratio_mean,a4_rate,grad_sq_norm";

    std::vector<MetricsRow> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (n == 1) {
            if (line != header) fail(n, "unexpected header '" + line + "'");
            continue;
        }
        if (line.empty()) continue;
        const auto cols = split(line, ',');
        if (cols.size() != 9) fail(n, "expected 9 fields, found " + std::to_string(cols.size()));

        const auto number = [&](const std::string& s, const char* name) {
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
                fail(n, std::string("field ") + name + ": '" + s + "' is not a finite number");
            }
            return v;
        };
        const auto optional_number = [&](const std::string& s, const char* name) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return number(s, name);
        };

        MetricsRow r;
        std::size_t epoch = 0;
        const auto [ptr, ec] = std::from_chars(cols[0].data(), cols[0].data() + cols[0].size(), epoch);
        if (cols[0].empty() || ec != std::errc() || ptr != cols[0].data() + cols[0].size() || epoch == 0) {
            fail(n, "field epoch: '" + cols[0] + "' is not a positive integer");
        }
        r.epoch = epoch;
        r.split = cols[1];
        if (r.split != "train" && r.split != "target") fail(n, "field split: '" + r.split + "' is not train or target");
        r.domain = cols[2];
        r.loss = number(cols[3], "loss");
        r.accuracy = number(cols[4], "acc");
        r.gamma_mean = optional_number(cols[5], "gamma_mean");
        r.gamma_ratio_mean = optional_number(cols[6], "gamma_ratio_mean");
        r.a4_rate = optional_number(cols[7], "a4_rate");
        r.grad_sq_norm = optional_number(cols[8], "grad_sq_norm");
        if (r.split == "train" && (!r.gamma_mean || !r.a4_rate || !r.grad_sq_norm)) {
            fail(n, "train row is missing diagnostics");
        }
        rows.push_back(std::move(r));
    }
    if (n == 0) fail(1, "empty file");
    return rows;
}

ReportResult report(const fs::path& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());

    std::vector<fs::path> files;
    for (auto it = fs::recursive_directory_iterator(dir, ec); !ec && it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        if (it->is_regular_file() && it->path().filename() == "metrics.csv") files.push_back(it->path());
    }
    if (ec) throw IoError("cannot scan " + dir.string() + ": " + ec.message());
    if (files.empty()) throw ConfigError("no metrics.csv files under " + dir.string());
    std::sort(files.begin(), files.end());

    struct Run {
        std::map<std::size_t, double> gamma;  // epoch -> train gamma_mean
        double target_acc = 0.0;
        double final_gamma = 0.0;
        double a4 = 0.0;
    };
    std::map<std::string, std::vector<Run>> cells;
    for (const auto& f : files) {
        const auto rows = read_metrics_csv(f);
        fs::path rel = fs::relative(f.parent_path(), dir);
        if (rel.filename().string().starts_with("seed_")) rel = rel.parent_path();
        std::string cell = rel.empty() || rel == "." ? "." : rel.generic_string();

        Run run;
        std::size_t last = 0;
        for (const auto& r : rows) last = std::max(last, r.epoch);
        std::vector<double> a4_post, a4_all, target;
        for (const auto& r : rows) {
            if (r.split == "train") {
                run.gamma[r.epoch] = *r.gamma_mean;
                a4_all.push_back(*r.a4_rate);
                if (r.epoch > 1) a4_post.push_back(*r.a4_rate);
                if (r.epoch == last) run.final_gamma = *r.gamma_mean;
            } else if (r.epoch == last) {
                target.push_back(r.accuracy);
            }
        }
        run.target_acc = mean_std(target).mean;
        run.a4 = mean_std(a4_post.empty() ? a4_all : a4_post).mean;
        cells[cell].push_back(std::move(run));
    }

    ReportResult out;
    out.gamma_curve = dir / "gamma_curve.csv";
    out.ablation = dir / "ablation.csv";
    std::ostringstream curve, ablation, text;
    curve << "cell,epoch,runs,gamma_mean,gamma_std\n";
    ablation << "cell,runs,target_acc_mean,target_acc_std,final_gamma_mean,final_gamma_std,a4_rate_mean,a4_rate_std\n";
    text << "cell  runs  target_acc (mean ± std)  final_gamma (mean ± std)  a4_rate\n";

    for (const auto& [cell, runs] : cells) {
        std::map<std::size_t, std::vector<double>> by_epoch;
        for (const auto& r : runs)
            for (const auto& [e, g] : r.gamma) by_epoch[e].push_back(g);
        for (const auto& [e, gs] : by_epoch) {
            const MeanStd s = mean_std(gs);
            curve << csv_field(cell) << ',' << e << ',' << gs.size() << ',' << format_double(s.mean) << ','
                  << format_double(s.std) << '\n';
        }
        std::vector<double> acc, gamma, a4;
        for (const auto& r : runs) {
            acc.push_back(r.target_acc);
            gamma.push_back(r.final_gamma);
            a4.push_back(r.a4);
        }
        const MeanStd sa = mean_std(acc), sg = mean_std(gamma), s4 = mean_std(a4);
        ablation << csv_field(cell) << ',' << runs.size() << ',' << format_double(sa.mean) << ','
                 << format_double(sa.std) << ',' << format_double(sg.mean) << ',' << format_double(sg.std) << ','
                 << format_double(s4.mean) << ',' << format_double(s4.std) << '\n';
        char line[256];
        std::snprintf(line, sizeof line, "%s  %zu  %.4f ± %.4f  %.5f ± %.5f  %.3f\n", cell.c_str(), runs.size(),
                      sa.mean, sa.std, sg.mean, sg.std, s4.mean);
        text << line;
    }
    write_text(out.gamma_curve, curve.str());
    write_text(out.ablation, ablation.str());
    out.text = text.str();
    return out;
}

std::vector<fs::path> generate_data(const std::string& benchmark, std::uint64_t seed, const BenchmarkOptions& options,
                                    const fs::path& dir) {
    BenchmarkKind kind;
    try {
        kind = parse_benchmark(benchmark);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    const Benchmark b = make_benchmark(kind, seed, options);
    ensure_directory(dir);
    std::vector<const DomainDataset*> domains;
    for (const auto& s : b.sources) domains.push_back(&s);
    domains.push_back(&b.target);

    std::vector<fs::path> written;
    for (const auto* d : domains) {
        const fs::path path = dir / (d->id + (kind == BenchmarkKind::TabularShift ? ".csv" : ".rscdata"));
        guarded_write(path, [&] {
            if (kind == BenchmarkKind::TabularShift) write_tabular_csv(*d, path);
            else write_image_tensor(*d, path);
        });
        written.push_back(path);
    }
    return written;
}

}  // namespace rsc
