#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rsc/datagen.hpp"
#include "rsc/model.hpp"
#include "rsc/rsc.hpp"

namespace rsc {

/// Which update rule the trainer runs. Random and TopActivation are RSC with
/// the drop strategy overridden; None is plain SGD on the clean loss.
enum class Baseline { None, Rsc, Random, TopActivation };

std::string_view to_string(Baseline b);
Baseline parse_baseline(std::string_view s);

struct TrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 0.1;
    double lr_decay = 0.1;
    /// Epochs after this one use learning_rate * lr_decay; unset means
    /// round(0.8 * epochs).
    std::optional<std::size_t> lr_decay_epoch;
    std::size_t batch_size = 32;
    RscConfig rsc{};
    Baseline baseline = Baseline::Rsc;
    std::uint64_t seed = 0;
    /// Leading epochs excluded from the aggregated A4 and gamma rates.
    std::size_t warmup_epochs = 1;

    void validate() const;
    /// Learning rate used during 1-based `epoch`.
    double learning_rate_at(std::size_t epoch) const;
    /// RSC settings after applying the baseline's strategy override.
    RscConfig effective_rsc() const;
};

struct DomainMetrics {
    std::string domain;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct EpochMetrics {
    std::size_t epoch = 0;  ///< 1-based
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    std::vector<DomainMetrics> targets;
    double gamma_mean = 0.0;                    ///< mean |loss(z) - loss(z̃)| over steps
    std::optional<double> gamma_ratio_mean;     ///< mean loss(z̃)/loss(z) where defined
    double a4_rate = 0.0;                       ///< fraction of steps with loss(z̃) >= loss(z)
    double grad_sq_norm = 0.0;                  ///< mean squared gradient norm over steps
    std::size_t steps = 0;
    std::size_t a4_steps = 0;
    std::size_t gamma_ratio_steps = 0;          ///< steps with a defined ratio
    std::size_t gamma_ratio_above_one = 0;      ///< steps with ratio > 1
};

struct TrainResult {
    NetworkParams params;
    std::vector<EpochMetrics> epochs;
    bool diverged = false;
    std::string divergence_message;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs config.epochs epochs of SGD over benchmark.training, evaluating the
/// target domain after each epoch. On a non-finite loss or gradient the run
/// stops and returns the parameters and metrics of the last complete epoch.
TrainResult train(NetworkParams initial, const Benchmark& benchmark, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
};

/// Clean forward pass over the whole dataset; RSC is never applied here.
Evaluation evaluate(const NetworkParams& params, const DomainDataset& data);

/// Rates pooled over the epochs after the warm-up.
struct RateSummary {
    std::size_t steps = 0;
    double a4_rate = 0.0;
    double gamma_ratio_above_one_rate = 0.0;
};
RateSummary post_warmup_rates(const std::vector<EpochMetrics>& epochs, std::size_t warmup_epochs);

/// One RSC step on a linear top layer over fixed features.
struct Corollary2Check {
    double gamma_before = 0.0;      ///< Γ(t) = |h(θ, z) - h(θ, z̃)|
    double gamma_after = 0.0;       ///< Γ(t+1) after θ -= η g̃
    double gamma_ratio = 0.0;       ///< γ̂ = h(θ, z̃) / h(θ, z)
    double grad_sq_norm = 0.0;      ///< ||g̃||²
    double predicted_after = 0.0;   ///< Γ(t) - (1 - 1/γ̂) ||g̃||² η
    double residual = 0.0;          ///< |Γ(t+1) - predicted_after|
    /// |Γ(t+1) - (Γ(t) - s (||g̃||² - <∇h(θ, z), g̃>) η)| with s the sign of
    /// h(θ, z̃) - h(θ, z): the exact first-order expansion, O(η²).
    double first_order_residual = 0.0;
};

/// `weight` [F, K], `bias` [K], `z` [B, H', W', C] with F = H'W'C, one-hot
/// `labels` [B, K]. Masks follow `rsc` (all samples selected when
/// batch_percentage is 100). Throws when h(θ, z) is zero.
Corollary2Check corollary2_check(const Tensor& weight, const Tensor& bias, const Tensor& z, const Tensor& labels,
                                 const RscConfig& rsc, double eta);

/// Elementwise masks on every sample; requires eta <= 1e-4.
double corollary2_residual(const Tensor& weight, const Tensor& bias, const Tensor& z, const Tensor& labels,
                           double drop_percentage, double eta);

struct ProbeResult {
    double core_accuracy = 0.0;      ///< target with the spurious region zeroed
    double spurious_accuracy = 0.0;  ///< target with the core region zeroed
};

ProbeResult probe_feature_reliance(const NetworkParams& params, const Benchmark& benchmark);

/// `epoch,split,domain,loss,acc,gamma_mean,gamma_ratio_mean,a4_rate,grad_sq_norm`;
/// one train row and one row per target domain each epoch. Diagnostic
/// columns are blank on evaluation rows.
void write_metrics_csv(const std::vector<EpochMetrics>& epochs, const std::filesystem::path& path);

/// printf("%.9g")
std::string format_double(double v);

}  // namespace rsc
