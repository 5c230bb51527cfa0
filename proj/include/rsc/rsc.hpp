#pragma once

// Representation self-challenging: locate the most predictive cells of the
// representation through the gradient of the true-class score, mute them,
// and compute the update on the muted forward pass.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsc/model.hpp"
#include "rsc/seed.hpp"

namespace rsc {

/// Granularity at which cells are ranked and muted.
enum class MaskMode {
    Spatial,         ///< H'xW' cells, each a [1x1xC] fiber.
    Channel,         ///< C cells, each an [H'xW'] slice.
    SpatialChannel,  ///< per sample, spatial or channel with probability 1/2.
    Elementwise,     ///< every entry of Z is a cell.
};

enum class DropStrategy { TopGradient, TopActivation, Random };
enum class BatchSelection { Random, TopLoss };

std::string_view to_string(MaskMode m);
std::string_view to_string(DropStrategy s);
std::string_view to_string(BatchSelection s);
MaskMode parse_mask_mode(std::string_view s);
DropStrategy parse_drop_strategy(std::string_view s);
BatchSelection parse_batch_selection(std::string_view s);

struct RscConfig {
    double drop_percentage = 33.3;   ///< p, in [0, 100].
    double batch_percentage = 33.3;  ///< in (0, 100].
    MaskMode mode = MaskMode::SpatialChannel;
    DropStrategy strategy = DropStrategy::TopGradient;
    BatchSelection batch_selection = BatchSelection::TopLoss;
    std::uint64_t seed = 0;
    /// For SpatialChannel: apply both masks to every selected sample instead
    /// of flipping a coin between them.
    bool combine_spatial_and_channel = false;

    void validate() const;
};

/// Binary mask shaped like one sample's Z.
struct Mask {
    Tensor values;
    std::size_t muted_count = 0;  ///< muted cells at the pooling granularity
};

/// round(p/100 * cells), the number of cells to mute.
std::size_t muted_cell_count(double drop_percentage, std::size_t cells);

/// Indices of the k largest weights; ties go to the lowest index.
std::vector<std::size_t> top_k_indices(std::span<const double> weights, std::size_t k);

/// Gradient of sum_b <logits_b, y_b> with respect to Z: per sample, the
/// gradient of the true-class logit. `z` must have been produced on `net`'s
/// tape; the result has Z's shape.
Tensor representation_gradient(const BoundNetwork& net, ad::Var z, const Tensor& labels);

/// Pools one sample's [H', W', C] tensor to its cell weights:
/// Spatial -> [H', W'] channel means, Channel -> [C] spatial means,
/// Elementwise -> unchanged.
Tensor pooled_weights(const Tensor& g, MaskMode mode);

/// Mutes round(p/100 * N) cells of a sample's Z. `weights` are the pooled
/// weights (gradient or |activation|, ignored for Random) and N is their count.
Mask build_mask(const Tensor& weights, double drop_percentage, const Shape& z_shape, MaskMode mode,
                DropStrategy strategy, Rng& rng);

/// z ⊙ m, where z is one sample [H', W', C] or a batch [B, H', W', C] with the
/// same mask applied to every sample.
Tensor apply_mask(const Tensor& z, const Mask& mask);

/// ceil(batch_percentage/100 * B) sample indices, sorted ascending.
std::vector<std::size_t> select_batch_subset(std::span<const double> per_sample_losses, double batch_percentage,
                                             BatchSelection selection, Rng& rng);

struct StepDiagnostics {
    double loss_clean = 0.0;               ///< loss(z)
    double loss_muted = 0.0;               ///< loss(z̃)
    std::optional<double> gamma_ratio;     ///< loss(z̃)/loss(z); absent when loss(z) == 0
    double loss_difference = 0.0;          ///< |loss(z) - loss(z̃)|
    double grad_sq_norm = 0.0;             ///< squared norm of all parameter gradients
    std::size_t correct = 0;               ///< clean-forward correct predictions
    std::size_t batch = 0;
    std::size_t muted_samples = 0;

    bool a4_satisfied() const noexcept { return loss_muted >= loss_clean; }
};

struct StepResult {
    std::vector<Tensor> gradients;  ///< one per parameter tensor, in order
    StepDiagnostics diagnostics;
};

/// One RSC update: clean forward, representation gradient, per-sample masks
/// for the selected subset, muted forward, gradients of loss(z̃) with respect
/// to every parameter.
StepResult rsc_step(const NetworkParams& params, const Tensor& batch, const Tensor& labels,
                    const RscConfig& config, Rng& rng);

/// Ordinary step on loss(z); diagnostics report z̃ = z.
StepResult plain_step(const NetworkParams& params, const Tensor& batch, const Tensor& labels);

}  // namespace rsc
