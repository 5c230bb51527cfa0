#include "rsc/rsc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rsc {

std::string_view to_string(MaskMode m) {
    switch (m) {
        case MaskMode::Spatial: return "spatial";
        case MaskMode::Channel: return "channel";
        case MaskMode::SpatialChannel: return "spatial+channel";
        case MaskMode::Elementwise: return "elementwise";
    }
    return "?";
}

std::string_view to_string(DropStrategy s) {
    switch (s) {
        case DropStrategy::TopGradient: return "top-gradient";
        case DropStrategy::TopActivation: return "top-activation";
        case DropStrategy::Random: return "random";
    }
    return "?";
}

std::string_view to_string(BatchSelection s) { return s == BatchSelection::Random ? "random" : "top-loss"; }

MaskMode parse_mask_mode(std::string_view s) {
    for (auto m : {MaskMode::Spatial, MaskMode::Channel, MaskMode::SpatialChannel, MaskMode::Elementwise})
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown mask mode '" + std::string(s) +
                                "' (expected spatial, channel, spatial+channel or elementwise)");
}

DropStrategy parse_drop_strategy(std::string_view s) {
    for (auto d : {DropStrategy::TopGradient, DropStrategy::TopActivation, DropStrategy::Random})
        if (to_string(d) == s) return d;
    throw std::invalid_argument("unknown drop strategy '" + std::string(s) +
                                "' (expected top-gradient, top-activation or random)");
}

BatchSelection parse_batch_selection(std::string_view s) {
    if (s == "random") return BatchSelection::Random;
    if (s == "top-loss") return BatchSelection::TopLoss;
    throw std::invalid_argument("unknown batch selection '" + std::string(s) + "' (expected random or top-loss)");
}

void RscConfig::validate() const {
    if (!(drop_percentage >= 0.0 && drop_percentage <= 100.0)) {
        throw std::invalid_argument("rsc: drop_percentage must lie in [0, 100], got " + std::to_string(drop_percentage));
    }
    if (!(batch_percentage > 0.0 && batch_percentage <= 100.0)) {
        throw std::invalid_argument("rsc: batch_percentage must lie in (0, 100], got " +
                                    std::to_string(batch_percentage));
    }
}

std::size_t muted_cell_count(double drop_percentage, std::size_t cells) {
    const auto k = static_cast<std::size_t>(std::llround(drop_percentage / 100.0 * static_cast<double>(cells)));
    return std::min(k, cells);
}

std::vector<std::size_t> top_k_indices(std::span<const double> weights, std::size_t k) {
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    k = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return weights[a] > weights[b] || (weights[a] == weights[b] && a < b); });
    order.resize(k);
    return order;
}

Tensor representation_gradient(const BoundNetwork& net, ad::Var z, const Tensor& labels) {
    ad::Tape& tape = z.tape();
    ad::Var logits = forward_logits(net, z);
    if (labels.shape() != logits.shape()) {
        throw ShapeError("representation_gradient: labels " + to_string(labels.shape()) + " do not match logits " +
                         to_string(logits.shape()));
    }
    ad::Var score = ad::sum(ad::mul(logits, tape.leaf(labels)));
    const ad::Var wrt[] = {z};
    return tape.grad(score, wrt).front();
}

namespace {

std::size_t cell_count(const Shape& z_shape, MaskMode mode) {
    switch (mode) {
        case MaskMode::Spatial: return z_shape[0] * z_shape[1];
        case MaskMode::Channel: return z_shape[2];
        case MaskMode::Elementwise: return element_count(z_shape);
        case MaskMode::SpatialChannel: break;
    }
    throw std::invalid_argument("mode spatial+channel must be resolved to spatial or channel per sample");
}

}  // namespace

Tensor pooled_weights(const Tensor& g, MaskMode mode) {
    if (g.rank() != 3) throw ShapeError("pooled_weights: expected [H', W', C], got " + to_string(g.shape()));
    const std::size_t h = g.dim(0), w = g.dim(1), c = g.dim(2);
    switch (mode) {
        case MaskMode::Elementwise: return g;
        case MaskMode::Spatial: {
            Tensor out({h, w}, 0.0);
            for (std::size_t cell = 0; cell < h * w; ++cell) {
                double s = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) s += g[cell * c + ch];
                out[cell] = s / static_cast<double>(c);
            }
            return out;
        }
        case MaskMode::Channel: {
            Tensor out({c}, 0.0);
            for (std::size_t cell = 0; cell < h * w; ++cell)
                for (std::size_t ch = 0; ch < c; ++ch) out[ch] += g[cell * c + ch];
            for (auto& v : out.data()) v /= static_cast<double>(h * w);
            return out;
        }
        case MaskMode::SpatialChannel: break;
    }
    throw std::invalid_argument("pooled_weights: mode spatial+channel must be resolved to spatial or channel first");
}

Mask build_mask(const Tensor& weights, double drop_percentage, const Shape& z_shape, MaskMode mode,
                DropStrategy strategy, Rng& rng) {
    if (z_shape.size() != 3) throw ShapeError("build_mask: z shape must be [H', W', C], got " + to_string(z_shape));
    if (!(drop_percentage >= 0.0 && drop_percentage <= 100.0)) {
        throw std::invalid_argument("build_mask: drop percentage outside [0, 100]");
    }
    const std::size_t cells = cell_count(z_shape, mode);
    const std::size_t k = muted_cell_count(drop_percentage, cells);
    if (strategy != DropStrategy::Random && weights.size() != cells) {
        throw ShapeError("build_mask: " + std::to_string(weights.size()) + " weights for " + std::to_string(cells) +
                         " " + std::string(to_string(mode)) + " cells of " + to_string(z_shape));
    }

    std::vector<std::size_t> muted;
    if (strategy == DropStrategy::Random) {
        std::vector<std::size_t> pool(cells);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, cells - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        muted.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
        muted = top_k_indices(weights.data(), k);
    }

    Mask mask{Tensor(z_shape, 1.0), k};
    const std::size_t h = z_shape[0], w = z_shape[1], c = z_shape[2];
    auto m = mask.values.data();
    for (auto cell : muted) {
        switch (mode) {
            case MaskMode::Elementwise: m[cell] = 0.0; break;
            case MaskMode::Spatial:
                for (std::size_t ch = 0; ch < c; ++ch) m[cell * c + ch] = 0.0;
                break;
            case MaskMode::Channel:
                for (std::size_t pos = 0; pos < h * w; ++pos) m[pos * c + cell] = 0.0;
                break;
            case MaskMode::SpatialChannel: break;
        }
    }
    return mask;
}

Tensor apply_mask(const Tensor& z, const Mask& mask) {
    const Shape& ms = mask.values.shape();
    const bool single = z.shape() == ms;
    const bool batched = z.rank() == ms.size() + 1 && Shape(z.shape().begin() + 1, z.shape().end()) == ms;
    if (!single && !batched) {
        throw ShapeError("apply_mask: representation " + to_string(z.shape()) + " does not align with mask " +
                         to_string(ms));
    }
    Tensor out = z;
    auto o = out.data();
    auto m = mask.values.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= m[i % m.size()];
    return out;
}

std::vector<std::size_t> select_batch_subset(std::span<const double> per_sample_losses, double batch_percentage,
                                             BatchSelection selection, Rng& rng) {
    const std::size_t batch = per_sample_losses.size();
    if (batch == 0) return {};
    if (!(batch_percentage > 0.0 && batch_percentage <= 100.0)) {
        throw std::invalid_argument("select_batch_subset: batch percentage outside (0, 100]");
    }
    const auto want = static_cast<std::size_t>(std::ceil(batch_percentage / 100.0 * static_cast<double>(batch)));
    const std::size_t count = std::clamp<std::size_t>(want, 1, batch);

    std::vector<std::size_t> chosen;
    if (selection == BatchSelection::TopLoss) {
        chosen = top_k_indices(per_sample_losses, count);
    } else {
        std::vector<std::size_t> pool(batch);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        for (std::size_t i = 0; i < count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, batch - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

namespace {

double squared_norm(std::span<const Tensor> tensors) {
    double s = 0.0;
    for (const auto& t : tensors)
        for (double v : t.data()) s += v * v;
    return s;
}

std::size_t count_correct(const Tensor& logits, const Tensor& labels) {
    const auto pred = argmax_rows(logits);
    const auto truth = argmax_rows(labels);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) n += pred[i] == truth[i];
    return n;
}

Tensor sample_slice(const Tensor& batched, std::size_t i, const Shape& sample_shape) {
    return batched.slice_rows(i, i + 1).reshaped(sample_shape);
}

Tensor absolute(Tensor t) {
    for (auto& v : t.data()) v = std::fabs(v);
    return t;
}

}  // namespace

StepResult rsc_step(const NetworkParams& params, const Tensor& batch, const Tensor& labels,
                    const RscConfig& config, Rng& rng) {
    config.validate();
    if (batch.rank() == 0 || batch.dim(0) == 0) throw std::invalid_argument("rsc_step: empty batch");

    ad::Tape tape;
    const BoundNetwork net = bind(tape, params);
    const ad::Var x = tape.leaf(batch);
    const ad::Var y = tape.leaf(labels);
    const ad::Var z = forward_features(net, x);
    const ad::Var logits = forward_logits(net, z);
    const ad::Var clean = loss(logits, y);

    const std::size_t n = batch.dim(0);
    const Shape sample_shape = params.architecture().representation_shape();
    const std::size_t sample_size = element_count(sample_shape);

    const auto losses = per_sample_cross_entropy(logits.value(), labels);
    const auto subset = select_batch_subset(losses, config.batch_percentage, config.batch_selection, rng);

    Tensor mask_values(z.shape(), 1.0);
    if (config.drop_percentage > 0.0 && !subset.empty()) {
        Tensor gradient;
        if (config.strategy == DropStrategy::TopGradient) gradient = representation_gradient(net, z, labels);
        std::bernoulli_distribution coin(0.5);

        for (auto i : subset) {
            std::vector<MaskMode> modes{config.mode};
            if (config.mode == MaskMode::SpatialChannel) {
                if (config.combine_spatial_and_channel) modes = {MaskMode::Spatial, MaskMode::Channel};
                else modes = {coin(rng) ? MaskMode::Spatial : MaskMode::Channel};
            }
            double* m = &mask_values.data()[i * sample_size];
            for (auto mode : modes) {
                Tensor weights;
                if (config.strategy == DropStrategy::TopGradient) {
                    weights = pooled_weights(sample_slice(gradient, i, sample_shape), mode);
                } else if (config.strategy == DropStrategy::TopActivation) {
                    weights = pooled_weights(absolute(sample_slice(z.value(), i, sample_shape)), mode);
                }
                const Mask mask = build_mask(weights, config.drop_percentage, sample_shape, mode, config.strategy, rng);
                for (std::size_t j = 0; j < sample_size; ++j) m[j] *= mask.values[j];
            }
        }
    }

    const ad::Var z_muted = ad::mul(z, tape.leaf(std::move(mask_values)));
    const ad::Var muted_loss = loss(forward_logits(net, z_muted), y);

    StepResult result;
    result.gradients = tape.grad(muted_loss, net.params);
    auto& d = result.diagnostics;
    d.loss_clean = clean.value().item();
    d.loss_muted = muted_loss.value().item();
    if (d.loss_clean > 0.0) d.gamma_ratio = d.loss_muted / d.loss_clean;
    d.loss_difference = std::fabs(d.loss_clean - d.loss_muted);
    d.grad_sq_norm = squared_norm(result.gradients);
    d.correct = count_correct(logits.value(), labels);
    d.batch = n;
    d.muted_samples = config.drop_percentage > 0.0 ? subset.size() : 0;
    return result;
}

StepResult plain_step(const NetworkParams& params, const Tensor& batch, const Tensor& labels) {
    if (batch.rank() == 0 || batch.dim(0) == 0) throw std::invalid_argument("plain_step: empty batch");
    ad::Tape tape;
    const BoundNetwork net = bind(tape, params);
    const ad::Var logits = forward_logits(net, forward_features(net, tape.leaf(batch)));
    const ad::Var l = loss(logits, tape.leaf(labels));

    StepResult result;
    result.gradients = tape.grad(l, net.params);
    auto& d = result.diagnostics;
    d.loss_clean = d.loss_muted = l.value().item();
    if (d.loss_clean > 0.0) d.gamma_ratio = d.loss_muted / d.loss_clean;
    d.grad_sq_norm = squared_norm(result.gradients);
    d.correct = count_correct(logits.value(), labels);
    d.batch = batch.dim(0);
    return result;
}

}  // namespace rsc
