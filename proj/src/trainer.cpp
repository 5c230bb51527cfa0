#include "rsc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace rsc {

std::string_view to_string(Baseline b) {
    switch (b) {
        case Baseline::None: return "none";
        case Baseline::Rsc: return "rsc";
        case Baseline::Random: return "random";
        case Baseline::TopActivation: return "top-activation";
    }
    return "?";
}

Baseline parse_baseline(std::string_view s) {
    for (auto b : {Baseline::None, Baseline::Rsc, Baseline::Random, Baseline::TopActivation})
        if (to_string(b) == s) return b;
    // The top-gradient strategy is what "rsc" runs by default.
    if (s == "top-gradient") return Baseline::Rsc;
    throw std::invalid_argument("unknown baseline '" + std::string(s) +
                                "' (expected none, rsc, top-gradient, random or top-activation)");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
    // Zero is accepted: a zero-step run is the parameter-invariance check.
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("train: learning rate must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be at least 1");
    if (!(lr_decay > 0.0)) throw std::invalid_argument("train: lr decay factor must be positive");
    rsc.validate();
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
    const std::size_t decay_after =
        lr_decay_epoch.value_or(static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(epochs))));
    return epoch > decay_after ? learning_rate * lr_decay : learning_rate;
}

RscConfig TrainConfig::effective_rsc() const {
    RscConfig r = rsc;
    if (baseline == Baseline::Random) r.strategy = DropStrategy::Random;
    if (baseline == Baseline::TopActivation) r.strategy = DropStrategy::TopActivation;
    return r;
}

namespace {

bool gradients_finite(const std::vector<Tensor>& grads) {
    return std::all_of(grads.begin(), grads.end(), [](const Tensor& t) { return t.all_finite(); });
}

}  // namespace

TrainResult train(NetworkParams initial, const Benchmark& benchmark, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    config.validate();
    const DomainDataset& data = benchmark.training;
    if (data.size() == 0) throw std::invalid_argument("train: empty training set");
    if (initial.architecture().input_shape(data.size()) != data.inputs.shape()) {
        throw ShapeError("train: training inputs " + to_string(data.inputs.shape()) +
                         " do not match the architecture input " +
                         to_string(initial.architecture().input_shape(data.size())));
    }

    const RscConfig rsc_config = config.effective_rsc();
    Rng order_rng(derive_seed(config.seed, 10));
    Rng rsc_rng(derive_seed(config.seed, 1000 + rsc_config.seed));

    TrainResult result;
    result.params = std::move(initial);
    const std::size_t n = data.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        NetworkParams params = result.params;
        std::shuffle(order.begin(), order.end(), order_rng);
        const double lr = config.learning_rate_at(epoch);

        EpochMetrics m;
        m.epoch = epoch;
        double loss_sum = 0.0, gamma_sum = 0.0, ratio_sum = 0.0, grad_sum = 0.0;
        std::size_t correct = 0;
        bool diverged = false;

        for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
            const std::size_t end = std::min(n, begin + config.batch_size);
            const std::span<const std::size_t> rows(order.data() + begin, end - begin);
            const Tensor x = data.inputs.gather_rows(rows);
            const Tensor y = data.labels.gather_rows(rows);
            StepResult step = config.baseline == Baseline::None ? plain_step(params, x, y)
                                                                : rsc_step(params, x, y, rsc_config, rsc_rng);
            const auto& d = step.diagnostics;
            if (!std::isfinite(d.loss_clean) || !std::isfinite(d.loss_muted) || !gradients_finite(step.gradients)) {
                result.diverged = true;
                result.divergence_message = "non-finite loss or gradient in epoch " + std::to_string(epoch) +
                                            " at sample offset " + std::to_string(begin);
                diverged = true;
                break;
            }
            params.apply_sgd(step.gradients, lr);

            ++m.steps;
            const double rows_in_batch = static_cast<double>(d.batch);
            loss_sum += d.loss_clean * rows_in_batch;
            correct += d.correct;
            gamma_sum += d.loss_difference;
            grad_sum += d.grad_sq_norm;
            if (d.a4_satisfied()) ++m.a4_steps;
            if (d.gamma_ratio) {
                ++m.gamma_ratio_steps;
                ratio_sum += *d.gamma_ratio;
                if (*d.gamma_ratio > 1.0) ++m.gamma_ratio_above_one;
            }
        }
        if (diverged || !params.all_finite()) {
            if (!result.diverged) {
                result.diverged = true;
                result.divergence_message = "non-finite parameters after epoch " + std::to_string(epoch);
            }
            break;
        }

        const double steps = static_cast<double>(m.steps);
        m.train_loss = loss_sum / static_cast<double>(n);
        m.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        m.gamma_mean = gamma_sum / steps;
        if (m.gamma_ratio_steps) m.gamma_ratio_mean = ratio_sum / static_cast<double>(m.gamma_ratio_steps);
        m.a4_rate = static_cast<double>(m.a4_steps) / steps;
        m.grad_sq_norm = grad_sum / steps;
        const Evaluation target = evaluate(params, benchmark.target);
        m.targets.push_back({benchmark.target.id, target.loss, target.accuracy});

        result.params = std::move(params);
        result.epochs.push_back(m);
        if (on_epoch) on_epoch(result.epochs.back());
    }
    return result;
}

Evaluation evaluate(const NetworkParams& params, const DomainDataset& data) {
    const std::size_t n = data.size();
    if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
    const std::size_t classes = data.labels.dim(1);
    constexpr std::size_t kChunk = 250;

    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> class_total(classes, 0), class_correct(classes, 0);
    for (std::size_t begin = 0; begin < n; begin += kChunk) {
        const std::size_t end = std::min(n, begin + kChunk);
        const Tensor x = data.inputs.slice_rows(begin, end);
        const Tensor y = data.labels.slice_rows(begin, end);
        ad::Tape tape;
        const BoundNetwork net = bind(tape, params);
        const Tensor logits = forward_logits(net, forward_features(net, tape.leaf(x))).value();
        for (double l : per_sample_cross_entropy(logits, y)) loss_sum += l;
        const auto pred = argmax_rows(logits);
        const auto truth = argmax_rows(y);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            ++class_total[truth[i]];
            if (pred[i] == truth[i]) {
                ++correct;
                ++class_correct[truth[i]];
            }
        }
    }
    Evaluation e;
    e.loss = loss_sum / static_cast<double>(n);
    e.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    for (std::size_t c = 0; c < classes; ++c) {
        e.per_class_accuracy.push_back(class_total[c] ? static_cast<double>(class_correct[c]) /
                                                            static_cast<double>(class_total[c])
                                                      : 0.0);
    }
    return e;
}

RateSummary post_warmup_rates(const std::vector<EpochMetrics>& epochs, std::size_t warmup_epochs) {
    RateSummary s;
    std::size_t a4 = 0, above = 0;
    for (const auto& e : epochs) {
        if (e.epoch <= warmup_epochs) continue;
        s.steps += e.steps;
        a4 += e.a4_steps;
        above += e.gamma_ratio_above_one;
    }
    if (s.steps) {
        s.a4_rate = static_cast<double>(a4) / static_cast<double>(s.steps);
        s.gamma_ratio_above_one_rate = static_cast<double>(above) / static_cast<double>(s.steps);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Fixed-feature top layer: the regime of the loss-difference recurrence.
// ---------------------------------------------------------------------------

namespace {

struct TopLayerEval {
    double loss;
    Tensor grad_weight;
    Tensor grad_bias;
};

TopLayerEval top_layer_loss(const Tensor& weight, const Tensor& bias, const Tensor& features, const Tensor& labels) {
    ad::Tape tape;
    const ad::Var w = tape.leaf(weight);
    const ad::Var b = tape.leaf(bias);
    const ad::Var logits = ad::add_bias(ad::matmul(ad::flatten(tape.leaf(features)), w), b);
    const ad::Var l = ad::softmax_cross_entropy(logits, tape.leaf(labels));
    const ad::Var wrt[] = {w, b};
    auto g = tape.grad(l, wrt);
    return {l.value().item(), std::move(g[0]), std::move(g[1])};
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

Corollary2Check corollary2_check(const Tensor& weight, const Tensor& bias, const Tensor& z, const Tensor& labels,
                                 const RscConfig& rsc, double eta) {
    rsc.validate();
    if (z.rank() != 4) throw ShapeError("corollary2_check: features must be [B, H', W', C], got " + to_string(z.shape()));
    if (!(eta >= 0.0)) throw std::invalid_argument("corollary2_check: learning rate must be non-negative");

    // A top-layer-only network over the fixed features.
    Architecture arch;
    arch.height = z.dim(1);
    arch.width = z.dim(2);
    arch.in_channels = z.dim(3);
    arch.conv_channels = {z.dim(3)};
    arch.kernel = 1;
    arch.pool = 1;
    arch.classes = weight.rank() == 2 ? weight.dim(1) : 0;
    if (weight.shape() != Shape{arch.representation_size(), arch.classes} || bias.shape() != Shape{arch.classes}) {
        throw ShapeError("corollary2_check: top layer " + to_string(weight.shape()) + " / " + to_string(bias.shape()) +
                         " does not fit features " + to_string(z.shape()));
    }

    ad::Tape tape;
    BoundNetwork net;
    net.arch = &arch;
    net.params = {tape.leaf(weight), tape.leaf(bias)};
    const ad::Var zv = tape.leaf(z);
    const Tensor g = representation_gradient(net, zv, labels);
    const Shape sample(z.shape().begin() + 1, z.shape().end());
    const std::size_t per = element_count(sample);

    Rng rng(derive_seed(rsc.seed, 7));
    const auto losses = per_sample_cross_entropy(forward_logits(net, zv).value(), labels);
    const auto subset = select_batch_subset(losses, rsc.batch_percentage, rsc.batch_selection, rng);
    Tensor muted = z;
    for (auto i : subset) {
        MaskMode mode = rsc.mode;
        if (mode == MaskMode::SpatialChannel) mode = std::bernoulli_distribution(0.5)(rng) ? MaskMode::Spatial : MaskMode::Channel;
        Tensor weights;
        const Tensor zi = z.slice_rows(i, i + 1).reshaped(sample);
        if (rsc.strategy == DropStrategy::TopGradient) weights = pooled_weights(g.slice_rows(i, i + 1).reshaped(sample), mode);
        else if (rsc.strategy == DropStrategy::TopActivation) {
            Tensor a = zi;
            for (auto& v : a.data()) v = std::fabs(v);
            weights = pooled_weights(a, mode);
        }
        const Mask m = build_mask(weights, rsc.drop_percentage, sample, mode, rsc.strategy, rng);
        for (std::size_t j = 0; j < per; ++j) muted[i * per + j] *= m.values[j];
    }

    const TopLayerEval clean = top_layer_loss(weight, bias, z, labels);
    const TopLayerEval masked = top_layer_loss(weight, bias, muted, labels);
    if (!(clean.loss > 0.0)) {
        throw std::domain_error("corollary2_check: loss on the clean features is zero, so the loss ratio is undefined");
    }

    Corollary2Check c;
    c.gamma_before = std::fabs(clean.loss - masked.loss);
    c.gamma_ratio = masked.loss / clean.loss;
    c.grad_sq_norm = dot(masked.grad_weight, masked.grad_weight) + dot(masked.grad_bias, masked.grad_bias);

    Tensor w1 = weight, b1 = bias;
    for (std::size_t i = 0; i < w1.size(); ++i) w1[i] -= eta * masked.grad_weight[i];
    for (std::size_t i = 0; i < b1.size(); ++i) b1[i] -= eta * masked.grad_bias[i];
    const double clean_after = top_layer_loss(w1, b1, z, labels).loss;
    const double masked_after = top_layer_loss(w1, b1, muted, labels).loss;
    c.gamma_after = std::fabs(clean_after - masked_after);
    c.predicted_after = c.gamma_before - (1.0 - 1.0 / c.gamma_ratio) * c.grad_sq_norm * eta;
    c.residual = std::fabs(c.gamma_after - c.predicted_after);

    const double directional = dot(clean.grad_weight, masked.grad_weight) + dot(clean.grad_bias, masked.grad_bias);
    const double sign = masked.loss >= clean.loss ? 1.0 : -1.0;
    c.first_order_residual =
        std::fabs(c.gamma_after - (c.gamma_before - sign * (c.grad_sq_norm - directional) * eta));
    return c;
}

double corollary2_residual(const Tensor& weight, const Tensor& bias, const Tensor& z, const Tensor& labels,
                           double drop_percentage, double eta) {
    if (!(eta <= 1e-4)) throw std::invalid_argument("corollary2_residual: the recurrence needs a small step, eta <= 1e-4");
    RscConfig cfg;
    cfg.drop_percentage = drop_percentage;
    cfg.batch_percentage = 100.0;
    cfg.mode = MaskMode::Elementwise;
    return corollary2_check(weight, bias, z, labels, cfg, eta).residual;
}

ProbeResult probe_feature_reliance(const NetworkParams& params, const Benchmark& benchmark) {
    const auto& ann = benchmark.target.annotation;
    ProbeResult r;
    r.core_accuracy = evaluate(params, zero_region(benchmark.target, ann.spurious)).accuracy;
    r.spurious_accuracy = evaluate(params, zero_region(benchmark.target, ann.core)).accuracy;
    return r;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_metrics_csv(const std::vector<EpochMetrics>& epochs, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "epoch,split,domain,loss,acc,gamma_mean,gamma_ratio_mean,a4_rate,grad_sq_norm\n";
    for (const auto& e : epochs) {
        os << e.epoch << ",train,sources," << format_double(e.train_loss) << ',' << format_double(e.train_accuracy)
           << ',' << format_double(e.gamma_mean) << ','
           << (e.gamma_ratio_mean ? format_double(*e.gamma_ratio_mean) : std::string()) << ','
           << format_double(e.a4_rate) << ',' << format_double(e.grad_sq_norm) << '\n';
        for (const auto& t : e.targets) {
            os << e.epoch << ",target," << t.domain << ',' << format_double(t.loss) << ','
               << format_double(t.accuracy) << ",,,,\n";
        }
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace rsc
