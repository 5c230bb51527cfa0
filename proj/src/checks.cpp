#include "rsc/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "rsc/autodiff.hpp"
#include "rsc/model.hpp"
#include "rsc/rsc.hpp"
#include "rsc/seed.hpp"
#include "rsc/trainer.hpp"

namespace rsc::checks {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point since) {
    return std::chrono::duration<double>(Clock::now() - since).count();
}

constexpr double kStep = 1e-5;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data()) v = u(rng);
    return t;
}

// Values bounded away from zero so ReLU kinks stay outside the difference stencil.
Tensor away_from_zero(Shape shape, Rng& rng) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (auto& v : t.data()) v = v >= 0.0 ? v + 0.05 : v - 0.05;
    return t;
}

Tensor one_hot_rows(std::size_t rows, std::size_t classes, Rng& rng) {
    Tensor t({rows, classes}, 0.0);
    std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
    for (std::size_t r = 0; r < rows; ++r) t[r * classes + pick(rng)] = 1.0;
    return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// One operator instance: inputs, which of them are differentiable, and the
// op applied to their tape handles.
struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    std::vector<bool> differentiable;
    std::function<ad::Var(std::span<const ad::Var>)> apply;
};

OpCase make_case(std::size_t which, Rng& rng) {
    switch (which % 11) {
        case 0: {
            const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
            return {"matmul", {random_tensor({m, k}, rng), random_tensor({k, n}, rng)}, {true, true},
                    [](auto v) { return ad::matmul(v[0], v[1]); }};
        }
        case 1: {
            const std::size_t b = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
            const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = pick(rng, 0, 1) ? 3 : 1;
            return {"conv2d", {random_tensor({b, h, w, ci}, rng), random_tensor({k, k, ci, co}, rng)}, {true, true},
                    [](auto v) { return ad::conv2d(v[0], v[1]); }};
        }
        case 2: {
            const std::size_t b = pick(rng, 1, 3), c = pick(rng, 1, 4);
            return {"add_bias", {random_tensor({b, 2, c}, rng), random_tensor({c}, rng)}, {true, true},
                    [](auto v) { return ad::add_bias(v[0], v[1]); }};
        }
        case 3:
            return {"relu", {away_from_zero({pick(rng, 1, 3), pick(rng, 1, 5)}, rng)}, {true},
                    [](auto v) { return ad::relu(v[0]); }};
        case 4: {
            const std::size_t win = pick(rng, 1, 2);
            const std::size_t b = pick(rng, 1, 2), h = win * pick(rng, 1, 3), w = win * pick(rng, 1, 3);
            return {"avg_pool2d", {random_tensor({b, h, w, pick(rng, 1, 3)}, rng)}, {true},
                    [win](auto v) { return ad::avg_pool2d(v[0], win); }};
        }
        case 5: {
            std::vector<std::size_t> axes;
            for (std::size_t a = 0; a < 3; ++a)
                if (pick(rng, 0, 1)) axes.push_back(a);
            if (axes.empty()) axes.push_back(pick(rng, 0, 2));
            return {"mean", {random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng)}, {true},
                    [axes](auto v) { return ad::mean(v[0], axes); }};
        }
        case 6: {
            const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
            return {"reshape", {random_tensor({a, b, c}, rng)}, {true},
                    [=](auto v) { return ad::reshape(v[0], {c, a * b}); }};
        }
        case 7:
            return {"flatten", {random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng)}, {true},
                    [](auto v) { return ad::flatten(v[0]); }};
        case 8: {
            const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
            return {"mul", {random_tensor(s, rng), random_tensor(s, rng)}, {true, true},
                    [](auto v) { return ad::mul(v[0], v[1]); }};
        }
        case 9:
            return {"sum", {random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}, {true},
                    [](auto v) { return ad::sum(v[0]); }};
        default: {
            const std::size_t b = pick(rng, 1, 4), k = pick(rng, 2, 4);
            return {"softmax_cross_entropy", {random_tensor({b, k}, rng, -3.0, 3.0), one_hot_rows(b, k, rng)},
                    {true, false}, [](auto v) { return ad::softmax_cross_entropy(v[0], v[1]); }};
        }
    }
}

// Scalarizes an operator through a fixed random projection of its output.
double project(const OpCase& c, const std::vector<Tensor>& inputs, const Tensor* weights, Tensor* out_weights,
               Rng* rng, std::vector<Tensor>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    const ad::Var out = c.apply(vars);
    Tensor r = weights ? *weights : random_tensor(out.shape(), *rng);
    if (out_weights) *out_weights = r;
    const ad::Var f = ad::sum(ad::mul(out, tape.leaf(std::move(r))));
    if (grads) *grads = tape.grad(f, vars);
    return f.value().item();
}

double check_operator(const OpCase& c, Rng& rng) {
    Tensor r;
    std::vector<Tensor> grads;
    project(c, c.inputs, nullptr, &r, &rng, &grads);
    double worst = 0.0;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        if (!c.differentiable[i]) continue;
        auto inputs = c.inputs;
        const Tensor numeric = ad::finite_diff_oracle(
            [&](const Tensor& x) {
                inputs[i] = x;
                return project(c, inputs, &r, nullptr, nullptr, nullptr);
            },
            c.inputs[i], kStep);
        worst = std::max(worst, scaled_max_error(grads[i].values(), numeric.values()));
    }
    return worst;
}

// Smallest |pre-activation| over every ReLU on the tape.
double nearest_kink(const ad::Tape& tape) {
    double nearest = INFINITY;
    for (std::size_t id = 0; id < tape.size(); ++id) {
        if (tape.kind(id) != ad::OpKind::Relu) continue;
        for (double v : tape.value(tape.inputs(id).front()).data()) nearest = std::min(nearest, std::fabs(v));
    }
    return nearest;
}

Architecture random_architecture(Rng& rng) {
    Architecture a;
    a.pool = pick(rng, 1, 2);
    a.height = a.pool * pick(rng, 2, 3);
    a.width = a.pool * pick(rng, 2, 3);
    a.in_channels = pick(rng, 1, 3);
    a.conv_channels = {pick(rng, 2, 4), pick(rng, 2, 4)};
    a.kernel = pick(rng, 0, 1) ? 3 : 1;
    a.classes = pick(rng, 2, 3);
    return a;
}

ad::Var network_loss(const NetworkParams& p, const Tensor& x, const Tensor& y, ad::Tape& tape,
                     std::vector<ad::Var>* wrt = nullptr) {
    const BoundNetwork net = bind(tape, p);
    const ad::Var xv = tape.leaf(x);
    const ad::Var l = loss(forward_logits(net, forward_features(net, xv)), tape.leaf(y));
    if (wrt) {
        *wrt = net.params;
        wrt->push_back(xv);
    }
    return l;
}

double check_network(Rng& rng) {
    // Redraw until every ReLU input sits clear of the kink relative to the step.
    for (;;) {
        const Architecture arch = random_architecture(rng);
        NetworkParams params = NetworkParams::initialize(arch, rng());
        for (std::size_t i = 0; i < params.count(); ++i) {
            if (params.name(i).ends_with("bias")) params.tensor(i) = random_tensor(params.tensor(i).shape(), rng, -0.5, 0.5);
        }
        const std::size_t batch = 2;
        const Tensor x = random_tensor(arch.input_shape(batch), rng);
        const Tensor y = one_hot_rows(batch, arch.classes, rng);

        ad::Tape tape;
        std::vector<ad::Var> wrt;
        const ad::Var out = network_loss(params, x, y, tape, &wrt);
        if (nearest_kink(tape) < 1e-3) continue;
        const auto grads = tape.grad(out, wrt);

        double worst = 0.0;
        for (std::size_t i = 0; i <= params.count(); ++i) {
            const bool is_input = i == params.count();
            const Tensor& point = is_input ? x : params.tensor(i);
            const Tensor numeric = ad::finite_diff_oracle(
                [&](const Tensor& v) {
                    NetworkParams p = params;
                    Tensor xi = x;
                    if (is_input) xi = v;
                    else p.tensor(i) = v;
                    ad::Tape t;
                    return network_loss(p, xi, y, t).value().item();
                },
                point, kStep);
            worst = std::max(worst, scaled_max_error(grads[i].values(), numeric.values()));
        }
        return worst;
    }
}

}  // namespace

double scaled_max_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::fabs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::fabs(analytic[i]), std::fabs(numeric[i])});
    }
    return scale > 0.0 ? diff / scale : diff;
}

GradientCheckReport gradient_check(std::uint64_t seed, std::size_t operator_instances, std::size_t network_instances) {
    const auto start = Clock::now();
    GradientCheckReport r;
    Rng rng(derive_seed(seed, 31));
    for (std::size_t i = 0; i < operator_instances; ++i) {
        const OpCase c = make_case(i, rng);
        const double err = check_operator(c, rng);
        if (err >= r.max_operator_error) {
            r.max_operator_error = err;
            r.worst_operator = c.name;
        }
        ++r.operator_instances;
    }
    for (std::size_t i = 0; i < network_instances; ++i) {
        r.max_network_error = std::max(r.max_network_error, check_network(rng));
        ++r.network_instances;
    }
    r.seconds = elapsed(start);
    return r;
}

MaskCheckReport mask_properties(std::uint64_t seed, std::size_t pairs) {
    const auto start = Clock::now();
    MaskCheckReport r;
    Rng rng(derive_seed(seed, 32));
    Rng unused(0);
    std::uniform_real_distribution<double> pct(0.0, 100.0);

    for (std::size_t t = 0; t < pairs; ++t) {
        const std::size_t n = pick(rng, 1, 256);
        Tensor w({1, 1, n});
        const bool tied = pick(rng, 0, 1) == 0;
        for (auto& v : w.data()) v = tied ? static_cast<double>(pick(rng, 0, 4)) : pct(rng) / 100.0;

        const double p1 = pct(rng), p2 = p1 + (100.0 - p1) * pct(rng) / 100.0;
        const Shape zs{1, 1, n};
        const Mask m1 = build_mask(w, p1, zs, MaskMode::Elementwise, DropStrategy::TopGradient, unused);
        const Mask m2 = build_mask(w, p2, zs, MaskMode::Elementwise, DropStrategy::TopGradient, unused);

        const auto zeros = [](const Mask& m) {
            std::set<std::size_t> s;
            for (std::size_t i = 0; i < m.values.size(); ++i)
                if (m.values[i] == 0.0) s.insert(i);
            return s;
        };
        const auto z1 = zeros(m1), z2 = zeros(m2);
        const auto k1 = static_cast<std::size_t>(std::llround(p1 / 100.0 * static_cast<double>(n)));
        if (z1.size() != k1 || m1.muted_count != k1) ++r.cardinality_failures;
        if (!std::includes(z2.begin(), z2.end(), z1.begin(), z1.end())) ++r.containment_failures;

        // Reference: sort by descending weight, then ascending index.
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
        const std::set<std::size_t> expected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k1));
        if (expected != z1) ++r.tie_failures;

        // Broadcast: a muted spatial cell zeroes its fiber, a muted channel its slice.
        const std::size_t h = pick(rng, 1, 4), wd = pick(rng, 1, 4), c = pick(rng, 1, 4);
        const Shape zshape{h, wd, c};
        const Tensor sw = random_tensor({h, wd}, rng), cw = random_tensor({c}, rng);
        const double p = pct(rng);
        const Mask sm = build_mask(sw, p, zshape, MaskMode::Spatial, DropStrategy::TopGradient, unused);
        const Mask cm = build_mask(cw, p, zshape, MaskMode::Channel, DropStrategy::TopGradient, unused);
        const auto sk = top_k_indices(sw.data(), muted_cell_count(p, h * wd));
        const auto ck = top_k_indices(cw.data(), muted_cell_count(p, c));
        const std::set<std::size_t> scells(sk.begin(), sk.end()), ccells(ck.begin(), ck.end());
        bool ok = true;
        for (std::size_t pos = 0; pos < h * wd; ++pos) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                ok = ok && sm.values[pos * c + ch] == (scells.contains(pos) ? 0.0 : 1.0);
                ok = ok && cm.values[pos * c + ch] == (ccells.contains(ch) ? 0.0 : 1.0);
            }
        }
        if (!ok) ++r.broadcast_failures;
        ++r.pairs;
    }
    r.seconds = elapsed(start);
    return r;
}

Corollary2Report corollary2(std::uint64_t seed, std::size_t instances, double eta) {
    const auto start = Clock::now();
    Corollary2Report r;
    r.eta = eta;
    r.min_ratio = r.min_first_order_ratio = INFINITY;
    Rng rng(derive_seed(seed, 33));

    RscConfig cfg;
    cfg.batch_percentage = 100.0;
    cfg.mode = MaskMode::Elementwise;

    for (std::size_t t = 0; t < instances; ++t) {
        const std::size_t b = pick(rng, 4, 8), h = pick(rng, 1, 3), w = pick(rng, 1, 3), c = pick(rng, 2, 4);
        const std::size_t k = pick(rng, 2, 3), f = h * w * c;
        const Tensor z = random_tensor({b, h, w, c}, rng, 0.0, 1.0);  // post-ReLU features
        const Tensor weight = random_tensor({f, k}, rng);
        const Tensor bias = random_tensor({k}, rng, -0.1, 0.1);
        const Tensor labels = one_hot_rows(b, k, rng);
        cfg.seed = rng();

        const Corollary2Check at = corollary2_check(weight, bias, z, labels, cfg, eta);
        const Corollary2Check twice = corollary2_check(weight, bias, z, labels, cfg, 2.0 * eta);
        r.max_relative_residual = std::max(r.max_relative_residual, at.residual / at.gamma_before);
        const double ratio = twice.residual / at.residual;
        const double first = twice.first_order_residual / at.first_order_residual;
        r.min_ratio = std::min(r.min_ratio, ratio);
        r.max_ratio = std::max(r.max_ratio, ratio);
        r.min_first_order_ratio = std::min(r.min_first_order_ratio, first);
        r.max_first_order_ratio = std::max(r.max_first_order_ratio, first);
        ++r.instances;
    }
    r.seconds = elapsed(start);
    return r;
}

}  // namespace rsc::checks
