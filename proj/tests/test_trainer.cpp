#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "rsc/trainer.hpp"

using namespace rsc;

namespace {

BenchmarkOptions small_options(std::size_t source = 120, std::size_t target = 200) {
    BenchmarkOptions o;
    o.source_samples = source;
    o.target_samples = target;
    return o;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string metrics_text(const std::vector<EpochMetrics>& epochs, const std::string& name) {
    const auto path = std::filesystem::temp_directory_path() / ("rsc_test_trainer_" + name + ".csv");
    write_metrics_csv(epochs, path);
    auto s = read_file(path);
    std::filesystem::remove(path);
    return s;
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = u(rng);
    return t;
}

struct TopLayerInstance {
    Tensor weight, bias, z, labels;
};

TopLayerInstance random_instance(std::uint64_t seed) {
    Rng rng(seed);
    TopLayerInstance t;
    t.z = uniform({4, 2, 2, 3}, rng, 0.0, 1.0);
    t.weight = uniform({12, 2}, rng, -1.0, 1.0);
    t.bias = uniform({2}, rng, -0.5, 0.5);
    t.labels = Tensor({4, 2}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) t.labels[i * 2 + i % 2] = 1.0;
    return t;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config validation and learning-rate schedule") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.epochs = 0;
    CHECK_THROWS(c.validate());
    c.epochs = 10;
    c.batch_size = 0;
    CHECK_THROWS(c.validate());
    c.batch_size = 32;
    c.learning_rate = -1.0;
    CHECK_THROWS(c.validate());
    c.learning_rate = 0.5;
    CHECK(c.learning_rate_at(8) == 0.5);
    CHECK(c.learning_rate_at(9) == doctest::Approx(0.05));
    c.lr_decay_epoch = 2;
    CHECK(c.learning_rate_at(3) == doctest::Approx(0.05));

    c.baseline = Baseline::TopActivation;
    CHECK(c.effective_rsc().strategy == DropStrategy::TopActivation);
    CHECK(parse_baseline("top-gradient") == Baseline::Rsc);
    CHECK_THROWS(parse_baseline("dropblock"));
}

TEST_CASE("a zero learning rate leaves the parameters unchanged") {
    const auto b = make_benchmark(BenchmarkKind::ShapeColor, 1, small_options(40, 20));
    const auto init = NetworkParams::initialize(b.architecture, 2);
    TrainConfig c;
    c.epochs = 1;
    c.learning_rate = 0.0;
    c.baseline = Baseline::None;
    const auto r = train(init, b, c);
    CHECK(r.params == init);
    CHECK(r.epochs.size() == 1);
}

TEST_CASE("p = 0 RSC and plain training produce identical metric streams") {
    const auto b = make_benchmark(BenchmarkKind::ShapeColor, 3, small_options(60, 60));
    const auto init = NetworkParams::initialize(b.architecture, 4);
    TrainConfig plain;
    plain.epochs = 2;
    plain.baseline = Baseline::None;
    TrainConfig rsc = plain;
    rsc.baseline = Baseline::Rsc;
    rsc.rsc.drop_percentage = 0.0;
    const auto a = train(init, b, plain);
    const auto r = train(init, b, rsc);
    CHECK(a.params == r.params);
    CHECK(metrics_text(a.epochs, "plain") == metrics_text(r.epochs, "rsc0"));
}

TEST_CASE("training is deterministic and emits one metrics row per epoch") {
    const auto b = make_benchmark(BenchmarkKind::TabularShift, 5, small_options());
    const auto init = NetworkParams::initialize(b.architecture, 6);
    TrainConfig c;
    c.epochs = 3;
    c.rsc.mode = MaskMode::Elementwise;
    std::size_t callbacks = 0;
    const auto a = train(init, b, c, [&](const EpochMetrics&) { ++callbacks; });
    const auto again = train(init, b, c);
    CHECK(callbacks == 3);
    CHECK(a.params == again.params);
    CHECK(metrics_text(a.epochs, "a") == metrics_text(again.epochs, "b"));
    for (const auto& e : a.epochs) {
        CHECK(e.a4_rate >= 0.0);
        CHECK(e.a4_rate <= 1.0);
        CHECK(std::isfinite(e.gamma_mean));
        CHECK(e.targets.size() == 1);
        CHECK(e.steps == 12);  // 360 samples in batches of 32
    }
    const auto text = metrics_text(a.epochs, "c");
    CHECK(text.rfind("epoch,split,domain,loss,acc,gamma_mean,gamma_ratio_mean,a4_rate,grad_sq_norm\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 2 * 3);
}

TEST_CASE("divergence stops the run at the last good epoch") {
    const auto b = make_benchmark(BenchmarkKind::TabularShift, 7, small_options());
    TrainConfig c;
    c.epochs = 5;
    c.learning_rate = 1e300;
    c.baseline = Baseline::None;
    const auto r = train(NetworkParams::initialize(b.architecture, 8), b, c);
    CHECK(r.diverged);
    CHECK_FALSE(r.divergence_message.empty());
    CHECK(r.epochs.size() < 5);
    CHECK(r.params.all_finite());
}

TEST_CASE("a model fit to a separable training set evaluates to accuracy 1") {
    BenchmarkOptions o = small_options(100, 100);
    o.source_correlations = {1.0, 1.0, 1.0};
    o.target_correlation = 1.0;
    o.tabular_noise = 0.0;
    const auto b = make_benchmark(BenchmarkKind::TabularShift, 9, o);
    TrainConfig c;
    c.epochs = 20;
    c.baseline = Baseline::None;
    const auto r = train(NetworkParams::initialize(b.architecture, 10), b, c);
    const auto e = evaluate(r.params, b.training);
    CHECK(e.accuracy == 1.0);
    CHECK(e.per_class_accuracy == std::vector<double>{1.0, 1.0});
}

TEST_CASE("random parameters score at chance on a balanced set") {
    const auto b = make_benchmark(BenchmarkKind::ShapeColor, 11, small_options(10, 5000));
    const auto e = evaluate(NetworkParams::initialize(b.architecture, 12), b.target);
    INFO("accuracy " << e.accuracy);
    CHECK(std::fabs(e.accuracy - 0.5) <= 0.03);
}

TEST_CASE("evaluation does not depend on sample order") {
    const auto b = make_benchmark(BenchmarkKind::TabularShift, 13, small_options(10, 600));
    const auto p = NetworkParams::initialize(b.architecture, 14);
    std::vector<std::size_t> order(600);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), Rng(15));
    DomainDataset shuffled = b.target;
    shuffled.inputs = b.target.inputs.gather_rows(order);
    shuffled.labels = b.target.labels.gather_rows(order);
    const auto a = evaluate(p, b.target), s = evaluate(p, shuffled);
    CHECK(a.accuracy == s.accuracy);
    CHECK(a.loss == doctest::Approx(s.loss).epsilon(1e-12));
    CHECK_THROWS(evaluate(p, DomainDataset{}));
}

TEST_CASE("post-warm-up rates skip the first epoch") {
    EpochMetrics e1, e2, e3;
    e1.epoch = 1;
    e1.steps = 10;
    e1.a4_steps = 0;
    e2.epoch = 2;
    e2.steps = 10;
    e2.a4_steps = 9;
    e2.gamma_ratio_above_one = 8;
    e3.epoch = 3;
    e3.steps = 10;
    e3.a4_steps = 10;
    e3.gamma_ratio_above_one = 10;
    const auto r = post_warmup_rates({e1, e2, e3}, 1);
    CHECK(r.steps == 20);
    CHECK(r.a4_rate == doctest::Approx(0.95));
    CHECK(r.gamma_ratio_above_one_rate == doctest::Approx(0.9));
}

TEST_CASE("corollary 2 residual is exactly zero for a zero step") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto t = random_instance(s);
        CHECK(corollary2_residual(t.weight, t.bias, t.z, t.labels, 33.3, 0.0) == 0.0);
    }
}

TEST_CASE("corollary 2 residual requires a small step and a nonzero loss") {
    const auto t = random_instance(20);
    CHECK_THROWS(corollary2_residual(t.weight, t.bias, t.z, t.labels, 33.3, 1e-3));
    Tensor w({12, 2}, 0.0);
    for (std::size_t f = 0; f < 12; ++f) {
        w[f * 2 + 0] = -1e6;
        w[f * 2 + 1] = 1e6;
    }
    Tensor y({4, 2}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) y[i * 2 + 1] = 1.0;
    CHECK_THROWS_AS(corollary2_residual(w, Tensor({2}, 0.0), t.z, y, 33.3, 1e-5), std::domain_error);
}

TEST_CASE("the exact first-order expansion of the loss difference has an O(eta^2) residual") {
    RscConfig cfg;
    cfg.mode = MaskMode::Elementwise;
    cfg.batch_percentage = 100.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto t = random_instance(100 + s);
        const auto a = corollary2_check(t.weight, t.bias, t.z, t.labels, cfg, 1e-4);
        const auto b = corollary2_check(t.weight, t.bias, t.z, t.labels, cfg, 2e-4);
        REQUIRE(a.first_order_residual > 0.0);
        const double ratio = b.first_order_residual / a.first_order_residual;
        INFO("instance " << s << " ratio " << ratio);
        CHECK(ratio >= 2.5);
        CHECK(ratio <= 6.0);
        CHECK(a.gamma_before > 0.0);
    }
}

TEST_CASE("untrained parameters probe at chance") {
    const auto b = make_benchmark(BenchmarkKind::ShapeColor, 21, small_options(10, 2000));
    const auto r = probe_feature_reliance(NetworkParams::initialize(b.architecture, 22), b);
    INFO("core " << r.core_accuracy << " spurious " << r.spurious_accuracy);
    CHECK(std::fabs(r.core_accuracy - 0.5) <= 0.05);
    CHECK(std::fabs(r.spurious_accuracy - 0.5) <= 0.05);
}

TEST_CASE("a shortcut-only training regime relies on the spurious feature") {
    BenchmarkOptions o = small_options(300, 2000);
    o.source_correlations = {1.0, 1.0, 1.0};
    o.target_correlation = 1.0;
    o.tabular_noise = 0.0;
    o.tabular.core_mean = 0.3;
    auto b = make_benchmark(BenchmarkKind::TabularShift, 23, o);
    b.architecture = Architecture::tabular(8, 2);
    TrainConfig c;
    c.epochs = 5;
    c.baseline = Baseline::None;
    const auto r = train(NetworkParams::initialize(b.architecture, 24), b, c);
    const auto probe = probe_feature_reliance(r.params, b);
    INFO("core " << probe.core_accuracy << " spurious " << probe.spurious_accuracy);
    CHECK(probe.spurious_accuracy >= probe.core_accuracy + 0.2);
}

TEST_CASE("format_double uses nine significant digits") {
    CHECK(format_double(1.0 / 3.0) == "0.333333333");
    CHECK(format_double(2.0) == "2");
}

}
