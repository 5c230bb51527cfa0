#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "rsc/model.hpp"
#include "rsc/seed.hpp"

using namespace rsc;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = u(rng);
    return t;
}

Tensor features(const NetworkParams& p, const Tensor& batch) {
    ad::Tape tape;
    const auto net = bind(tape, p);
    return forward_features(net, tape.leaf(batch)).value();
}

Tensor logits_of(const NetworkParams& p, const Tensor& z) {
    ad::Tape tape;
    const auto net = bind(tape, p);
    return forward_logits(net, tape.leaf(z)).value();
}

Tensor one_hot(const std::vector<std::size_t>& classes, std::size_t k) {
    Tensor y({classes.size(), k}, 0.0);
    for (std::size_t i = 0; i < classes.size(); ++i) y[i * k + classes[i]] = 1.0;
    return y;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("default architecture produces an [8, 8, 16] representation") {
    const auto arch = Architecture::image_default();
    CHECK(arch.representation_shape() == Shape{8, 8, 16});
    const auto p = NetworkParams::initialize(arch, 1);
    CHECK(p.at("fc.weight").shape() == Shape{1024, 2});
    CHECK(features(p, uniform(arch.input_shape(2), 2)).shape() == Shape{2, 8, 8, 16});
}

TEST_CASE("all-zero input with zero biases gives an all-zero representation") {
    const auto arch = Architecture::image_default();
    const auto p = NetworkParams::initialize(arch, 3);
    const Tensor z = features(p, Tensor(arch.input_shape(2), 0.0));
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("a sample's representation does not depend on the rest of the batch") {
    const auto arch = Architecture::image_default();
    const auto p = NetworkParams::initialize(arch, 4);
    const Tensor batch = uniform(arch.input_shape(4), 5);
    const Tensor z4 = features(p, batch);
    for (std::size_t i = 0; i < 4; ++i) CHECK(features(p, batch.slice_rows(i, i + 1)) == z4.slice_rows(i, i + 1));
}

TEST_CASE("forward pass is reproducible bitwise") {
    const auto arch = Architecture::image_default();
    const Tensor batch = uniform(arch.input_shape(3), 6);
    CHECK(features(NetworkParams::initialize(arch, 7), batch) == features(NetworkParams::initialize(arch, 7), batch));
    CHECK(NetworkParams::initialize(arch, 7) != NetworkParams::initialize(arch, 8));
}

TEST_CASE("input shape mismatch is rejected") {
    const auto p = NetworkParams::initialize(Architecture::image_default(), 1);
    ad::Tape tape;
    const auto net = bind(tape, p);
    CHECK_THROWS_AS(forward_features(net, tape.leaf(Tensor({1, 16, 16, 4}))), ShapeError);
    CHECK_THROWS_AS(forward_logits(net, tape.leaf(Tensor({1, 8, 8, 8}))), ShapeError);
}

TEST_CASE("zero representation and zero bias give zero logits") {
    const auto arch = Architecture::image_default();
    const auto p = NetworkParams::initialize(arch, 9);
    const Tensor l = logits_of(p, Tensor({2, 8, 8, 16}, 0.0));
    CHECK(l == Tensor({2, 2}, 0.0));
}

TEST_CASE("identity top-layer weights reproduce the representation") {
    const auto arch = Architecture::tabular(3, 2);
    auto p = NetworkParams::zeros(arch);
    p.at("fc.weight") = Tensor({2, 2}, std::vector<double>{1, 0, 0, 1});
    CHECK(logits_of(p, Tensor({1, 1, 1, 2}, std::vector<double>{3, 5})).values() == std::vector<double>{3, 5});
}

TEST_CASE("an all-ones mask leaves the logits unchanged") {
    const auto arch = Architecture::image_default();
    const auto p = NetworkParams::initialize(arch, 10);
    const Tensor z = uniform({2, 8, 8, 16}, 11, 0.0, 1.0);
    ad::Tape tape;
    const auto net = bind(tape, p);
    const auto zv = tape.leaf(z);
    const auto masked = ad::mul(zv, tape.leaf(Tensor(z.shape(), 1.0)));
    CHECK(forward_logits(net, masked).value() == forward_logits(net, zv).value());
}

TEST_CASE("uniform logits over four classes give ln 4") {
    ad::Tape tape;
    const auto l = loss(tape.leaf(Tensor({3, 4}, 0.5)), tape.leaf(one_hot({0, 2, 3}, 4)));
    CHECK(l.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("a saturated correct prediction has zero loss") {
    ad::Tape tape;
    const auto l = loss(tape.leaf(Tensor({1, 2}, std::vector<double>{1000, 0})), tape.leaf(one_hot({0}, 2)));
    CHECK(l.value().item() <= 1e-9);
    CHECK(l.value().all_finite());
}

TEST_CASE("loss agrees with a long double evaluation of -log softmax") {
    const Tensor logits = uniform({6, 3}, 12, -5.0, 5.0);
    const Tensor labels = one_hot({0, 1, 2, 2, 1, 0}, 3);
    long double total = 0.0L;
    for (std::size_t r = 0; r < 6; ++r) {
        long double z = 0.0L;
        for (std::size_t c = 0; c < 3; ++c) z += std::exp(static_cast<long double>(logits[r * 3 + c]));
        for (std::size_t c = 0; c < 3; ++c)
            if (labels[r * 3 + c] == 1.0) total += std::log(z) - logits[r * 3 + c];
    }
    ad::Tape tape;
    const double got = loss(tape.leaf(logits), tape.leaf(labels)).value().item();
    CHECK(std::fabs(got - static_cast<double>(total / 6)) <= 1e-12);

    const auto per = per_sample_cross_entropy(logits, labels);
    double mean = 0.0;
    for (double v : per) mean += v / 6.0;
    CHECK(mean == doctest::Approx(got).epsilon(1e-12));
}

TEST_CASE("non-one-hot labels are rejected") {
    ad::Tape tape;
    CHECK_THROWS(loss(tape.leaf(Tensor({1, 2})), tape.leaf(Tensor({1, 2}, std::vector<double>{1, 1}))));
}

TEST_CASE("shifting a sample's logits leaves its loss unchanged") {
    const Tensor logits = uniform({5, 4}, 13, -3.0, 3.0);
    const Tensor labels = one_hot({3, 0, 1, 2, 0}, 4);
    Tensor shifted = logits;
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 4; ++c) shifted[r * 4 + c] += 17.0 * static_cast<double>(r + 1);
    const auto a = per_sample_cross_entropy(logits, labels);
    const auto b = per_sample_cross_entropy(shifted, labels);
    for (std::size_t r = 0; r < 5; ++r) CHECK(std::fabs(a[r] - b[r]) <= 1e-9);
}

TEST_CASE("logits scale linearly with the representation when biases are zero") {
    const auto p = NetworkParams::initialize(Architecture::image_default(), 14);
    const Tensor z = uniform({2, 8, 8, 16}, 15, 0.0, 1.0);
    Tensor z3 = z;
    for (auto& v : z3.data()) v *= 3.0;
    const Tensor a = logits_of(p, z), b = logits_of(p, z3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(3.0 * a[i]).epsilon(1e-12));
}

TEST_CASE("initialization stays within the fan-based bound and is finite") {
    const auto arch = Architecture::image_default();
    const auto p = NetworkParams::initialize(arch, 16);
    CHECK(p.all_finite());
    const double s_fc = std::sqrt(6.0 / (1024 + 2));
    for (double v : p.at("fc.weight").data()) CHECK(std::fabs(v) <= s_fc);
    const double s_conv1 = std::sqrt(6.0 / (3 * 3 * 3 + 3 * 3 * 8));
    for (double v : p.at("conv1.weight").data()) CHECK(std::fabs(v) <= s_conv1);
    for (double v : p.at("conv1.bias").data()) CHECK(v == 0.0);
}

TEST_CASE("classifier size must match the flattened representation") {
    const auto arch = Architecture::image_default();
    const auto good = NetworkParams::initialize(arch, 1);
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (std::size_t i = 0; i < good.count(); ++i) tensors.emplace_back(good.name(i), good.tensor(i));
    tensors[good.top_layer_index()].second = Tensor({1000, 2});
    CHECK_THROWS_AS(NetworkParams(arch, tensors), ShapeError);
}

TEST_CASE("checkpoint round trip is exact") {
    const auto dir = std::filesystem::temp_directory_path() / "rsc_test_model";
    std::filesystem::create_directories(dir);
    const auto p = NetworkParams::initialize(Architecture::image_default(), 17);
    save_checkpoint(p, dir / "a.bin");
    CHECK(load_checkpoint(dir / "a.bin") == p);

    std::ifstream in(dir / "a.bin", std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    CHECK(std::string(magic, 8) == "RSCCKPT1");

    std::ofstream(dir / "bad.bin", std::ios::binary) << "NOTACKPT";
    CHECK_THROWS(load_checkpoint(dir / "bad.bin"));
    CHECK_THROWS(load_checkpoint(dir / "missing.bin"));
    std::filesystem::remove_all(dir);
}

}
