#include "rsc/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "rsc/seed.hpp"

namespace rsc {

std::string_view to_string(BenchmarkKind kind) {
    return kind == BenchmarkKind::TabularShift ? "tabular-shift" : "shape-color";
}

BenchmarkKind parse_benchmark(std::string_view name) {
    if (name == "tabular-shift") return BenchmarkKind::TabularShift;
    if (name == "shape-color") return BenchmarkKind::ShapeColor;
    throw std::invalid_argument("unknown benchmark '" + std::string(name) + "' (expected tabular-shift or shape-color)");
}

void DomainSpec::validate() const {
    if (!(spurious_correlation >= -1.0 && spurious_correlation <= 1.0)) {
        throw std::invalid_argument("domain " + id + ": spurious correlation must lie in [-1, 1]");
    }
    if (!(noise_std >= 0.0)) throw std::invalid_argument("domain " + id + ": noise std must be non-negative");
    if (sample_count == 0) throw std::invalid_argument("domain " + id + ": sample count must be positive");
}

std::vector<std::size_t> DomainDataset::label_indices() const { return argmax_rows(labels); }

namespace {

// Streams derived from a domain seed. The core stream never depends on rho,
// so domains that share a seed share labels and core features bitwise.
constexpr std::uint64_t kCoreStream = 1;
constexpr std::uint64_t kSpuriousStream = 2;
constexpr std::uint64_t kShuffleStream = 3;

/// Exactly balanced labels (within one sample) in a shuffled order.
std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = i % classes;
    std::shuffle(y.begin(), y.end(), rng);
    return y;
}

Tensor one_hot(const std::vector<std::size_t>& y, std::size_t classes) {
    Tensor t({y.size(), classes}, 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) t[i * classes + y[i]] = 1.0;
    return t;
}

bool aligned_draw(double rho, Rng& rng) {
    std::bernoulli_distribution aligned((1.0 + rho) / 2.0);
    return aligned(rng);
}

}  // namespace

DomainDataset generate_tabular_domain(const DomainSpec& spec, const TabularParams& params) {
    spec.validate();
    if (params.core_dims == 0 || params.spurious_dims == 0) {
        throw std::invalid_argument("tabular domain: core and spurious dims must both be at least 1");
    }
    const std::size_t n = spec.sample_count, dc = params.core_dims, ds = params.spurious_dims, d = dc + ds;
    Rng core_rng(derive_seed(spec.seed, kCoreStream));
    Rng sp_rng(derive_seed(spec.seed, kSpuriousStream));
    const auto y = balanced_labels(n, 2, core_rng);
    std::normal_distribution<double> unit(0.0, 1.0);

    Tensor x({n, 1, 1, d}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double sign = y[i] == 1 ? 1.0 : -1.0;
        double* row = &x.data()[i * d];
        for (std::size_t j = 0; j < dc; ++j) {
            const double spread = params.core_std * unit(core_rng);
            row[j] = sign * params.core_mean + spread + spec.noise_std * unit(core_rng);
        }
        const double sp_sign = aligned_draw(spec.spurious_correlation, sp_rng) ? sign : -sign;
        for (std::size_t j = 0; j < ds; ++j) {
            row[dc + j] = sp_sign * params.spurious_mean + spec.noise_std * unit(sp_rng);
        }
    }

    DomainDataset out;
    out.id = spec.id;
    out.inputs = std::move(x);
    out.labels = one_hot(y, 2);
    out.annotation.core = Tensor({1, 1, d}, 0.0);
    out.annotation.spurious = Tensor({1, 1, d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) (j < dc ? out.annotation.core : out.annotation.spurious)[j] = 1.0;
    return out;
}

namespace {

/// Draws class `label` (0 square, 1 cross) centred at (cy, cx).
void draw_shape(double* img, std::size_t canvas, std::size_t channels, std::size_t label, std::ptrdiff_t cy,
                std::ptrdiff_t cx, double intensity) {
    auto set = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
        if (r < 0 || c < 0 || r >= std::ptrdiff_t(canvas) || c >= std::ptrdiff_t(canvas)) return;
        double* px = &img[(std::size_t(r) * canvas + std::size_t(c)) * channels];
        for (std::size_t ch = 0; ch < channels; ++ch) px[ch] = intensity;
    };
    if (label == 0) {
        for (std::ptrdiff_t r = -2; r <= 2; ++r)
            for (std::ptrdiff_t c = -2; c <= 2; ++c) set(cy + r, cx + c);
    } else {
        for (std::ptrdiff_t r = -3; r <= 3; ++r)
            for (std::ptrdiff_t c = -3; c <= 3; ++c)
                if (std::abs(r) <= 1 || std::abs(c) <= 1) set(cy + r, cx + c);
    }
}

DomainDataset shape_color_impl(const DomainSpec& spec, const ShapeColorParams& p, bool fixed, int fdy, int fdx) {
    spec.validate();
    if (p.channels < 2) throw std::invalid_argument("shape-color domain: need at least two colour channels");
    if (p.patch * 2 > p.canvas || p.canvas < 2 * p.jitter + 8) {
        throw std::invalid_argument("shape-color domain: canvas too small for shapes, jitter and patch");
    }
    const std::size_t n = spec.sample_count, s = p.canvas, c = p.channels, pix = s * s * c;
    Rng core_rng(derive_seed(spec.seed, kCoreStream));
    Rng sp_rng(derive_seed(spec.seed, kSpuriousStream));
    const auto y = balanced_labels(n, 2, core_rng);
    std::uniform_int_distribution<int> offset(-int(p.jitter), int(p.jitter));
    std::normal_distribution<double> unit(0.0, 1.0);

    Tensor x({n, s, s, c}, 0.0);
    const auto centre = std::ptrdiff_t(s / 2);
    for (std::size_t i = 0; i < n; ++i) {
        double* img = &x.data()[i * pix];
        int dy = fdy, dx = fdx;
        if (!fixed) {
            dy = offset(core_rng);
            dx = offset(core_rng);
        }
        draw_shape(img, s, c, y[i], centre + dy, centre + dx, p.shape_intensity);
        if (spec.noise_std > 0.0) {
            for (std::size_t r = 0; r < s; ++r)
                for (std::size_t col = 0; col < s; ++col)
                    if (r >= p.patch || col >= p.patch)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            img[(r * s + col) * c + ch] += spec.noise_std * unit(core_rng);
        }
        const std::size_t tint = aligned_draw(spec.spurious_correlation, sp_rng) ? y[i] : 1 - y[i];
        for (std::size_t r = 0; r < p.patch; ++r)
            for (std::size_t col = 0; col < p.patch; ++col) {
                double* px = &img[(r * s + col) * c];
                px[tint] = p.patch_intensity;
                if (spec.noise_std > 0.0)
                    for (std::size_t ch = 0; ch < c; ++ch) px[ch] += spec.noise_std * unit(sp_rng);
            }
    }

    DomainDataset out;
    out.id = spec.id;
    out.inputs = std::move(x);
    out.labels = one_hot(y, 2);
    out.annotation.core = Tensor({s, s, c}, 1.0);
    out.annotation.spurious = Tensor({s, s, c}, 0.0);
    for (std::size_t r = 0; r < p.patch; ++r)
        for (std::size_t col = 0; col < p.patch; ++col)
            for (std::size_t ch = 0; ch < c; ++ch) {
                out.annotation.core[(r * s + col) * c + ch] = 0.0;
                out.annotation.spurious[(r * s + col) * c + ch] = 1.0;
            }
    return out;
}

}  // namespace

DomainDataset generate_shape_color_domain(const DomainSpec& spec, const ShapeColorParams& params) {
    return shape_color_impl(spec, params, false, 0, 0);
}

DomainDataset generate_shape_color_domain_fixed_offset(const DomainSpec& spec, int dy, int dx,
                                                       const ShapeColorParams& params) {
    if (std::abs(dy) > int(params.jitter) || std::abs(dx) > int(params.jitter)) {
        throw std::invalid_argument("shape-color domain: fixed offset exceeds the jitter range");
    }
    return shape_color_impl(spec, params, true, dy, dx);
}

DomainDataset concatenate_shuffled(const std::vector<DomainDataset>& parts, std::uint64_t seed, std::string id) {
    if (parts.empty()) throw std::invalid_argument("concatenate_shuffled: no datasets");
    const Shape sample(parts[0].inputs.shape().begin() + 1, parts[0].inputs.shape().end());
    const std::size_t classes = parts[0].labels.dim(1);
    std::vector<double> xs, ys;
    for (const auto& part : parts) {
        if (Shape(part.inputs.shape().begin() + 1, part.inputs.shape().end()) != sample) {
            throw ShapeError("concatenate_shuffled: domain " + part.id + " has sample shape " +
                             to_string(part.inputs.shape()));
        }
        xs.insert(xs.end(), part.inputs.data().begin(), part.inputs.data().end());
        ys.insert(ys.end(), part.labels.data().begin(), part.labels.data().end());
    }
    const std::size_t n = ys.size() / classes;
    Shape xs_shape{n};
    xs_shape.insert(xs_shape.end(), sample.begin(), sample.end());
    const Tensor all_x(xs_shape, std::move(xs));
    const Tensor all_y({n, classes}, std::move(ys));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, kShuffleStream));
    std::shuffle(order.begin(), order.end(), rng);

    DomainDataset out;
    out.id = std::move(id);
    out.role = DomainRole::Source;
    out.inputs = all_x.gather_rows(order);
    out.labels = all_y.gather_rows(order);
    out.annotation = parts[0].annotation;
    return out;
}

Benchmark make_benchmark(BenchmarkKind kind, std::uint64_t seed, const BenchmarkOptions& options) {
    Benchmark b;
    b.kind = kind;
    auto generate = [&](const DomainSpec& spec) {
        return kind == BenchmarkKind::TabularShift ? generate_tabular_domain(spec, options.tabular)
                                                   : generate_shape_color_domain(spec, options.shape_color);
    };
    const double noise = kind == BenchmarkKind::TabularShift ? options.tabular_noise : options.image_noise;
    for (std::size_t i = 0; i < options.source_correlations.size(); ++i) {
        DomainSpec spec{"source" + std::to_string(i), options.source_correlations[i], noise, options.source_samples,
                        derive_seed(seed, 100 + i)};
        b.sources.push_back(generate(spec));
        b.sources.back().role = DomainRole::Source;
    }
    DomainSpec target{"target", options.target_correlation, noise, options.target_samples, derive_seed(seed, 99)};
    b.target = generate(target);
    b.target.role = DomainRole::Target;
    b.training = concatenate_shuffled(b.sources, seed, "sources");
    b.architecture = kind == BenchmarkKind::TabularShift
                         ? Architecture::tabular(options.tabular.core_dims + options.tabular.spurious_dims)
                         : Architecture::image_default();
    if (kind == BenchmarkKind::ShapeColor) {
        b.architecture.height = b.architecture.width = options.shape_color.canvas;
        b.architecture.in_channels = options.shape_color.channels;
    }
    return b;
}

Benchmark make_benchmark(std::string_view name, std::uint64_t seed, const BenchmarkOptions& options) {
    return make_benchmark(parse_benchmark(name), seed, options);
}

DomainDataset zero_region(const DomainDataset& data, const Tensor& region) {
    const Shape sample(data.inputs.shape().begin() + 1, data.inputs.shape().end());
    if (region.shape() != sample) {
        throw ShapeError("zero_region: region " + to_string(region.shape()) + " does not match sample shape " +
                         to_string(sample));
    }
    DomainDataset out = data;
    auto x = out.inputs.data();
    const std::size_t per = region.size();
    for (std::size_t i = 0; i < x.size(); ++i)
        if (region[i % per] != 0.0) x[i] = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Dumps
// ---------------------------------------------------------------------------

void write_tabular_csv(const DomainDataset& data, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const std::size_t n = data.size();
    const std::size_t d = n ? data.inputs.size() / n : 0;
    os << 'y';
    for (std::size_t j = 0; j < d; ++j) os << ",x" << j;
    os << '\n';
    const auto y = data.label_indices();
    char buf[32];
    for (std::size_t i = 0; i < n; ++i) {
        os << y[i];
        for (std::size_t j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", data.inputs[i * d + j]);
            os << ',' << buf;
        }
        os << '\n';
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

namespace {

constexpr char kDataMagic[8] = {'R', 'S', 'C', 'D', 'A', 'T', 'A', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("image tensor: truncated file");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

}  // namespace

void write_image_tensor(const DomainDataset& data, const std::filesystem::path& path) {
    if (data.inputs.rank() != 4) throw ShapeError("write_image_tensor: inputs must be [n, H, W, C]");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kDataMagic, 8);
    put_u32(os, static_cast<std::uint32_t>(data.size()));
    for (std::size_t a = 1; a < 4; ++a) put_u32(os, static_cast<std::uint32_t>(data.inputs.dim(a)));
    for (double v : data.inputs.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    const std::size_t k = data.labels.dim(1);
    put_u32(os, static_cast<std::uint32_t>(k));
    for (double v : data.labels.data()) os.put(static_cast<char>(v != 0.0 ? 1 : 0));
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

DomainDataset read_image_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kDataMagic, 8) != 0) {
        throw std::runtime_error("image tensor: bad magic in " + path.string());
    }
    const std::size_t n = get_u32(is), h = get_u32(is), w = get_u32(is), c = get_u32(is);
    std::vector<double> px(n * h * w * c);
    for (auto& v : px) v = static_cast<double>(std::bit_cast<float>(get_u32(is)));
    const std::size_t k = get_u32(is);
    std::vector<double> labels(n * k);
    for (auto& v : labels) {
        const int ch = is.get();
        if (ch == std::char_traits<char>::eof()) throw std::runtime_error("image tensor: truncated labels");
        v = ch ? 1.0 : 0.0;
    }
    DomainDataset out;
    out.id = path.stem().string();
    out.inputs = Tensor({n, h, w, c}, std::move(px));
    out.labels = Tensor({n, k}, std::move(labels));
    return out;
}

}  // namespace rsc
