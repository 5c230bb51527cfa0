#include "rsc/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>

namespace rsc {

Architecture Architecture::image_default() { return Architecture{}; }

Architecture Architecture::tabular(std::size_t dims, std::size_t hidden) {
    Architecture a;
    a.height = 1;
    a.width = 1;
    a.in_channels = dims;
    a.conv_channels = {hidden, hidden};
    a.kernel = 1;
    a.pool = 1;
    a.classes = 2;
    return a;
}

Shape Architecture::representation_shape() const {
    return {height / pool, width / pool, conv_channels.empty() ? in_channels : conv_channels.back()};
}

void Architecture::validate() const {
    if (height == 0 || width == 0 || in_channels == 0 || classes < 2) {
        throw std::invalid_argument("architecture: dimensions must be positive and classes >= 2");
    }
    if (kernel == 0 || kernel % 2 == 0) throw std::invalid_argument("architecture: kernel size must be odd");
    if (pool == 0 || height % pool != 0 || width % pool != 0) {
        throw std::invalid_argument("architecture: pool window must tile the canvas");
    }
    if (conv_channels.empty()) throw std::invalid_argument("architecture: at least one conv block required");
    for (auto c : conv_channels)
        if (c == 0) throw std::invalid_argument("architecture: conv block with zero channels");
}

NetworkParams::NetworkParams(Architecture arch, std::vector<std::pair<std::string, Tensor>> tensors)
    : arch_(std::move(arch)), tensors_(std::move(tensors)) {
    arch_.validate();
    const std::size_t blocks = arch_.conv_channels.size();
    if (tensors_.size() != 2 * blocks + 2) {
        throw std::invalid_argument("network params: expected " + std::to_string(2 * blocks + 2) + " tensors, got " +
                                    std::to_string(tensors_.size()));
    }
    std::size_t cin = arch_.in_channels;
    for (std::size_t i = 0; i < blocks; ++i) {
        const std::size_t cout = arch_.conv_channels[i];
        const Shape ws{arch_.kernel, arch_.kernel, cin, cout};
        if (tensors_[2 * i].second.shape() != ws || tensors_[2 * i + 1].second.shape() != Shape{cout}) {
            throw ShapeError("network params: conv block " + std::to_string(i + 1) + " expects kernel " +
                             to_string(ws) + ", got " + to_string(tensors_[2 * i].second.shape()));
        }
        cin = cout;
    }
    const Shape fw{arch_.representation_size(), arch_.classes};
    if (tensors_[2 * blocks].second.shape() != fw || tensors_[2 * blocks + 1].second.shape() != Shape{arch_.classes}) {
        throw ShapeError("network params: classifier input must equal the flattened representation " + to_string(fw) +
                         ", got " + to_string(tensors_[2 * blocks].second.shape()));
    }
}

namespace {

std::vector<std::pair<std::string, Tensor>> zero_tensors(const Architecture& arch) {
    std::vector<std::pair<std::string, Tensor>> out;
    std::size_t cin = arch.in_channels;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        const std::size_t cout = arch.conv_channels[i];
        const std::string prefix = "conv" + std::to_string(i + 1);
        out.emplace_back(prefix + ".weight", Tensor({arch.kernel, arch.kernel, cin, cout}, 0.0));
        out.emplace_back(prefix + ".bias", Tensor({cout}, 0.0));
        cin = cout;
    }
    out.emplace_back("fc.weight", Tensor({arch.representation_size(), arch.classes}, 0.0));
    out.emplace_back("fc.bias", Tensor({arch.classes}, 0.0));
    return out;
}

}  // namespace

NetworkParams NetworkParams::zeros(const Architecture& arch) {
    arch.validate();
    return NetworkParams(arch, zero_tensors(arch));
}

NetworkParams NetworkParams::initialize(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    auto tensors = zero_tensors(arch);
    std::mt19937_64 rng(seed);
    for (auto& [name, t] : tensors) {
        if (t.rank() == 1) continue;
        double fan_in = 0, fan_out = 0;
        if (t.rank() == 4) {
            const double area = static_cast<double>(t.dim(0) * t.dim(1));
            fan_in = area * static_cast<double>(t.dim(2));
            fan_out = area * static_cast<double>(t.dim(3));
        } else {
            fan_in = static_cast<double>(t.dim(0));
            fan_out = static_cast<double>(t.dim(1));
        }
        const double s = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-s, s);
        for (auto& v : t.data()) v = dist(rng);
    }
    return NetworkParams(arch, std::move(tensors));
}

const Tensor& NetworkParams::at(const std::string& name) const {
    for (const auto& [n, t] : tensors_)
        if (n == name) return t;
    throw std::out_of_range("network params: no tensor named '" + name + "'");
}

Tensor& NetworkParams::at(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).at(name));
}

bool NetworkParams::all_finite() const noexcept {
    return std::all_of(tensors_.begin(), tensors_.end(), [](const auto& p) { return p.second.all_finite(); });
}

void NetworkParams::apply_sgd(std::span<const Tensor> grads, double step) {
    if (grads.size() != tensors_.size()) throw std::invalid_argument("apply_sgd: gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto p = tensors_[i].second.data();
        auto g = grads[i].data();
        if (p.size() != g.size()) throw ShapeError("apply_sgd: gradient shape mismatch for " + tensors_[i].first);
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= step * g[j];
    }
}

BoundNetwork bind(ad::Tape& tape, const NetworkParams& params) {
    BoundNetwork net;
    net.arch = &params.architecture();
    net.params.reserve(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) net.params.push_back(tape.leaf(params.tensor(i)));
    return net;
}

ad::Var forward_features(const BoundNetwork& net, ad::Var batch) {
    const Architecture& arch = *net.arch;
    const Shape& s = batch.shape();
    if (s.size() != 4 || s[1] != arch.height || s[2] != arch.width || s[3] != arch.in_channels) {
        throw ShapeError("forward_features: batch shape " + to_string(s) + " does not match architecture input " +
                         to_string(arch.input_shape(s.empty() ? 0 : s[0])));
    }
    ad::Var h = batch;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        h = ad::relu(ad::add_bias(ad::conv2d(h, net.params[2 * i]), net.params[2 * i + 1]));
    }
    if (arch.pool > 1) h = ad::avg_pool2d(h, arch.pool);
    return h;
}

ad::Var forward_logits(const BoundNetwork& net, ad::Var z) {
    const Architecture& arch = *net.arch;
    const Shape& s = z.shape();
    const Shape rep = arch.representation_shape();
    if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != rep) {
        throw ShapeError("forward_logits: representation shape " + to_string(s) + " does not match " +
                         to_string(rep));
    }
    return ad::add_bias(ad::matmul(ad::flatten(z), net.fc_weight()), net.fc_bias());
}

ad::Var loss(ad::Var logits, ad::Var labels) { return ad::softmax_cross_entropy(logits, labels); }

std::vector<double> per_sample_cross_entropy(const Tensor& logits, const Tensor& labels) {
    if (logits.rank() != 2 || labels.shape() != logits.shape()) {
        throw ShapeError("per_sample_cross_entropy: incompatible shapes " + to_string(logits.shape()) + " and " +
                         to_string(labels.shape()));
    }
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    std::vector<double> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = &logits.data()[b * classes];
        const double* y = &labels.data()[b * classes];
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0, picked = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            z += std::exp(row[c] - mx);
            if (y[c] == 1.0) picked = row[c];
        }
        out[b] = (mx + std::log(z)) - picked;
    }
    return out;
}

std::vector<std::size_t> argmax_rows(const Tensor& rows) {
    if (rows.rank() != 2) throw ShapeError("argmax_rows: expected rank 2, got " + to_string(rows.shape()));
    const std::size_t n = rows.dim(0), k = rows.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* r = &rows.data()[i * k];
        out[i] = static_cast<std::size_t>(std::max_element(r, r + k) - r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'S', 'C', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

void put_f64(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

double get_f64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
    return std::bit_cast<double>(bits);
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(os, v);
}

Tensor encode_architecture(const Architecture& a) {
    std::vector<double> v{double(a.height), double(a.width), double(a.in_channels), double(a.kernel),
                          double(a.pool),   double(a.classes)};
    for (auto c : a.conv_channels) v.push_back(double(c));
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

Architecture decode_architecture(const Tensor& t) {
    if (t.rank() != 1 || t.size() < 7) throw std::runtime_error("checkpoint: malformed architecture record");
    auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
    Architecture a;
    a.height = u(0);
    a.width = u(1);
    a.in_channels = u(2);
    a.kernel = u(3);
    a.pool = u(4);
    a.classes = u(5);
    a.conv_channels.clear();
    for (std::size_t i = 6; i < t.size(); ++i) a.conv_channels.push_back(u(i));
    return a;
}

}  // namespace

void save_checkpoint(const NetworkParams& params, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put_tensor(os, "arch", encode_architecture(params.architecture()));
    for (std::size_t i = 0; i < params.count(); ++i) put_tensor(os, params.name(i), params.tensor(i));
    os.flush();
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

NetworkParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    }
    std::optional<Architecture> arch;
    std::vector<std::pair<std::string, Tensor>> tensors;
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto name_len = get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated name");
        const auto rank = get_u32(is);
        Shape shape(rank);
        for (auto& d : shape) d = get_u32(is);
        std::vector<double> values(element_count(shape));
        for (auto& v : values) v = get_f64(is);
        Tensor t(std::move(shape), std::move(values));
        if (name == "arch") arch = decode_architecture(t);
        else tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!arch) throw std::runtime_error("checkpoint: missing architecture record in " + path.string());
    return NetworkParams(*arch, std::move(tensors));
}

}  // namespace rsc
