#pragma once

// Synthetic cross-domain datasets with known core / spurious structure.
//
// Every domain shares the same label-causing core features; a spurious
// feature agrees with the label with probability (1 + rho) / 2, where rho
// varies per domain. Source domains carry a strong shortcut, the target none.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rsc/model.hpp"
#include "rsc/seed.hpp"
#include "rsc/tensor.hpp"

namespace rsc {

enum class DomainRole { Source, Target };
enum class BenchmarkKind { TabularShift, ShapeColor };

std::string_view to_string(BenchmarkKind kind);
BenchmarkKind parse_benchmark(std::string_view name);

struct DomainSpec {
    std::string id;
    double spurious_correlation = 0.0;  ///< rho in [-1, 1]
    double noise_std = 0.0;             ///< sigma >= 0
    std::size_t sample_count = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// 0/1 masks over one input sample marking which entries carry each feature.
struct FeatureAnnotation {
    Tensor core;
    Tensor spurious;
};

struct DomainDataset {
    std::string id;
    DomainRole role = DomainRole::Source;
    Tensor inputs;  ///< [n, H, W, C]; tabular data uses H = W = 1
    Tensor labels;  ///< [n, K] one-hot
    FeatureAnnotation annotation;

    std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
    std::vector<std::size_t> label_indices() const;
};

struct TabularParams {
    std::size_t core_dims = 4;
    std::size_t spurious_dims = 4;
    double core_mean = 0.8;      ///< ±mu_core, identical in every domain
    double spurious_mean = 1.0;  ///< ±mu_sp
    double core_std = 1.0;       ///< class-conditional spread of the core dims before noise
};

struct ShapeColorParams {
    std::size_t canvas = 16;
    std::size_t channels = 3;
    std::size_t jitter = 2;        ///< shape offset in [-jitter, jitter] per axis
    std::size_t patch = 4;         ///< side of the spurious corner patch
    double shape_intensity = 1.0;  ///< value written to every channel of a shape pixel
    double patch_intensity = 0.25;  ///< value written to the tint channel of the patch
};

DomainDataset generate_tabular_domain(const DomainSpec& spec, const TabularParams& params = {});
DomainDataset generate_shape_color_domain(const DomainSpec& spec, const ShapeColorParams& params = {});

/// Like generate_shape_color_domain, but every sample uses the given shape
/// offset instead of a random one.
DomainDataset generate_shape_color_domain_fixed_offset(const DomainSpec& spec, int dy, int dx,
                                                       const ShapeColorParams& params = {});

struct BenchmarkOptions {
    std::vector<double> source_correlations{0.90, 0.95, 0.99};
    double target_correlation = 0.0;
    std::size_t source_samples = 2000;
    std::size_t target_samples = 5000;
    double tabular_noise = 0.3;
    double image_noise = 0.3;
    TabularParams tabular{};
    ShapeColorParams shape_color{};
};

struct Benchmark {
    BenchmarkKind kind = BenchmarkKind::TabularShift;
    std::vector<DomainDataset> sources;
    DomainDataset target;
    /// All source samples concatenated and shuffled; no domain labels.
    DomainDataset training;
    /// Architecture matching the benchmark's inputs.
    Architecture architecture;
};

Benchmark make_benchmark(BenchmarkKind kind, std::uint64_t seed, const BenchmarkOptions& options = {});
Benchmark make_benchmark(std::string_view name, std::uint64_t seed, const BenchmarkOptions& options = {});

/// Copy of the dataset with the entries of `region` set to zero.
DomainDataset zero_region(const DomainDataset& data, const Tensor& region);

/// Shuffled concatenation of several datasets (same input shape).
DomainDataset concatenate_shuffled(const std::vector<DomainDataset>& parts, std::uint64_t seed, std::string id);

/// CSV with header `y,x0,...,x{d-1}`, floats with 9 significant digits.
void write_tabular_csv(const DomainDataset& data, const std::filesystem::path& path);
/// Magic "RSCDATA1", u32 sample count, u32 H, W, C, f32 pixels, u32 K,
/// one-hot labels as u8; all little-endian.
void write_image_tensor(const DomainDataset& data, const std::filesystem::path& path);
DomainDataset read_image_tensor(const std::filesystem::path& path);

}  // namespace rsc
