#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rsc/autodiff.hpp"
#include "rsc/tensor.hpp"

namespace rsc {

/// Shape of the feature extractor and classifier.
///
/// The extractor is a stack of `conv_channels.size()` conv+ReLU blocks with
/// square `kernel` windows, followed by `pool`×`pool` average pooling (pool 1
/// disables it). Its output is the representation Z of shape
/// [height/pool, width/pool, conv_channels.back()]. The classifier is one
/// linear layer on flattened Z.
struct Architecture {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t in_channels = 3;
    std::vector<std::size_t> conv_channels{8, 16};
    std::size_t kernel = 3;
    std::size_t pool = 2;
    std::size_t classes = 2;

    /// 16x16x3 -> conv 8 -> conv 16 -> 2x2 pool -> Z [8, 8, 16].
    static Architecture image_default();
    /// Inputs laid out as [1, 1, dims] with 1x1 convolutions (a dense MLP).
    static Architecture tabular(std::size_t dims, std::size_t hidden = 16);

    Shape input_shape(std::size_t batch) const { return {batch, height, width, in_channels}; }
    Shape representation_shape() const;
    std::size_t representation_size() const { return element_count(representation_shape()); }

    void validate() const;
    friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Named parameter tensors in a fixed order:
/// conv{i}.weight [k, k, Cin, Cout], conv{i}.bias [Cout], fc.weight [F, K], fc.bias [K].
class NetworkParams {
public:
    NetworkParams() = default;
    NetworkParams(Architecture arch, std::vector<std::pair<std::string, Tensor>> tensors);

    /// Uniform in [-s, s], s = sqrt(6 / (fan_in + fan_out)); zero biases.
    static NetworkParams initialize(const Architecture& arch, std::uint64_t seed);
    static NetworkParams zeros(const Architecture& arch);

    const Architecture& architecture() const noexcept { return arch_; }
    std::size_t count() const noexcept { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return tensors_.at(i).first; }
    const Tensor& tensor(std::size_t i) const { return tensors_.at(i).second; }
    Tensor& tensor(std::size_t i) { return tensors_.at(i).second; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    /// Index of the first classifier tensor (fc.weight); fc.bias follows it.
    std::size_t top_layer_index() const noexcept { return tensors_.size() - 2; }

    bool all_finite() const noexcept;

    /// this -= step * grads, in parameter order.
    void apply_sgd(std::span<const Tensor> grads, double step);

    friend bool operator==(const NetworkParams&, const NetworkParams&) = default;

private:
    Architecture arch_;
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

/// Parameters recorded as leaves on a tape.
struct BoundNetwork {
    const Architecture* arch = nullptr;
    std::vector<ad::Var> params;

    ad::Var fc_weight() const { return params[params.size() - 2]; }
    ad::Var fc_bias() const { return params.back(); }
};

BoundNetwork bind(ad::Tape& tape, const NetworkParams& params);

/// Z for a batch [B, H, W, Cin]; returns [B, H', W', C].
ad::Var forward_features(const BoundNetwork& net, ad::Var batch);
/// Logits [B, K] from Z [B, H', W', C].
ad::Var forward_logits(const BoundNetwork& net, ad::Var z);
/// Mean softmax cross-entropy over the batch.
ad::Var loss(ad::Var logits, ad::Var labels);

/// Cross-entropy of each row, evaluated directly from logit values.
std::vector<double> per_sample_cross_entropy(const Tensor& logits, const Tensor& labels);
/// Index of the largest entry in each row (lowest index on ties).
std::vector<std::size_t> argmax_rows(const Tensor& rows);

/// Binary checkpoint: magic "RSCCKPT1", then per tensor name length (u32),
/// name bytes, rank (u32), dims (u32 each), values (f64); all little-endian.
/// Architecture fields are stored as an extra tensor named "arch".
void save_checkpoint(const NetworkParams& params, const std::filesystem::path& path);
NetworkParams load_checkpoint(const std::filesystem::path& path);

}  // namespace rsc
