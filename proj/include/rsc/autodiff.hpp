#pragma once

// Reverse-mode differentiation over a recorded sequence of tensor operations.
//
// A Tape is the computation record: every operation appends one node holding
// its output value, the ids of its inputs and a backward rule. Node ids are
// assigned in execution order, so the record is topologically ordered by
// construction and a single reverse sweep visits each node once.

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "rsc/tensor.hpp"

namespace rsc::ad {

enum class OpKind {
    Leaf,
    MatMul,
    Conv2d,
    AddBias,
    Relu,
    AvgPool2d,
    Mean,
    Reshape,
    Mul,
    Sum,
    SoftmaxCrossEntropy,
};

std::string_view op_name(OpKind kind);

class Tape;

/// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Accumulates the gradient for each input given the output gradient.
/// `inputs[i]` is the forward value of input i; `input_grads[i]` is null when
/// input i does not lead to any requested variable.
using BackwardRule = std::function<void(const Tensor& out_grad, const Tensor& out_value,
                                        std::span<const Tensor* const> inputs,
                                        std::span<Tensor*> input_grads)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Records an input, parameter or constant.
    Var leaf(Tensor value);

    Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardRule backward);

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// d(output)/d(v) for each v in wrt. `output` must hold a single element.
    /// A variable that does not influence the output gets a zero tensor.
    std::vector<Tensor> grad(Var output, std::span<const Var> wrt) const;

    /// Number of backward rules executed by the most recent grad() call.
    std::size_t last_backward_visits() const noexcept { return last_visits_; }

private:
    struct Node {
        OpKind kind;
        std::vector<std::size_t> inputs;
        Tensor value;
        BackwardRule backward;
    };
    std::vector<Node> nodes_;
    mutable std::size_t last_visits_ = 0;
};

// Operators. All operands must live on the same tape.

/// [m, k] x [k, n] -> [m, n].
Var matmul(Var a, Var b);
/// NHWC input [B, H, W, Cin] with kernel [k, k, Cin, Cout], stride 1, odd k,
/// zero padding so the spatial size is preserved.
Var conv2d(Var input, Var kernel);
/// Adds bias [C] along the last axis.
Var add_bias(Var x, Var bias);
/// max(x, 0); the subgradient at 0 is 0.
Var relu(Var x);
/// Non-overlapping window x window average pooling of an NHWC tensor.
Var avg_pool2d(Var x, std::size_t window);
/// Mean over the listed axes, which are removed from the shape.
Var mean(Var x, std::vector<std::size_t> axes);
Var reshape(Var x, Shape shape);
/// [B, ...] -> [B, prod(...)].
Var flatten(Var x);
/// Elementwise product of equally shaped tensors.
Var mul(Var a, Var b);
/// Sum of all elements, shape [1].
Var sum(Var x);
/// Mean over the batch of -log softmax(logits)[true class]; labels are
/// one-hot rows of the same [B, K] shape and are treated as constants.
Var softmax_cross_entropy(Var logits, Var labels);

/// Central-difference gradient estimate of `f` at `point`.
Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& point,
                          double step);

}  // namespace rsc::ad
