#include "rsc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace rsc::ad {

namespace {

Tape& same_tape(Var a, Var b, std::string_view op) {
    if (&a.tape() != &b.tape()) {
        throw std::invalid_argument(std::string(op) + ": operands recorded on different tapes");
    }
    return a.tape();
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void accumulate(Tensor& into, const Tensor& g) {
    auto dst = into.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::MatMul: return "matmul";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::AddBias: return "add_bias";
        case OpKind::Relu: return "relu";
        case OpKind::AvgPool2d: return "avg_pool2d";
        case OpKind::Mean: return "mean";
        case OpKind::Reshape: return "reshape";
        case OpKind::Mul: return "mul";
        case OpKind::Sum: return "sum";
        case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    }
    return "unknown";
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardRule backward) {
    for (auto in : inputs) {
        if (in >= nodes_.size()) throw std::logic_error("tape: input recorded after its consumer");
    }
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), std::move(backward)});
    return Var(this, nodes_.size() - 1);
}

std::vector<Tensor> Tape::grad(Var output, std::span<const Var> wrt) const {
    if (&output.tape() != this) throw std::invalid_argument("grad: output recorded on another tape");
    if (output.value().size() != 1) {
        throw ShapeError("grad: output must hold one element, got shape " + to_string(output.shape()));
    }
    const std::size_t out = output.id();

    // Forward reachability from the requested variables; backward rules only
    // fill gradients that can reach one of them.
    std::vector<char> needed(out + 1, 0);
    for (const auto& v : wrt) {
        if (&v.tape() != this) throw std::invalid_argument("grad: wrt variable recorded on another tape");
        if (v.id() <= out) needed[v.id()] = 1;
    }
    for (std::size_t i = 0; i <= out; ++i) {
        if (needed[i]) continue;
        for (auto in : nodes_[i].inputs) {
            if (needed[in]) {
                needed[i] = 1;
                break;
            }
        }
    }

    std::vector<Tensor> grads(out + 1);
    grads[out] = Tensor(nodes_[out].value.shape(), 1.0);
    last_visits_ = 0;
    std::vector<const Tensor*> in_values;
    std::vector<Tensor*> in_grads;
    for (std::size_t i = out + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (node.kind == OpKind::Leaf || grads[i].size() == 0 || !needed[i]) continue;
        in_values.clear();
        in_grads.clear();
        bool any = false;
        for (auto in : node.inputs) {
            in_values.push_back(&nodes_[in].value);
            if (needed[in]) {
                if (grads[in].size() == 0) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
                in_grads.push_back(&grads[in]);
                any = true;
            } else {
                in_grads.push_back(nullptr);
            }
        }
        if (!any) continue;
        node.backward(grads[i], node.value, in_values, in_grads);
        ++last_visits_;
    }

    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const auto& v : wrt) {
        if (v.id() <= out && grads[v.id()].size() != 0) {
            result.push_back(grads[v.id()]);
        } else {
            result.emplace_back(v.value().shape(), 0.0);
        }
    }
    return result;
}

Var matmul(Var a, Var b) {
    Tape& tape = same_tape(a, b, "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_mismatch("matmul", sa, sb);
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Tensor out({m, n}, 0.0);
    auto A = a.value().data();
    auto B = b.value().data();
    auto C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
        }
    }
    return tape.record(OpKind::MatMul, {a.id(), b.id()}, std::move(out),
                       [m, k, n](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                                 std::span<Tensor*> gin) {
                           auto G = g.data();
                           if (gin[0]) {
                               auto Bv = in[1]->data();
                               auto GA = gin[0]->data();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double s = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * Bv[p * n + j];
                                       GA[i * k + p] += s;
                                   }
                           }
                           if (gin[1]) {
                               auto Av = in[0]->data();
                               auto GB = gin[1]->data();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       const double av = Av[i * k + p];
                                       for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
                                   }
                           }
                       });
}

namespace {

struct ConvGeometry {
    std::size_t batch, height, width, cin, cout, ksize;
};

/// Calls fn(out_offset, in_offset, weight_offset) for every (output pixel,
/// kernel tap) pair whose input pixel lies inside the canvas, in a fixed order.
template <class Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
    const auto pad = static_cast<std::ptrdiff_t>(g.ksize / 2);
    const auto h = static_cast<std::ptrdiff_t>(g.height);
    const auto w = static_cast<std::ptrdiff_t>(g.width);
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::ptrdiff_t oy = 0; oy < h; ++oy)
            for (std::ptrdiff_t ox = 0; ox < w; ++ox) {
                const std::size_t out_off = ((b * g.height + std::size_t(oy)) * g.width + std::size_t(ox)) * g.cout;
                for (std::ptrdiff_t ky = 0; ky < std::ptrdiff_t(g.ksize); ++ky) {
                    const std::ptrdiff_t iy = oy + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::ptrdiff_t kx = 0; kx < std::ptrdiff_t(g.ksize); ++kx) {
                        const std::ptrdiff_t ix = ox + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        const std::size_t in_off = ((b * g.height + std::size_t(iy)) * g.width + std::size_t(ix)) * g.cin;
                        const std::size_t w_off = std::size_t(ky * std::ptrdiff_t(g.ksize) + kx) * g.cin * g.cout;
                        fn(out_off, in_off, w_off);
                    }
                }
            }
}

// CI / CO are compile-time channel counts for the common layer shapes, or 0
// for sizes only known at run time. Every variant accumulates in the same
// order, so results do not depend on which one runs.

template <std::size_t CI, std::size_t CO>
void conv_forward(const ConvGeometry& g, const double* X, const double* W, double* Y) {
    const std::size_t cin = CI ? CI : g.cin;
    const std::size_t cout = CO ? CO : g.cout;
    if constexpr (CO != 0) {
        const std::size_t pixels = g.batch * g.height * g.width;
        const auto pad = static_cast<std::ptrdiff_t>(g.ksize / 2);
        for (std::size_t p = 0; p < pixels; ++p) {
            const std::size_t b = p / (g.height * g.width);
            const auto oy = static_cast<std::ptrdiff_t>((p / g.width) % g.height);
            const auto ox = static_cast<std::ptrdiff_t>(p % g.width);
            double acc[CO] = {};
            for (std::ptrdiff_t ky = 0; ky < std::ptrdiff_t(g.ksize); ++ky) {
                const std::ptrdiff_t iy = oy + ky - pad;
                if (iy < 0 || iy >= std::ptrdiff_t(g.height)) continue;
                for (std::ptrdiff_t kx = 0; kx < std::ptrdiff_t(g.ksize); ++kx) {
                    const std::ptrdiff_t ix = ox + kx - pad;
                    if (ix < 0 || ix >= std::ptrdiff_t(g.width)) continue;
                    const double* xin = &X[((b * g.height + std::size_t(iy)) * g.width + std::size_t(ix)) * cin];
                    const double* wt = &W[std::size_t(ky * std::ptrdiff_t(g.ksize) + kx) * cin * CO];
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double xv = xin[ci];
                        if (xv == 0.0) continue;
                        const double* wr = &wt[ci * CO];
                        for (std::size_t co = 0; co < CO; ++co) acc[co] += xv * wr[co];
                    }
                }
            }
            double* y = &Y[p * CO];
            for (std::size_t co = 0; co < CO; ++co) y[co] = acc[co];
        }
    } else {
        for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t w) {
            double* y = &Y[o];
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double xv = X[i + ci];
                if (xv == 0.0) continue;
                const double* wr = &W[w + ci * cout];
                for (std::size_t co = 0; co < cout; ++co) y[co] += xv * wr[co];
            }
        });
    }
}

template <std::size_t CI, std::size_t CO>
void conv_backward_kernel(const ConvGeometry& g, const double* X, const double* G, double* GW) {
    const std::size_t cin = CI ? CI : g.cin;
    const std::size_t cout = CO ? CO : g.cout;
    for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t w) {
        const double* gy = &G[o];
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = X[i + ci];
            if (xv == 0.0) continue;
            double* gw = &GW[w + ci * cout];
            for (std::size_t co = 0; co < cout; ++co) gw[co] += xv * gy[co];
        }
    });
}

/// `wt` is the kernel transposed to [k, k, Cout, Cin]; each GX entry
/// accumulates over output channels in ascending order.
template <std::size_t CI, std::size_t CO>
void conv_backward_input(const ConvGeometry& g, const double* wt, const double* G, double* GX) {
    const std::size_t cin = CI ? CI : g.cin;
    const std::size_t cout = CO ? CO : g.cout;
    for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t w) {
        const double* gy = &G[o];
        double* gx = &GX[i];
        const double* wtap = &wt[w];
        for (std::size_t co = 0; co < cout; ++co) {
            const double gv = gy[co];
            if (gv == 0.0) continue;
            const double* wr = &wtap[co * cin];
            for (std::size_t ci = 0; ci < cin; ++ci) gx[ci] += wr[ci] * gv;
        }
    });
}

template <std::size_t N>
using Size = std::integral_constant<std::size_t, N>;

template <class Fn>
void dispatch_channels(std::size_t cin, std::size_t cout, Fn&& fn) {
    if (cin == 3 && cout == 8) fn(Size<3>{}, Size<8>{});
    else if (cin == 8 && cout == 16) fn(Size<8>{}, Size<16>{});
    else if (cin == 16 && cout == 16) fn(Size<16>{}, Size<16>{});
    else fn(Size<0>{}, Size<0>{});
}

}  // namespace

Var conv2d(Var input, Var kernel) {
    Tape& tape = same_tape(input, kernel, "conv2d");
    const Shape& sx = input.shape();
    const Shape& sw = kernel.shape();
    if (sx.size() != 4 || sw.size() != 4 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != sx[3]) {
        shape_mismatch("conv2d", sx, sw);
    }
    const ConvGeometry geom{sx[0], sx[1], sx[2], sx[3], sw[3], sw[0]};

    Tensor out({geom.batch, geom.height, geom.width, geom.cout}, 0.0);
    dispatch_channels(geom.cin, geom.cout, [&](auto ci, auto co) {
        conv_forward<ci(), co()>(geom, input.value().data().data(), kernel.value().data().data(), out.data().data());
    });
    return tape.record(
        OpKind::Conv2d, {input.id(), kernel.id()}, std::move(out),
        [geom](const Tensor& g, const Tensor&, std::span<const Tensor* const> in, std::span<Tensor*> gin) {
            const double* G = g.data().data();
            auto W = in[1]->data();
            dispatch_channels(geom.cin, geom.cout, [&](auto ci, auto co) {
                if (gin[1]) conv_backward_kernel<ci(), co()>(geom, in[0]->data().data(), G, gin[1]->data().data());
                if (gin[0]) {
                    std::vector<double> wt(W.size());
                    const std::size_t taps = geom.ksize * geom.ksize;
                    for (std::size_t t = 0; t < taps; ++t)
                        for (std::size_t c_in = 0; c_in < geom.cin; ++c_in)
                            for (std::size_t c_out = 0; c_out < geom.cout; ++c_out)
                                wt[(t * geom.cout + c_out) * geom.cin + c_in] =
                                    W[(t * geom.cin + c_in) * geom.cout + c_out];
                    conv_backward_input<ci(), co()>(geom, wt.data(), G, gin[0]->data().data());
                }
            });
        });
}

Var add_bias(Var x, Var bias) {
    Tape& tape = same_tape(x, bias, "add_bias");
    const Shape& sx = x.shape();
    const Shape& sb = bias.shape();
    if (sx.empty() || sb.size() != 1 || sb[0] != sx.back()) shape_mismatch("add_bias", sx, sb);
    const std::size_t c = sb[0];
    Tensor out = x.value();
    auto Y = out.data();
    auto Bv = bias.value().data();
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] += Bv[i % c];
    return tape.record(OpKind::AddBias, {x.id(), bias.id()}, std::move(out),
                       [c](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                           std::span<Tensor*> gin) {
                           if (gin[0]) accumulate(*gin[0], g);
                           if (gin[1]) {
                               auto G = g.data();
                               auto GB = gin[1]->data();
                               for (std::size_t i = 0; i < G.size(); ++i) GB[i % c] += G[i];
                           }
                       });
}

Var relu(Var x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    return x.tape().record(OpKind::Relu, {x.id()}, std::move(out),
                           [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                              std::span<Tensor*> gin) {
                               auto X = in[0]->data();
                               auto G = g.data();
                               auto GX = gin[0]->data();
                               for (std::size_t i = 0; i < G.size(); ++i)
                                   if (X[i] > 0.0) GX[i] += G[i];
                           });
}

Var avg_pool2d(Var x, std::size_t window) {
    const Shape& sx = x.shape();
    if (sx.size() != 4 || window == 0 || sx[1] % window != 0 || sx[2] % window != 0) {
        throw ShapeError("avg_pool2d: window " + std::to_string(window) + " does not tile shape " + to_string(sx));
    }
    const std::size_t batch = sx[0], height = sx[1], width = sx[2], ch = sx[3];
    const std::size_t oh = height / window, ow = width / window;
    const double scale = 1.0 / static_cast<double>(window * window);
    Tensor out({batch, oh, ow, ch}, 0.0);
    auto X = x.value().data();
    auto Y = out.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double* y = &Y[((b * oh + oy) * ow + ox) * ch];
                for (std::size_t dy = 0; dy < window; ++dy)
                    for (std::size_t dx = 0; dx < window; ++dx) {
                        const double* xi = &X[((b * height + oy * window + dy) * width + ox * window + dx) * ch];
                        for (std::size_t c = 0; c < ch; ++c) y[c] += xi[c];
                    }
                for (std::size_t c = 0; c < ch; ++c) y[c] *= scale;
            }
    return x.tape().record(
        OpKind::AvgPool2d, {x.id()}, std::move(out),
        [=](const Tensor& g, const Tensor&, std::span<const Tensor* const>, std::span<Tensor*> gin) {
            auto G = g.data();
            auto GX = gin[0]->data();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const double* gy = &G[((b * oh + oy) * ow + ox) * ch];
                        for (std::size_t dy = 0; dy < window; ++dy)
                            for (std::size_t dx = 0; dx < window; ++dx) {
                                double* gx = &GX[((b * height + oy * window + dy) * width + ox * window + dx) * ch];
                                for (std::size_t c = 0; c < ch; ++c) gx[c] += gy[c] * scale;
                            }
                    }
        });
}

Var mean(Var x, std::vector<std::size_t> axes) {
    const Shape& sx = x.shape();
    std::vector<char> reduced(sx.size(), 0);
    for (auto a : axes) {
        if (a >= sx.size() || reduced[a]) {
            throw ShapeError("mean: invalid axis " + std::to_string(a) + " for shape " + to_string(sx));
        }
        reduced[a] = 1;
    }
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t d = 0; d < sx.size(); ++d) {
        if (reduced[d]) count *= sx[d];
        else out_shape.push_back(sx[d]);
    }
    if (out_shape.empty()) out_shape.push_back(1);

    // Maps each input flat index to its output flat index (row-major).
    std::vector<std::size_t> target(x.value().size());
    {
        std::vector<std::size_t> idx(sx.size(), 0);
        for (std::size_t flat = 0; flat < target.size(); ++flat) {
            std::size_t o = 0;
            for (std::size_t d = 0; d < sx.size(); ++d)
                if (!reduced[d]) o = o * sx[d] + idx[d];
            target[flat] = o;
            for (std::size_t d = sx.size(); d-- > 0;) {
                if (++idx[d] < sx[d]) break;
                idx[d] = 0;
            }
        }
    }
    const double scale = 1.0 / static_cast<double>(count);
    Tensor out(out_shape, 0.0);
    auto X = x.value().data();
    auto Y = out.data();
    for (std::size_t i = 0; i < X.size(); ++i) Y[target[i]] += X[i];
    for (auto& v : Y) v *= scale;
    return x.tape().record(OpKind::Mean, {x.id()}, std::move(out),
                           [target = std::move(target), scale](const Tensor& g, const Tensor&,
                                                               std::span<const Tensor* const>,
                                                               std::span<Tensor*> gin) {
                               auto G = g.data();
                               auto GX = gin[0]->data();
                               for (std::size_t i = 0; i < GX.size(); ++i) GX[i] += G[target[i]] * scale;
                           });
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape().record(OpKind::Reshape, {x.id()}, std::move(out),
                           [](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                              std::span<Tensor*> gin) { accumulate(*gin[0], g); });
}

Var flatten(Var x) {
    const Shape& sx = x.shape();
    if (sx.empty()) throw ShapeError("flatten: scalar-shaped input");
    const std::size_t rows = sx[0];
    return reshape(x, {rows, rows ? x.value().size() / rows : 0});
}

Var mul(Var a, Var b) {
    Tape& tape = same_tape(a, b, "mul");
    if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
    Tensor out = a.value();
    auto Y = out.data();
    auto Bv = b.value().data();
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= Bv[i];
    return tape.record(OpKind::Mul, {a.id(), b.id()}, std::move(out),
                       [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in,
                          std::span<Tensor*> gin) {
                           auto G = g.data();
                           if (gin[0]) {
                               auto Bv = in[1]->data();
                               auto GA = gin[0]->data();
                               for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * Bv[i];
                           }
                           if (gin[1]) {
                               auto Av = in[0]->data();
                               auto GB = gin[1]->data();
                               for (std::size_t i = 0; i < G.size(); ++i) GB[i] += G[i] * Av[i];
                           }
                       });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.tape().record(OpKind::Sum, {x.id()}, Tensor::scalar(s),
                           [](const Tensor& g, const Tensor&, std::span<const Tensor* const>,
                              std::span<Tensor*> gin) {
                               const double gv = g[0];
                               for (auto& v : gin[0]->data()) v += gv;
                           });
}

Var softmax_cross_entropy(Var logits, Var labels) {
    Tape& tape = same_tape(logits, labels, "softmax_cross_entropy");
    const Shape& sl = logits.shape();
    if (sl.size() != 2 || labels.shape() != sl || sl[0] == 0) {
        shape_mismatch("softmax_cross_entropy", sl, labels.shape());
    }
    const std::size_t batch = sl[0], classes = sl[1];
    auto L = logits.value().data();
    auto Yl = labels.value().data();
    Tensor probs(sl, 0.0);
    auto P = probs.data();
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = &L[b * classes];
        const double* y = &Yl[b * classes];
        std::size_t ones = 0, target = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (y[c] == 1.0) {
                ++ones;
                target = c;
            } else if (y[c] != 0.0) {
                ones = 2;
                break;
            }
        }
        if (ones != 1) {
            throw std::invalid_argument("softmax_cross_entropy: label row " + std::to_string(b) + " is not one-hot");
        }
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            P[b * classes + c] = std::exp(row[c] - mx);
            z += P[b * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) P[b * classes + c] /= z;
        total += (mx + std::log(z)) - row[target];
    }
    const double inv_batch = 1.0 / static_cast<double>(batch);
    return tape.record(OpKind::SoftmaxCrossEntropy, {logits.id(), labels.id()}, Tensor::scalar(total * inv_batch),
                       [probs = std::move(probs), inv_batch](const Tensor& g, const Tensor&,
                                                            std::span<const Tensor* const> in,
                                                            std::span<Tensor*> gin) {
                           if (!gin[0]) return;
                           const double scale = g[0] * inv_batch;
                           auto P = probs.data();
                           auto Y = in[1]->data();
                           auto GL = gin[0]->data();
                           for (std::size_t i = 0; i < GL.size(); ++i) GL[i] += (P[i] - Y[i]) * scale;
                       });
}

Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& point, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_oracle: step must be positive");
    Tensor probe = point;
    Tensor out(point.shape(), 0.0);
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double x0 = point[i];
        probe[i] = x0 + step;
        const double up = f(probe);
        probe[i] = x0 - step;
        const double down = f(probe);
        probe[i] = x0;
        out[i] = (up - down) / (2.0 * step);
    }
    return out;
}

}  // namespace rsc::ad
