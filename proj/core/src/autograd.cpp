#include "fastgc/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace fastgc {

const Tensor& GradMap::at(NodeId id) const {
    auto it = grads_.find(id.index);
    if (it == grads_.end()) {
        throw ContractError("GradMap: no gradient recorded for node " + std::to_string(id.index));
    }
    return it->second;
}

const Tape::Node& Tape::node(NodeId id) const {
    if (id.index >= nodes_.size()) {
        throw ContractError("tape: unknown node id " + std::to_string(id.index));
    }
    return nodes_[id.index];
}

Tape::Node& Tape::node_mut(NodeId id) {
    if (id.index >= nodes_.size()) {
        throw ContractError("tape: unknown node id " + std::to_string(id.index));
    }
    return nodes_[id.index];
}

NodeId Tape::push_leaf(Tensor value, bool is_param) {
    Node n;
    n.op = OpKind::Leaf;
    n.value = std::move(value);
    n.is_param = is_param;
    return push(std::move(n));
}

NodeId Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::retain(NodeId id) { node_mut(id).retained = true; }

NodeId Tape::add(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Add;
    n.inputs = {a, b};
    n.value = fastgc::add(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::add_rowwise(NodeId x, NodeId bias) {
    Node n;
    n.op = OpKind::AddRowwise;
    n.inputs = {x, bias};
    n.value = fastgc::add_rowwise(value(x), value(bias));
    return push(std::move(n));
}

NodeId Tape::add_channel_bias(NodeId x, NodeId bias) {
    Node n;
    n.op = OpKind::AddChannelBias;
    n.inputs = {x, bias};
    n.value = fastgc::add_channel_bias(value(x), value(bias));
    return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Mul;
    n.inputs = {a, b};
    n.value = fastgc::mul(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::mul_rowwise(NodeId x, NodeId scale) {
    Node n;
    n.op = OpKind::MulRowwise;
    n.inputs = {x, scale};
    n.value = fastgc::mul_rowwise(value(x), value(scale));
    return push(std::move(n));
}

NodeId Tape::scalar_mul(NodeId a, double s) {
    Node n;
    n.op = OpKind::ScalarMul;
    n.inputs = {a};
    n.scalar_attr = s;
    n.value = fastgc::scalar_mul(value(a), s);
    return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Matmul;
    n.inputs = {a, b};
    n.value = fastgc::matmul(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::bmm(NodeId a, NodeId b) {
    Node n;
    n.op = OpKind::Bmm;
    n.inputs = {a, b};
    n.value = fastgc::bmm(value(a), value(b));
    return push(std::move(n));
}

NodeId Tape::transpose2d(NodeId a) {
    Node n;
    n.op = OpKind::Transpose2d;
    n.inputs = {a};
    n.value = fastgc::transpose2d(value(a));
    return push(std::move(n));
}

NodeId Tape::transpose_last2(NodeId a) {
    Node n;
    n.op = OpKind::TransposeLast2;
    n.inputs = {a};
    n.value = fastgc::transpose_last2(value(a));
    return push(std::move(n));
}

NodeId Tape::transpose12(NodeId a) {
    Node n;
    n.op = OpKind::Transpose12;
    n.inputs = {a};
    n.value = fastgc::transpose12(value(a));
    return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, Shape shape) {
    Node n;
    n.op = OpKind::Reshape;
    n.inputs = {a};
    n.value = value(a).reshaped(std::move(shape));
    return push(std::move(n));
}

namespace {

template <typename F>
Tensor map_elementwise(const Tensor& x, F f) {
    std::vector<double> out(x.size());
    const double* p = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(p[i]);
    return Tensor(x.shape(), std::move(out));
}

}  // namespace

NodeId Tape::tanh(NodeId a) {
    Node n;
    n.op = OpKind::Tanh;
    n.inputs = {a};
    n.value = map_elementwise(value(a), [](double v) { return std::tanh(v); });
    return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
    Node n;
    n.op = OpKind::Sigmoid;
    n.inputs = {a};
    // |v| clamped to 45: beyond that the result is identical at double
    // precision, and the clamp keeps exp() off its subnormal slow path.
    n.value = map_elementwise(value(a), [](double v) {
        const double c = std::clamp(v, -45.0, 45.0);
        return 1.0 / (1.0 + std::exp(-c));
    });
    return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
    Node n;
    n.op = OpKind::Relu;
    n.inputs = {a};
    n.value = map_elementwise(value(a), [](double v) { return v > 0.0 ? v : 0.0; });
    return push(std::move(n));
}

NodeId Tape::log(NodeId a) {
    Node n;
    n.op = OpKind::Log;
    n.inputs = {a};
    n.value = map_elementwise(value(a), [](double v) { return std::log(v); });
    return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId a) {
    const Tensor& x = value(a);
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    const double* px = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = std::exp(std::max(row[j] - mx, -45.0));
            denom += out[r * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= denom;
    }
    Node n;
    n.op = OpKind::SoftmaxRows;
    n.inputs = {a};
    n.value = Tensor(x.shape(), std::move(out));
    return push(std::move(n));
}

NodeId Tape::sum_all(NodeId a) {
    Node n;
    n.op = OpKind::SumAll;
    n.inputs = {a};
    n.value = Tensor::scalar(fastgc::sum_all(value(a)));
    return push(std::move(n));
}

NodeId Tape::mean_all(NodeId a) {
    const double inv = 1.0 / static_cast<double>(value(a).size());
    return scalar_mul(sum_all(a), inv);
}

NodeId Tape::mean_dim1(NodeId a) {
    const Tensor& x = value(a);
    if (x.rank() != 3) throw ShapeError("mean_dim1: expected rank 3, got " + shape_str(x.shape()));
    const std::size_t t = x.extent(0), s = x.extent(1), d = x.extent(2);
    std::vector<double> out(t * d, 0.0);
    const double* px = x.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < s; ++j)
            for (std::size_t k = 0; k < d; ++k) out[i * d + k] += px[(i * s + j) * d + k];
    const double inv = 1.0 / static_cast<double>(s);
    for (double& v : out) v *= inv;
    Node n;
    n.op = OpKind::MeanDim1;
    n.inputs = {a};
    n.value = Tensor({t, d}, std::move(out));
    return push(std::move(n));
}

NodeId Tape::pick_rows(NodeId logits, std::vector<int> targets) {
    const Tensor& x = value(logits);
    if (x.rank() != 2 || x.extent(0) != targets.size()) {
        throw ShapeError("pick_rows: " + shape_str(x.shape()) + " does not match " +
                         std::to_string(targets.size()) + " targets");
    }
    const std::size_t t = x.extent(0), k = x.extent(1);
    std::vector<double> out(t);
    for (std::size_t i = 0; i < t; ++i) {
        const int c = targets[i];
        if (c < 0 || static_cast<std::size_t>(c) >= k) {
            throw ContractError("pick_rows: target " + std::to_string(c) + " outside [0, " +
                                std::to_string(k) + ")");
        }
        out[i] = x.at2(i, static_cast<std::size_t>(c));
    }
    Node n;
    n.op = OpKind::PickRows;
    n.inputs = {logits};
    n.targets = std::move(targets);
    n.value = Tensor({t}, std::move(out));
    return push(std::move(n));
}

NodeId Tape::index_scalar(NodeId v, std::size_t i) {
    const Tensor& x = value(v);
    if (i >= x.size()) throw ContractError("index_scalar: index out of range");
    Node n;
    n.op = OpKind::IndexScalar;
    n.inputs = {v};
    n.attrs = {i};
    n.value = Tensor::scalar(x[i]);
    return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId a, std::size_t start, std::size_t len) {
    const Tensor& x = value(a);
    if (x.rank() != 2 || start + len > x.extent(1)) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " + shape_str(x.shape()));
    }
    const std::size_t t = x.extent(0), m = x.extent(1);
    std::vector<double> out(t * len);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x.at2(i, start + j);
    Node n;
    n.op = OpKind::SliceCols;
    n.inputs = {a};
    n.attrs = {start, len, m};
    n.value = Tensor({t, len}, std::move(out));
    return push(std::move(n));
}

NodeId Tape::slice_dim1(NodeId a, std::size_t t) {
    const Tensor& x = value(a);
    if (x.rank() != 3 || t >= x.extent(1)) {
        throw ShapeError("slice_dim1: index " + std::to_string(t) + " outside " +
                         shape_str(x.shape()));
    }
    const std::size_t b = x.extent(0), s = x.extent(1), d = x.extent(2);
    std::vector<double> out(b * d);
    const double* px = x.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < d; ++k) out[i * d + k] = px[(i * s + t) * d + k];
    Node n;
    n.op = OpKind::SliceDim1;
    n.inputs = {a};
    n.attrs = {t};
    n.value = Tensor({b, d}, std::move(out));
    return push(std::move(n));
}

NodeId Tape::weighted_sum(NodeId v, Tensor weights) {
    const Tensor& x = value(v);
    if (x.size() != weights.size()) {
        throw ShapeError("weighted_sum: " + shape_str(x.shape()) + " vs weights " +
                         shape_str(weights.shape()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * weights[i];
    Node n;
    n.op = OpKind::WeightedSumConst;
    n.inputs = {v};
    n.aux = std::move(weights);
    n.value = Tensor::scalar(acc);
    return push(std::move(n));
}

NodeId Tape::im2col(NodeId x, std::size_t kh, std::size_t kw, std::size_t stride,
                    std::size_t pad) {
    Node n;
    n.op = OpKind::Im2Col;
    n.inputs = {x};
    n.attrs = {kh, kw, stride, pad};
    n.value = fastgc::im2col(value(x), kh, kw, stride, pad);
    return push(std::move(n));
}

NodeId Tape::im2col3d(NodeId x, std::size_t kd, std::size_t kh, std::size_t kw,
                      std::size_t stride) {
    Node n;
    n.op = OpKind::Im2Col3d;
    n.inputs = {x};
    n.attrs = {kd, kh, kw, stride};
    n.value = fastgc::im2col3d(value(x), kd, kh, kw, stride);
    return push(std::move(n));
}

NodeId Tape::maxpool2d(NodeId x, std::size_t k, std::size_t stride) {
    const Tensor& in = value(x);
    if (in.rank() != 4) throw ShapeError("maxpool2d: expected rank 4, got " + shape_str(in.shape()));
    const std::size_t t = in.extent(0), c = in.extent(1), h = in.extent(2), w = in.extent(3);
    if (h < k || w < k) throw ShapeError("maxpool2d: window larger than " + shape_str(in.shape()));
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    std::vector<double> out(t * c * oh * ow);
    std::vector<double> argmax(out.size());  // flat index within each [h, w] plane
    const double* p = in.data();
    for (std::size_t i = 0; i < t * c; ++i) {
        const double* plane = p + i * h * w;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t z = 0; z < ow; ++z) {
                std::size_t best = (y * stride) * w + z * stride;
                double bv = plane[best];
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t idx = (y * stride + dy) * w + (z * stride + dx);
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                out[i * oh * ow + y * ow + z] = bv;
                argmax[i * oh * ow + y * ow + z] = static_cast<double>(best);
            }
    }
    Node n;
    n.op = OpKind::MaxPool2d;
    n.inputs = {x};
    n.attrs = {k, stride};
    n.aux = Tensor({t, c, oh, ow}, std::move(argmax));
    n.value = Tensor({t, c, oh, ow}, std::move(out));
    return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps, bool sqrt_normalizer) {
    const Tensor& in = value(x);
    const std::size_t kdim = in.shape().back();
    if (value(gamma).size() != kdim || value(beta).size() != kdim) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(value(gamma).shape()) +
                         " do not match feature extent of " + shape_str(in.shape()));
    }
    const std::size_t rows = in.size() / kdim;
    std::vector<double> hbar(in.size());
    std::vector<double> inv_s(rows);
    std::vector<double> out(in.size());
    const double* px = in.data();
    const double* pg = value(gamma).data();
    const double* pb = value(beta).data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * kdim;
        double mu = 0.0;
        for (std::size_t j = 0; j < kdim; ++j) mu += row[j];
        mu /= static_cast<double>(kdim);
        double var = 0.0;
        for (std::size_t j = 0; j < kdim; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(kdim);
        const double s = sqrt_normalizer ? std::sqrt(var + eps) : (var + eps);
        inv_s[r] = 1.0 / s;
        for (std::size_t j = 0; j < kdim; ++j) {
            hbar[r * kdim + j] = (row[j] - mu) * inv_s[r];
            out[r * kdim + j] = pg[j] * hbar[r * kdim + j] + pb[j];
        }
    }
    Node n;
    n.op = OpKind::LayerNorm;
    n.inputs = {x, gamma, beta};
    n.attrs = {sqrt_normalizer ? std::size_t{1} : std::size_t{0}};
    n.scalar_attr = eps;
    n.aux = Tensor(in.shape(), std::move(hbar));
    n.aux2 = Tensor({rows}, std::move(inv_s));
    n.value = Tensor(in.shape(), std::move(out));
    return push(std::move(n));
}

const Tensor& Tape::layer_norm_hbar(NodeId id) const {
    const Node& n = node(id);
    if (n.op != OpKind::LayerNorm) throw ContractError("layer_norm_hbar: node is not a LayerNorm");
    return n.aux;
}

// ---- backward ---------------------------------------------------------------

namespace {

void accumulate(std::vector<Tensor>& grads, NodeId id, Tensor delta) {
    Tensor& slot = grads[id.index];
    if (slot.empty()) {
        slot = std::move(delta);
    } else {
        slot = fastgc::add(slot, delta);
    }
}

}  // namespace

GradMap backward(const Tape& tape, NodeId loss) {
    const Tape::Node& loss_node = tape.node(loss);
    if (loss_node.value.size() != 1) {
        throw ContractError("backward: loss node must be scalar, got shape " +
                            shape_str(loss_node.value.shape()));
    }

    std::vector<Tensor> grads(tape.size());
    grads[loss.index] = Tensor::scalar(1.0);

    for (std::size_t raw = loss.index + 1; raw-- > 0;) {
        const Tape::Node& n = tape.nodes_[raw];
        const Tensor& g = grads[raw];
        if (g.empty() || n.op == OpKind::Leaf) continue;
        switch (n.op) {
            case OpKind::Add:
                accumulate(grads, n.inputs[0], g);
                accumulate(grads, n.inputs[1], g);
                break;
            case OpKind::AddRowwise: {
                accumulate(grads, n.inputs[0], g);
                const std::size_t m = tape.value(n.inputs[1]).size();
                accumulate(grads, n.inputs[1],
                           sum_rows(g.reshaped({g.size() / m, m})));
                break;
            }
            case OpKind::AddChannelBias: {
                accumulate(grads, n.inputs[0], g);
                const std::size_t t = g.extent(0), c = g.extent(1), s = g.extent(2);
                std::vector<double> db(c, 0.0);
                const double* p = g.data();
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t j = 0; j < s; ++j) db[ch] += p[(i * c + ch) * s + j];
                accumulate(grads, n.inputs[1], Tensor({c}, std::move(db)));
                break;
            }
            case OpKind::Mul:
                accumulate(grads, n.inputs[0], fastgc::mul(g, tape.value(n.inputs[1])));
                accumulate(grads, n.inputs[1], fastgc::mul(g, tape.value(n.inputs[0])));
                break;
            case OpKind::MulRowwise: {
                const Tensor& x = tape.value(n.inputs[0]);
                const Tensor& scale = tape.value(n.inputs[1]);
                accumulate(grads, n.inputs[0], fastgc::mul_rowwise(g, scale));
                const std::size_t m = scale.size();
                Tensor gx = fastgc::mul(g, x);
                accumulate(grads, n.inputs[1], sum_rows(gx.reshaped({gx.size() / m, m})));
                break;
            }
            case OpKind::ScalarMul:
                accumulate(grads, n.inputs[0], fastgc::scalar_mul(g, n.scalar_attr));
                break;
            case OpKind::Matmul: {
                const Tensor& a = tape.value(n.inputs[0]);
                const Tensor& b = tape.value(n.inputs[1]);
                accumulate(grads, n.inputs[0], fastgc::matmul(g, transpose2d(b)));
                accumulate(grads, n.inputs[1], fastgc::matmul(transpose2d(a), g));
                break;
            }
            case OpKind::Bmm: {
                const Tensor& a = tape.value(n.inputs[0]);
                const Tensor& b = tape.value(n.inputs[1]);
                accumulate(grads, n.inputs[0], fastgc::bmm(g, transpose_last2(b)));
                accumulate(grads, n.inputs[1], fastgc::bmm(transpose_last2(a), g));
                break;
            }
            case OpKind::Transpose2d:
                accumulate(grads, n.inputs[0], transpose2d(g));
                break;
            case OpKind::TransposeLast2:
                accumulate(grads, n.inputs[0], transpose_last2(g));
                break;
            case OpKind::Transpose12:
                accumulate(grads, n.inputs[0], transpose12(g));
                break;
            case OpKind::Reshape:
                accumulate(grads, n.inputs[0], g.reshaped(tape.value(n.inputs[0]).shape()));
                break;
            case OpKind::Tanh: {
                const Tensor& y = n.value;
                std::vector<double> out(y.size());
                for (std::size_t i = 0; i < y.size(); ++i) out[i] = g[i] * (1.0 - y[i] * y[i]);
                accumulate(grads, n.inputs[0], Tensor(y.shape(), std::move(out)));
                break;
            }
            case OpKind::Sigmoid: {
                const Tensor& y = n.value;
                std::vector<double> out(y.size());
                for (std::size_t i = 0; i < y.size(); ++i) out[i] = g[i] * y[i] * (1.0 - y[i]);
                accumulate(grads, n.inputs[0], Tensor(y.shape(), std::move(out)));
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = tape.value(n.inputs[0]);
                std::vector<double> out(x.size());
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::Log: {
                const Tensor& x = tape.value(n.inputs[0]);
                std::vector<double> out(x.size());
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[i] / x[i];
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::SoftmaxRows: {
                const Tensor& y = n.value;
                const std::size_t d = y.shape().back();
                const std::size_t rows = y.size() / d;
                std::vector<double> out(y.size());
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                    for (std::size_t j = 0; j < d; ++j)
                        out[r * d + j] = y[r * d + j] * (g[r * d + j] - dot);
                }
                accumulate(grads, n.inputs[0], Tensor(y.shape(), std::move(out)));
                break;
            }
            case OpKind::SumAll: {
                const Tensor& x = tape.value(n.inputs[0]);
                accumulate(grads, n.inputs[0], Tensor::full(x.shape(), g[0]));
                break;
            }
            case OpKind::MeanDim1: {
                const Tensor& x = tape.value(n.inputs[0]);
                const std::size_t t = x.extent(0), s = x.extent(1), d = x.extent(2);
                const double inv = 1.0 / static_cast<double>(s);
                std::vector<double> out(x.size());
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < s; ++j)
                        for (std::size_t k = 0; k < d; ++k)
                            out[(i * s + j) * d + k] = g[i * d + k] * inv;
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::PickRows: {
                const Tensor& x = tape.value(n.inputs[0]);
                const std::size_t t = x.extent(0), k = x.extent(1);
                std::vector<double> out(t * k, 0.0);
                for (std::size_t i = 0; i < t; ++i)
                    out[i * k + static_cast<std::size_t>(n.targets[i])] = g[i];
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::IndexScalar: {
                const Tensor& x = tape.value(n.inputs[0]);
                std::vector<double> out(x.size(), 0.0);
                out[n.attrs[0]] = g[0];
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::SliceCols: {
                const Tensor& x = tape.value(n.inputs[0]);
                const std::size_t t = x.extent(0), m = n.attrs[2];
                const std::size_t start = n.attrs[0], len = n.attrs[1];
                std::vector<double> out(x.size(), 0.0);
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < len; ++j)
                        out[i * m + start + j] = g[i * len + j];
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::SliceDim1: {
                const Tensor& x = tape.value(n.inputs[0]);
                const std::size_t b = x.extent(0), s = x.extent(1), d = x.extent(2);
                const std::size_t t = n.attrs[0];
                std::vector<double> out(x.size(), 0.0);
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t k = 0; k < d; ++k) out[(i * s + t) * d + k] = g[i * d + k];
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::WeightedSumConst:
                accumulate(grads, n.inputs[0], fastgc::scalar_mul(n.aux, g[0]));
                break;
            case OpKind::Im2Col: {
                const Tensor& x = tape.value(n.inputs[0]);
                accumulate(grads, n.inputs[0],
                           col2im(g, x.shape(), n.attrs[0], n.attrs[1], n.attrs[2], n.attrs[3]));
                break;
            }
            case OpKind::Im2Col3d: {
                const Tensor& x = tape.value(n.inputs[0]);
                accumulate(grads, n.inputs[0],
                           col2im3d(g, x.shape(), n.attrs[0], n.attrs[1], n.attrs[2], n.attrs[3]));
                break;
            }
            case OpKind::MaxPool2d: {
                const Tensor& x = tape.value(n.inputs[0]);
                const std::size_t h = x.extent(2), w = x.extent(3);
                const std::size_t planes = x.extent(0) * x.extent(1);
                const std::size_t per = n.value.size() / planes;
                std::vector<double> out(x.size(), 0.0);
                for (std::size_t i = 0; i < planes; ++i)
                    for (std::size_t j = 0; j < per; ++j) {
                        const std::size_t best =
                            static_cast<std::size_t>(n.aux[i * per + j]);
                        out[i * h * w + best] += g[i * per + j];
                    }
                accumulate(grads, n.inputs[0], Tensor(x.shape(), std::move(out)));
                break;
            }
            case OpKind::LayerNorm: {
                const Tensor& hbar = n.aux;
                const Tensor& inv_s = n.aux2;
                const Tensor& gamma = tape.value(n.inputs[1]);
                const std::size_t kdim = hbar.shape().back();
                const std::size_t rows = hbar.size() / kdim;
                const bool sqrt_mode = n.attrs[0] == 1;
                // dgamma / dbeta: column sums over all rows.
                std::vector<double> dgamma(kdim, 0.0), dbeta(kdim, 0.0);
                std::vector<double> dx(hbar.size());
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dy = 0.0, mean_dyh = 0.0;
                    for (std::size_t j = 0; j < kdim; ++j) {
                        const std::size_t idx = r * kdim + j;
                        const double dy = g[idx] * gamma[j];
                        dgamma[j] += g[idx] * hbar[idx];
                        dbeta[j] += g[idx];
                        mean_dy += dy;
                        mean_dyh += dy * hbar[idx];
                    }
                    mean_dy /= static_cast<double>(kdim);
                    mean_dyh /= static_cast<double>(kdim);
                    for (std::size_t j = 0; j < kdim; ++j) {
                        const std::size_t idx = r * kdim + j;
                        const double dy = g[idx] * gamma[j];
                        if (sqrt_mode) {
                            dx[idx] = inv_s[r] * (dy - mean_dy - hbar[idx] * mean_dyh);
                        } else {
                            // normalizer s = var + eps (no square root)
                            dx[idx] = inv_s[r] * (dy - mean_dy) -
                                      2.0 * hbar[idx] * mean_dyh;
                        }
                    }
                }
                accumulate(grads, n.inputs[0], Tensor(hbar.shape(), std::move(dx)));
                accumulate(grads, n.inputs[1], Tensor({kdim}, std::move(dgamma)));
                accumulate(grads, n.inputs[2], Tensor({kdim}, std::move(dbeta)));
                break;
            }
            case OpKind::Leaf:
                break;
        }
    }

    GradMap result;
    for (std::size_t i = 0; i < tape.size(); ++i) {
        const Tape::Node& n = tape.nodes_[i];
        if (!n.is_param && !n.retained) continue;
        NodeId id{static_cast<std::uint32_t>(i)};
        if (grads[i].empty()) {
            result.set(id, Tensor::zeros(n.value.shape()));
        } else {
            result.set(id, std::move(grads[i]));
        }
    }
    return result;
}

std::vector<GradMap> backward_per_example(const Tape& tape, const std::vector<NodeId>& losses) {
    std::vector<GradMap> out;
    out.reserve(losses.size());
    for (NodeId loss : losses) out.push_back(backward(tape, loss));
    return out;
}

}  // namespace fastgc
