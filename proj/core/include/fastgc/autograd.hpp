#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "fastgc/tensor.hpp"

namespace fastgc {

/// Handle to a value recorded on a Tape.
struct NodeId {
    std::uint32_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

/// Gradients keyed by tape node. Every entry has the shape of its node's value.
class GradMap {
public:
    bool contains(NodeId id) const { return grads_.count(id.index) != 0; }
    const Tensor& at(NodeId id) const;
    void set(NodeId id, Tensor grad) { grads_[id.index] = std::move(grad); }
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<std::uint32_t, Tensor> grads_;
};

enum class OpKind : std::uint8_t {
    Leaf,
    Add,            // a + b, same shape
    AddRowwise,     // x [..., m] + b [m]
    AddChannelBias, // x [t, c, s] + b [c]
    Mul,            // elementwise, same shape
    MulRowwise,     // x [..., m] * g [m]
    ScalarMul,
    Matmul,
    Bmm,
    Transpose2d,
    TransposeLast2,
    Transpose12,
    Reshape,
    Tanh,
    Sigmoid,
    Relu,
    Log,
    SoftmaxRows,    // softmax over the last dim
    SumAll,
    MeanDim1,       // [t, s, d] -> [t, d]
    PickRows,       // [t, k] gather one column index per row -> [t]
    IndexScalar,    // [n] -> [1]
    SliceCols,      // [t, m] -> [t, len]
    SliceDim1,      // [t, s, d] -> [t, d]
    WeightedSumConst, // dot(v [t], w [t]) with w a constant, not a node
    Im2Col,
    Im2Col3d,
    MaxPool2d,
    LayerNorm,      // fused: inputs (x, gamma, beta)
};

/// Reverse-mode differentiation record. Rebuilt each forward pass; append-only.
/// Confined to one thread.
class Tape {
public:
    struct Node {
        OpKind op = OpKind::Leaf;
        std::vector<NodeId> inputs;
        Tensor value;
        std::vector<std::size_t> attrs;  // op-specific integers
        double scalar_attr = 0.0;        // ScalarMul factor, LayerNorm eps
        Tensor aux;                      // op-specific saved tensor
        Tensor aux2;
        std::vector<int> targets;        // PickRows class indices
        bool is_param = false;
        bool retained = false;
    };

    NodeId input(Tensor value) { return push_leaf(std::move(value), false); }
    NodeId param(Tensor value) { return push_leaf(std::move(value), true); }
    NodeId constant(Tensor value) { return push_leaf(std::move(value), false); }

    /// Flag a node so backward() reports its gradient.
    void retain(NodeId id);

    const Tensor& value(NodeId id) const { return node(id).value; }
    const Shape& shape(NodeId id) const { return node(id).value.shape(); }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const;

    // ---- recorded operations ----
    NodeId add(NodeId a, NodeId b);
    NodeId add_rowwise(NodeId x, NodeId bias);
    NodeId add_channel_bias(NodeId x, NodeId bias);
    NodeId mul(NodeId a, NodeId b);
    NodeId mul_rowwise(NodeId x, NodeId scale);
    NodeId scalar_mul(NodeId a, double s);
    NodeId matmul(NodeId a, NodeId b);
    NodeId bmm(NodeId a, NodeId b);
    NodeId transpose2d(NodeId a);
    NodeId transpose_last2(NodeId a);
    NodeId transpose12(NodeId a);
    NodeId reshape(NodeId a, Shape shape);
    NodeId tanh(NodeId a);
    NodeId sigmoid(NodeId a);
    NodeId relu(NodeId a);
    NodeId log(NodeId a);
    NodeId softmax_rows(NodeId a);
    NodeId sum_all(NodeId a);
    NodeId mean_all(NodeId a);
    NodeId mean_dim1(NodeId a);
    NodeId pick_rows(NodeId logits, std::vector<int> targets);
    NodeId index_scalar(NodeId v, std::size_t i);
    NodeId slice_cols(NodeId a, std::size_t start, std::size_t len);
    NodeId slice_dim1(NodeId a, std::size_t t);
    NodeId weighted_sum(NodeId v, Tensor weights);
    NodeId im2col(NodeId x, std::size_t kh, std::size_t kw, std::size_t stride,
                  std::size_t pad = 0);
    NodeId im2col3d(NodeId x, std::size_t kd, std::size_t kh, std::size_t kw,
                    std::size_t stride);
    NodeId maxpool2d(NodeId x, std::size_t k, std::size_t stride);
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps, bool sqrt_normalizer);

    /// Normalized input h-bar saved by a LayerNorm node.
    const Tensor& layer_norm_hbar(NodeId id) const;

private:
    friend GradMap backward(const Tape&, NodeId);
    friend std::vector<GradMap> backward_per_example(const Tape&, const std::vector<NodeId>&);

    NodeId push_leaf(Tensor value, bool is_param);
    NodeId push(Node node);
    Node& node_mut(NodeId id);

    std::vector<Node> nodes_;
};

/// One reverse sweep from a scalar loss. The result holds gradients for every
/// parameter node (zero tensors for unreached ones) and every retained node.
GradMap backward(const Tape& tape, NodeId loss);

/// Gradient of each scalar loss alone, as tau sequential reverse sweeps over
/// the shared forward tape. This is the slow-but-correct baseline primitive;
/// it is deliberately not vectorized.
std::vector<GradMap> backward_per_example(const Tape& tape, const std::vector<NodeId>& losses);

}  // namespace fastgc
