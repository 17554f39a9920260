#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fastgc/autograd.hpp"
#include "fastgc/tensor.hpp"

namespace fastgc {

// ---- closed-form per-example gradients -------------------------------------
//
// Each function reconstructs per-example parameter gradients (or their squared
// norms) from the gradient w.r.t. a layer's pre-activations and the cached
// layer input, instead of running one backward pass per example.

struct LinearPeGrads {
    Tensor grad_w;  // [t, m, n]
    Tensor grad_b;  // [t, m]
};

/// gradW[i] = dz[i] (outer) x[i]; gradB[i] = dz[i].
LinearPeGrads linear_pe_grad(const Tensor& dz, const Tensor& x);

/// Squared Frobenius norm of each example's weight gradient without
/// materializing it: |dz[i]|^2 * |x[i]|^2. Bias contribution not included.
Tensor linear_pe_sqnorm(const Tensor& dz, const Tensor& x);

/// Position-wise linear over a sequence: dz, x are [t, s, m] / [t, s, n];
/// gradW[i] = dz[i]^T x[i] (summed over positions), gradB[i] = sum_s dz[i, s].
LinearPeGrads seq_linear_pe_grad(const Tensor& dz, const Tensor& x);

struct ConvPeGrads {
    Tensor grad_kernel;  // [t, c_out, c_in, kh, kw] (2d) or [t, c_out, c_in, k, k, k] flattened to 5 dims max
    Tensor grad_bias;    // [t, c_out]
};

/// dz: [t, c_out, oh, ow], x: [t, c_in, sh, sw].
/// gradK = bmm(reshape(dz), im2col(x)) reshaped; gradB = spatial sums of dz.
ConvPeGrads conv2d_pe_grad(const Tensor& dz, const Tensor& x, std::size_t kh, std::size_t kw,
                           std::size_t stride = 1, std::size_t pad = 0);

/// Same with precomputed patches = im2col(x, kh, kw, stride, pad).
ConvPeGrads conv2d_pe_grad_from_patches(const Tensor& dz, const Tensor& patches, std::size_t c_in,
                                        std::size_t kh, std::size_t kw);

/// Volumetric analogue. dz: [t, c_out, od, oh, ow], x: [t, c_in, sd, sh, sw].
/// grad_kernel comes back as [t, c_out, c_in * k^3] (order-5 cap on tensors).
ConvPeGrads conv3d_pe_grad(const Tensor& dz, const Tensor& x, std::size_t k,
                           std::size_t stride = 1);

struct RecurrentPeGrads {
    Tensor grad_w;  // [t, m, m]  (4m rows for LSTM)
    Tensor grad_v;  // [t, m, n]
    Tensor grad_b;  // [t, m]
};

/// dz_steps[t'] is the gradient w.r.t. the step-t' pre-activation [tau, m];
/// h_prev[t'] is h^(t'-1) (so h_prev[0] is the initial hidden state);
/// x_steps[t'] is the step input. Sums the per-step outer products.
RecurrentPeGrads rnn_pe_grad(const std::vector<Tensor>& dz_steps,
                             const std::vector<Tensor>& h_prev,
                             const std::vector<Tensor>& x_steps);

/// LSTM uses the identical summation over the stacked (f, i, g, o) gate rows.
RecurrentPeGrads lstm_pe_grad(const std::vector<Tensor>& dz_steps,
                              const std::vector<Tensor>& h_prev,
                              const std::vector<Tensor>& x_steps);

struct LayerNormPeGrads {
    Tensor grad_gamma;  // [t, k]
    Tensor grad_beta;   // [t, k]
};

/// gradGamma = dh (elementwise) hbar; gradBeta = dh.
LayerNormPeGrads layernorm_pe_grad(const Tensor& dh, const Tensor& hbar);

struct AttentionPeGrads {
    Tensor grad_wq, grad_wk, grad_wv, grad_wo;  // each [t, d_m, d_m]
};

/// gradWQ[i] = dq[i]^T qin[i] and analogously for K, V; gradWO[i] = dy[i]^T h[i].
AttentionPeGrads attention_pe_grad(const Tensor& dq, const Tensor& dk, const Tensor& dv,
                                   const Tensor& dy, const Tensor& qin, const Tensor& kin,
                                   const Tensor& vin, const Tensor& h);

// ---- layers -----------------------------------------------------------------

/// A model layer: runs the forward pass on the tape, caches (input, pre-activation)
/// node ids when tracking, and reconstructs per-example gradient norms from the
/// retained pre-activation gradients.
class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string name() const = 0;

    /// Record the forward computation. With track=true the layer retains its
    /// pre-activation nodes and caches what the per-example formulas need;
    /// with track=false (inference) nothing is cached.
    virtual NodeId forward(Tape& tape, NodeId x, bool track) = 0;

    virtual std::vector<Tensor*> params() { return {}; }
    virtual std::vector<std::string> param_names() const { return {}; }
    /// Tape nodes of this layer's parameters for the most recent forward.
    virtual std::vector<NodeId> param_nodes() const { return {}; }

    /// Add this layer's per-example squared gradient norms into acc [tau].
    virtual void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                       std::vector<double>& acc) const;

    /// Materialized per-example gradients, aligned with params(); entry shapes
    /// are [tau, *param_shape] (kernel grads may keep trailing dims flattened).
    virtual std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const;

    /// False for layers whose per-example gradients cannot be reconstructed
    /// (none of the built-in layers; reweighting refuses such models).
    virtual bool supports_pe_norms() const { return true; }
};

class Linear : public Layer {
public:
    Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);
    std::string name() const override { return "linear"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&w_, &b_}; }
    std::vector<std::string> param_names() const override { return {"W", "b"}; }
    std::vector<NodeId> param_nodes() const override { return {w_node_, b_node_}; }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    std::size_t in_, out_;
    Tensor w_, b_;  // W [out, in], b [out]
    NodeId w_node_, b_node_;
    NodeId x_node_, z_node_;
    bool seq_mode_ = false;  // input was [t, s, in]
    bool cached_ = false;
};

class Conv2d : public Layer {
public:
    Conv2d(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
           std::mt19937_64& rng, std::size_t stride = 1, std::size_t pad = 0);
    std::string name() const override { return "conv2d"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&kernel_, &b_}; }
    std::vector<std::string> param_names() const override { return {"K", "b"}; }
    std::vector<NodeId> param_nodes() const override { return {k_node_, b_node_}; }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    std::size_t c_in_, c_out_, kh_, kw_, stride_, pad_;
    Tensor kernel_, b_;  // kernel [c_out, c_in, kh, kw]
    NodeId k_node_, b_node_;
    NodeId x_node_, z_node_, patches_node_;
    bool cached_ = false;
};

class Conv3d : public Layer {
public:
    Conv3d(std::size_t c_in, std::size_t c_out, std::size_t k, std::mt19937_64& rng,
           std::size_t stride = 1);
    std::string name() const override { return "conv3d"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&kernel_, &b_}; }
    std::vector<std::string> param_names() const override { return {"K", "b"}; }
    std::vector<NodeId> param_nodes() const override { return {k_node_, b_node_}; }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    std::size_t c_in_, c_out_, k_, stride_;
    Tensor kernel_, b_;  // kernel [c_out, c_in * k^3] stored flat
    NodeId k_node_, b_node_;
    NodeId x_node_, z_node_;
    bool cached_ = false;
};

class Rnn : public Layer {
public:
    Rnn(std::size_t n_in, std::size_t hidden, std::mt19937_64& rng);
    std::string name() const override { return "rnn"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&w_, &v_, &b_}; }
    std::vector<std::string> param_names() const override { return {"W", "V", "b"}; }
    std::vector<NodeId> param_nodes() const override { return {w_node_, v_node_, b_node_}; }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    std::size_t n_in_, hidden_;
    Tensor w_, v_, b_;  // W [m, m], V [m, n], b [m]
    NodeId w_node_, v_node_, b_node_;
    std::vector<NodeId> z_nodes_, h_prev_nodes_, x_nodes_;
    bool cached_ = false;
};

/// LSTM with stacked gate pre-activations z = W h + V x + b, rows ordered
/// (f, i, g, o). The stacked layout is observable in serialized parameters.
class Lstm : public Layer {
public:
    Lstm(std::size_t n_in, std::size_t hidden, std::mt19937_64& rng);
    std::string name() const override { return "lstm"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&w_, &v_, &b_}; }
    std::vector<std::string> param_names() const override { return {"W", "V", "b"}; }
    std::vector<NodeId> param_nodes() const override { return {w_node_, v_node_, b_node_}; }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    std::size_t n_in_, hidden_;
    Tensor w_, v_, b_;  // W [4m, m], V [4m, n], b [4m]
    NodeId w_node_, v_node_, b_node_;
    std::vector<NodeId> z_nodes_, h_prev_nodes_, x_nodes_;
    bool cached_ = false;
};

class LayerNorm : public Layer {
public:
    /// sqrt_normalizer=true divides by sqrt(variance + eps) (the default);
    /// false divides by variance + eps, the literal reading of the source
    /// normalization equations. The choice affects the forward pass only.
    LayerNorm(std::size_t dim, std::mt19937_64& rng, double eps = 1e-5,
              bool sqrt_normalizer = true);
    std::string name() const override { return "layernorm"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&gamma_, &beta_}; }
    std::vector<std::string> param_names() const override { return {"gamma", "beta"}; }
    std::vector<NodeId> param_nodes() const override { return {g_node_, b_node_}; }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    std::size_t dim_;
    double eps_;
    bool sqrt_normalizer_;
    Tensor gamma_, beta_;
    NodeId g_node_, b_node_;
    NodeId y_node_;  // output node; doubles as the retained "pre-activation"
    bool cached_ = false;
};

/// Self-attention with parameter matrices WQ, WK, WV, WO of size [d_m, d_m]
/// (single-matrix layout, d_m = heads * d_k; heads only reshape the scoring).
/// The 1/sqrt(d_k) factor is applied to the softmax input.
class Attention : public Layer {
public:
    Attention(std::size_t d_model, std::size_t heads, std::mt19937_64& rng);
    std::string name() const override { return "attention"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override { return {&wq_, &wk_, &wv_, &wo_}; }
    std::vector<std::string> param_names() const override { return {"WQ", "WK", "WV", "WO"}; }
    std::vector<NodeId> param_nodes() const override {
        return {wq_node_, wk_node_, wv_node_, wo_node_};
    }
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    NodeId project(Tape& tape, NodeId x, NodeId w) const;
    std::size_t d_model_, heads_;
    Tensor wq_, wk_, wv_, wo_;
    NodeId wq_node_, wk_node_, wv_node_, wo_node_;
    NodeId x_node_, q_node_, k_node_, v_node_, h_node_, y_node_;
    bool cached_ = false;
};

// Parameterless layers pass gradients through untouched; they contribute no
// per-example norm terms.

class Activation : public Layer {
public:
    enum class Kind { Sigmoid, Tanh, Relu };
    explicit Activation(Kind kind) : kind_(kind) {}
    std::string name() const override;
    NodeId forward(Tape& tape, NodeId x, bool track) override;

private:
    Kind kind_;
};

class MaxPool2d : public Layer {
public:
    MaxPool2d(std::size_t k, std::size_t stride) : k_(k), stride_(stride) {}
    std::string name() const override { return "maxpool2d"; }
    NodeId forward(Tape& tape, NodeId x, bool) override { return tape.maxpool2d(x, k_, stride_); }

private:
    std::size_t k_, stride_;
};

/// Softmax over the last dim (parameterless; gradients pass through the tape).
class Softmax : public Layer {
public:
    std::string name() const override { return "softmax"; }
    NodeId forward(Tape& tape, NodeId x, bool) override { return tape.softmax_rows(x); }
};

class Flatten : public Layer {
public:
    std::string name() const override { return "flatten"; }
    NodeId forward(Tape& tape, NodeId x, bool) override {
        const Shape& s = tape.shape(x);
        std::size_t rest = 1;
        for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
        return tape.reshape(x, {s[0], rest});
    }
};

/// Mean over the sequence dimension: [t, s, d] -> [t, d].
class MeanPoolSeq : public Layer {
public:
    std::string name() const override { return "meanpool_seq"; }
    NodeId forward(Tape& tape, NodeId x, bool) override { return tape.mean_dim1(x); }
};

/// Frozen random embedding lookup: token ids [t, s] -> vectors [t, s, dim].
/// Not trainable; stands in for pretrained embeddings.
class Embedding : public Layer {
public:
    Embedding(std::size_t vocab, std::size_t dim, std::mt19937_64& rng);
    std::string name() const override { return "embedding"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;

private:
    std::size_t vocab_, dim_;
    Tensor table_;  // [vocab, dim]
};

/// Adds fixed sinusoidal position encodings to [t, s, d].
class PositionalEncoding : public Layer {
public:
    std::string name() const override { return "posenc"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
};

/// Encoder block: x -> attention (+skip) -> layernorm -> position-wise linear
/// with relu (+skip) -> layernorm. Sub-layer parameters and per-example norms
/// are exposed through the block.
class TransformerBlock : public Layer {
public:
    TransformerBlock(std::size_t d_model, std::size_t heads, std::mt19937_64& rng);
    std::string name() const override { return "transformer_block"; }
    NodeId forward(Tape& tape, NodeId x, bool track) override;
    std::vector<Tensor*> params() override;
    std::vector<std::string> param_names() const override;
    std::vector<NodeId> param_nodes() const override;
    void accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                               std::vector<double>& acc) const override;
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const override;

private:
    Attention attn_;
    LayerNorm ln1_;
    Linear fc1_;
    LayerNorm ln2_;
};

// ---- model -------------------------------------------------------------------

/// A sequential stack of layers with a softmax + cross-entropy head.
class Model {
public:
    Model() = default;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

    /// Record the forward pass for a feature batch; returns the logits node.
    NodeId forward(Tape& tape, const Tensor& features, bool track = true);

    /// Per-example cross-entropy losses [tau] on the recorded logits.
    NodeId per_example_losses(Tape& tape, NodeId logits, const std::vector<int>& targets) const;

    std::vector<Tensor*> parameters();
    std::vector<std::string> param_names() const;
    std::vector<NodeId> param_nodes() const;
    std::size_t param_count() const;

    /// Per-example squared gradient norms accumulated over all layers [tau].
    Tensor pe_sqnorms(const Tape& tape, const GradMap& grads) const;

    /// Materialized per-example gradients aligned with parameters().
    std::vector<Tensor> pe_param_grads(const Tape& tape, const GradMap& grads) const;

    /// Parameter index range [first, last) per layer, for per-layer clipping.
    std::vector<std::pair<std::size_t, std::size_t>> layer_param_ranges() const;

    const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }
    std::size_t last_batch_size() const { return last_batch_; }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
    std::size_t last_batch_ = 0;
};

/// -log softmax(logits)[target] per row -> [tau].
NodeId cross_entropy_losses(Tape& tape, NodeId logits, const std::vector<int>& targets);

/// Write all parameters as a flat little-endian 64-bit float blob plus a JSON
/// manifest listing name, shape, and byte offset per tensor.
void save_parameters(Model& model, const std::string& bin_path, const std::string& manifest_path);
void load_parameters(Model& model, const std::string& bin_path, const std::string& manifest_path);

}  // namespace fastgc
