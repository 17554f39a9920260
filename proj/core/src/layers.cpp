#include "fastgc/layers.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fastgc/parallel.hpp"
#include "json.hpp"

namespace fastgc {

// ---- closed-form per-example gradients --------------------------------------

namespace {

void require_batch_match(const Tensor& a, const Tensor& b, const char* op) {
    if (a.extent(0) != b.extent(0)) {
        throw ShapeError(std::string(op) + ": batch extents differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

// acc[i] += |rows of x belonging to example i|^2
void add_sq_norms(const Tensor& x, std::vector<double>& acc) {
    const std::size_t t = x.extent(0);
    const std::size_t d = x.size() / t;
    const double* p = x.data();
    for (std::size_t i = 0; i < t; ++i) {
        double s = 0.0;
        const double* row = p + i * d;
        for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
        acc[i] += s;
    }
}

}  // namespace

LinearPeGrads linear_pe_grad(const Tensor& dz, const Tensor& x) {
    require_batch_match(dz, x, "linear_pe_grad");
    return {outer_batch(dz, x), dz};
}

Tensor linear_pe_sqnorm(const Tensor& dz, const Tensor& x) {
    require_batch_match(dz, x, "linear_pe_sqnorm");
    return mul(sq_norm_rows(dz), sq_norm_rows(x));
}

LinearPeGrads seq_linear_pe_grad(const Tensor& dz, const Tensor& x) {
    require_batch_match(dz, x, "seq_linear_pe_grad");
    if (dz.rank() != 3 || x.rank() != 3 || dz.extent(1) != x.extent(1)) {
        throw ShapeError("seq_linear_pe_grad: expected [t, s, m] and [t, s, n], got " +
                         shape_str(dz.shape()) + " and " + shape_str(x.shape()));
    }
    const std::size_t t = dz.extent(0), s = dz.extent(1), m = dz.extent(2);
    Tensor grad_w = bmm(transpose_last2(dz), x);
    std::vector<double> gb(t * m, 0.0);
    const double* p = dz.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < s; ++j)
            for (std::size_t r = 0; r < m; ++r) gb[i * m + r] += p[(i * s + j) * m + r];
    return {std::move(grad_w), Tensor({t, m}, std::move(gb))};
}

ConvPeGrads conv2d_pe_grad_from_patches(const Tensor& dz, const Tensor& patches,
                                        std::size_t c_in, std::size_t kh, std::size_t kw) {
    const std::size_t t = dz.extent(0), c_out = dz.extent(1);
    const std::size_t p = patches.extent(1);
    Tensor dz_mat = dz.reshaped({t, c_out, p});
    Tensor grad_k = bmm(dz_mat, patches).reshaped({t, c_out, c_in, kh, kw});
    std::vector<double> gb(t * c_out, 0.0);
    const double* pd = dz_mat.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < c_out; ++c) {
            double s = 0.0;
            const double* row = pd + (i * c_out + c) * p;
            for (std::size_t j = 0; j < p; ++j) s += row[j];
            gb[i * c_out + c] = s;
        }
    return {std::move(grad_k), Tensor({t, c_out}, std::move(gb))};
}

ConvPeGrads conv2d_pe_grad(const Tensor& dz, const Tensor& x, std::size_t kh, std::size_t kw,
                           std::size_t stride, std::size_t pad) {
    require_batch_match(dz, x, "conv2d_pe_grad");
    const std::size_t oh = (x.extent(2) + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (x.extent(3) + 2 * pad - kw) / stride + 1;
    if (dz.rank() != 4 || dz.extent(2) != oh || dz.extent(3) != ow) {
        throw ShapeError("conv2d_pe_grad: dz " + shape_str(dz.shape()) +
                         " inconsistent with input " + shape_str(x.shape()) + " and kernel [" +
                         std::to_string(kh) + ", " + std::to_string(kw) + "]");
    }
    return conv2d_pe_grad_from_patches(dz, im2col(x, kh, kw, stride, pad), x.extent(1), kh, kw);
}

ConvPeGrads conv3d_pe_grad(const Tensor& dz, const Tensor& x, std::size_t k,
                           std::size_t stride) {
    require_batch_match(dz, x, "conv3d_pe_grad");
    if (dz.rank() != 5 || x.rank() != 5) {
        throw ShapeError("conv3d_pe_grad: expected rank-5 dz and x, got " +
                         shape_str(dz.shape()) + " and " + shape_str(x.shape()));
    }
    const std::size_t t = dz.extent(0), c_out = dz.extent(1);
    const std::size_t p = dz.extent(2) * dz.extent(3) * dz.extent(4);
    Tensor patches = im2col3d(x, k, k, k, stride);
    Tensor grad_k = bmm(dz.reshaped({t, c_out, p}), patches);  // [t, c_out, c_in*k^3]
    Tensor dz_mat = dz.reshaped({t, c_out, p});
    std::vector<double> gb(t * c_out, 0.0);
    const double* pd = dz_mat.data();
    for (std::size_t i = 0; i < t * c_out; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < p; ++j) s += pd[i * p + j];
        gb[i] = s;
    }
    return {std::move(grad_k), Tensor({t, c_out}, std::move(gb))};
}

RecurrentPeGrads rnn_pe_grad(const std::vector<Tensor>& dz_steps,
                             const std::vector<Tensor>& h_prev,
                             const std::vector<Tensor>& x_steps) {
    if (dz_steps.empty() || dz_steps.size() != h_prev.size() ||
        dz_steps.size() != x_steps.size()) {
        throw ShapeError("rnn_pe_grad: step lists of lengths " + std::to_string(dz_steps.size()) +
                         ", " + std::to_string(h_prev.size()) + ", " +
                         std::to_string(x_steps.size()) + " do not match");
    }
    const std::size_t steps = dz_steps.size();
    const std::size_t t = dz_steps[0].extent(0);
    const std::size_t m = dz_steps[0].extent(1);
    const std::size_t h = h_prev[0].extent(1);
    const std::size_t n = x_steps[0].extent(1);
    for (std::size_t st = 0; st < steps; ++st) {
        if (dz_steps[st].extent(0) != t || h_prev[st].extent(0) != t ||
            x_steps[st].extent(0) != t || dz_steps[st].extent(1) != m ||
            h_prev[st].extent(1) != h || x_steps[st].extent(1) != n) {
            throw ShapeError("rnn_pe_grad: inconsistent shapes at step " + std::to_string(st));
        }
    }
    std::vector<double> gw(t * m * h, 0.0), gv(t * m * n, 0.0), gb(t * m, 0.0);
    parallel_for(t, steps * m * (h + n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            for (std::size_t st = 0; st < steps; ++st) {
                const double* dzr = dz_steps[st].data() + i * m;
                const double* hr = h_prev[st].data() + i * h;
                const double* xr = x_steps[st].data() + i * n;
                for (std::size_t r = 0; r < m; ++r) {
                    const double d = dzr[r];
                    gb[i * m + r] += d;
                    if (d == 0.0) continue;
                    double* gwr = gw.data() + (i * m + r) * h;
                    for (std::size_t c = 0; c < h; ++c) gwr[c] += d * hr[c];
                    double* gvr = gv.data() + (i * m + r) * n;
                    for (std::size_t c = 0; c < n; ++c) gvr[c] += d * xr[c];
                }
            }
        }
    });
    return {Tensor({t, m, h}, std::move(gw)), Tensor({t, m, n}, std::move(gv)),
            Tensor({t, m}, std::move(gb))};
}

RecurrentPeGrads lstm_pe_grad(const std::vector<Tensor>& dz_steps,
                              const std::vector<Tensor>& h_prev,
                              const std::vector<Tensor>& x_steps) {
    return rnn_pe_grad(dz_steps, h_prev, x_steps);
}

LayerNormPeGrads layernorm_pe_grad(const Tensor& dh, const Tensor& hbar) {
    if (dh.shape() != hbar.shape()) {
        throw ShapeError("layernorm_pe_grad: shapes " + shape_str(dh.shape()) + " and " +
                         shape_str(hbar.shape()) + " differ");
    }
    return {mul(dh, hbar), dh};
}

AttentionPeGrads attention_pe_grad(const Tensor& dq, const Tensor& dk, const Tensor& dv,
                                   const Tensor& dy, const Tensor& qin, const Tensor& kin,
                                   const Tensor& vin, const Tensor& h) {
    return {bmm(transpose_last2(dq), qin), bmm(transpose_last2(dk), kin),
            bmm(transpose_last2(dv), vin), bmm(transpose_last2(dy), h)};
}

// ---- layer base ---------------------------------------------------------------

void Layer::accumulate_pe_sqnorms(const Tape&, const GradMap&, std::vector<double>&) const {}

std::vector<Tensor> Layer::pe_param_grads(const Tape&, const GradMap&) const { return {}; }

namespace {

Tensor init_uniform(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> buf(n);
    for (double& v : buf) v = dist(rng);
    return Tensor(std::move(shape), std::move(buf));
}

}  // namespace

// ---- Linear ---------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng) : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w_ = init_uniform({out, in}, bound, rng);
    b_ = init_uniform({out}, bound, rng);
}

NodeId Linear::forward(Tape& tape, NodeId x, bool track) {
    w_node_ = tape.param(w_);
    b_node_ = tape.param(b_);
    const Shape xs = tape.shape(x);
    seq_mode_ = xs.size() == 3;
    NodeId x2 = seq_mode_ ? tape.reshape(x, {xs[0] * xs[1], xs[2]}) : x;
    NodeId z = tape.add_rowwise(tape.matmul(x2, tape.transpose2d(w_node_)), b_node_);
    if (seq_mode_) z = tape.reshape(z, {xs[0], xs[1], out_});
    if (track) {
        tape.retain(z);
        x_node_ = x;
        z_node_ = z;
        cached_ = true;
    } else {
        cached_ = false;
    }
    return z;
}

void Linear::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                   std::vector<double>& acc) const {
    if (!cached_) throw ContractError("linear: no cached forward pass");
    const Tensor& dz = grads.at(z_node_);
    const Tensor& x = tape.value(x_node_);
    if (seq_mode_) {
        LinearPeGrads g = seq_linear_pe_grad(dz, x);
        add_sq_norms(g.grad_w, acc);
        add_sq_norms(g.grad_b, acc);
    } else {
        // Goodfellow identity: |dz|^2 |x|^2 for the weights, |dz|^2 for the bias.
        Tensor dz_sq = sq_norm_rows(dz);
        Tensor x_sq = sq_norm_rows(x);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += dz_sq[i] * x_sq[i] + dz_sq[i];
    }
}

std::vector<Tensor> Linear::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("linear: no cached forward pass");
    const Tensor& dz = grads.at(z_node_);
    const Tensor& x = tape.value(x_node_);
    LinearPeGrads g = seq_mode_ ? seq_linear_pe_grad(dz, x) : linear_pe_grad(dz, x);
    return {std::move(g.grad_w), std::move(g.grad_b)};
}

// ---- Conv2d ----------------------------------------------------------------------

Conv2d::Conv2d(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
               std::mt19937_64& rng, std::size_t stride, std::size_t pad)
    : c_in_(c_in), c_out_(c_out), kh_(kh), kw_(kw), stride_(stride), pad_(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * kh * kw));
    kernel_ = init_uniform({c_out, c_in, kh, kw}, bound, rng);
    b_ = init_uniform({c_out}, bound, rng);
}

NodeId Conv2d::forward(Tape& tape, NodeId x, bool track) {
    k_node_ = tape.param(kernel_);
    b_node_ = tape.param(b_);
    const Shape xs = tape.shape(x);
    const std::size_t t = xs[0];
    const std::size_t oh = (xs[2] + 2 * pad_ - kh_) / stride_ + 1;
    const std::size_t ow = (xs[3] + 2 * pad_ - kw_) / stride_ + 1;
    const std::size_t p = oh * ow, l = kh_ * kw_ * c_in_;
    NodeId patches = tape.im2col(x, kh_, kw_, stride_, pad_);  // [t, p, l]
    NodeId kflat = tape.reshape(k_node_, {c_out_, l});
    NodeId mm = tape.matmul(tape.reshape(patches, {t * p, l}), tape.transpose2d(kflat));
    NodeId z3 = tape.transpose_last2(tape.reshape(mm, {t, p, c_out_}));  // [t, c_out, p]
    NodeId z = tape.reshape(tape.add_channel_bias(z3, b_node_), {t, c_out_, oh, ow});
    if (track) {
        tape.retain(z);
        x_node_ = x;
        z_node_ = z;
        patches_node_ = patches;
        cached_ = true;
    } else {
        cached_ = false;
    }
    return z;
}

void Conv2d::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                   std::vector<double>& acc) const {
    if (!cached_) throw ContractError("conv2d: no cached forward pass");
    ConvPeGrads g = conv2d_pe_grad_from_patches(grads.at(z_node_), tape.value(patches_node_),
                                                c_in_, kh_, kw_);
    add_sq_norms(g.grad_kernel, acc);
    add_sq_norms(g.grad_bias, acc);
}

std::vector<Tensor> Conv2d::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("conv2d: no cached forward pass");
    ConvPeGrads g = conv2d_pe_grad_from_patches(grads.at(z_node_), tape.value(patches_node_),
                                                c_in_, kh_, kw_);
    return {std::move(g.grad_kernel), std::move(g.grad_bias)};
}

// ---- Conv3d ----------------------------------------------------------------------

Conv3d::Conv3d(std::size_t c_in, std::size_t c_out, std::size_t k, std::mt19937_64& rng,
               std::size_t stride)
    : c_in_(c_in), c_out_(c_out), k_(k), stride_(stride) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * k * k * k));
    kernel_ = init_uniform({c_out, c_in * k * k * k}, bound, rng);
    b_ = init_uniform({c_out}, bound, rng);
}

NodeId Conv3d::forward(Tape& tape, NodeId x, bool track) {
    k_node_ = tape.param(kernel_);
    b_node_ = tape.param(b_);
    const Shape xs = tape.shape(x);
    const std::size_t t = xs[0];
    const std::size_t od = (xs[2] - k_) / stride_ + 1;
    const std::size_t oh = (xs[3] - k_) / stride_ + 1;
    const std::size_t ow = (xs[4] - k_) / stride_ + 1;
    const std::size_t p = od * oh * ow, l = c_in_ * k_ * k_ * k_;
    NodeId patches = tape.im2col3d(x, k_, k_, k_, stride_);
    NodeId mm = tape.matmul(tape.reshape(patches, {t * p, l}), tape.transpose2d(k_node_));
    NodeId z3 = tape.transpose_last2(tape.reshape(mm, {t, p, c_out_}));
    NodeId z = tape.reshape(tape.add_channel_bias(z3, b_node_), {t, c_out_, od, oh, ow});
    if (track) {
        tape.retain(z);
        x_node_ = x;
        z_node_ = z;
        cached_ = true;
    } else {
        cached_ = false;
    }
    return z;
}

void Conv3d::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                   std::vector<double>& acc) const {
    if (!cached_) throw ContractError("conv3d: no cached forward pass");
    ConvPeGrads g = conv3d_pe_grad(grads.at(z_node_), tape.value(x_node_), k_, stride_);
    add_sq_norms(g.grad_kernel, acc);
    add_sq_norms(g.grad_bias, acc);
}

std::vector<Tensor> Conv3d::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("conv3d: no cached forward pass");
    ConvPeGrads g = conv3d_pe_grad(grads.at(z_node_), tape.value(x_node_), k_, stride_);
    return {std::move(g.grad_kernel), std::move(g.grad_bias)};
}

// ---- Rnn -------------------------------------------------------------------------

Rnn::Rnn(std::size_t n_in, std::size_t hidden, std::mt19937_64& rng)
    : n_in_(n_in), hidden_(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    w_ = init_uniform({hidden, hidden}, bound, rng);
    v_ = init_uniform({hidden, n_in}, bound, rng);
    b_ = init_uniform({hidden}, bound, rng);
}

NodeId Rnn::forward(Tape& tape, NodeId x, bool track) {
    w_node_ = tape.param(w_);
    v_node_ = tape.param(v_);
    b_node_ = tape.param(b_);
    const Shape xs = tape.shape(x);
    if (xs.size() != 3 || xs[2] != n_in_) {
        throw ShapeError("rnn: expected [t, steps, " + std::to_string(n_in_) + "], got " +
                         shape_str(xs));
    }
    const std::size_t steps = xs[1];
    z_nodes_.clear();
    h_prev_nodes_.clear();
    x_nodes_.clear();
    NodeId wt = tape.transpose2d(w_node_);
    NodeId vt = tape.transpose2d(v_node_);
    NodeId h = tape.constant(Tensor::zeros({xs[0], hidden_}));
    for (std::size_t st = 0; st < steps; ++st) {
        NodeId xt = tape.slice_dim1(x, st);
        NodeId z = tape.add_rowwise(tape.add(tape.matmul(h, wt), tape.matmul(xt, vt)),
                                    b_node_);
        if (track) {
            tape.retain(z);
            z_nodes_.push_back(z);
            h_prev_nodes_.push_back(h);
            x_nodes_.push_back(xt);
        }
        h = tape.tanh(z);
    }
    cached_ = track;
    return h;
}

void Rnn::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                std::vector<double>& acc) const {
    if (!cached_) throw ContractError("rnn: no cached forward pass");
    std::vector<Tensor> dz, hp, xs;
    for (std::size_t st = 0; st < z_nodes_.size(); ++st) {
        dz.push_back(grads.at(z_nodes_[st]));
        hp.push_back(tape.value(h_prev_nodes_[st]));
        xs.push_back(tape.value(x_nodes_[st]));
    }
    RecurrentPeGrads g = rnn_pe_grad(dz, hp, xs);
    add_sq_norms(g.grad_w, acc);
    add_sq_norms(g.grad_v, acc);
    add_sq_norms(g.grad_b, acc);
}

std::vector<Tensor> Rnn::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("rnn: no cached forward pass");
    std::vector<Tensor> dz, hp, xs;
    for (std::size_t st = 0; st < z_nodes_.size(); ++st) {
        dz.push_back(grads.at(z_nodes_[st]));
        hp.push_back(tape.value(h_prev_nodes_[st]));
        xs.push_back(tape.value(x_nodes_[st]));
    }
    RecurrentPeGrads g = rnn_pe_grad(dz, hp, xs);
    return {std::move(g.grad_w), std::move(g.grad_v), std::move(g.grad_b)};
}

// ---- Lstm ------------------------------------------------------------------------

Lstm::Lstm(std::size_t n_in, std::size_t hidden, std::mt19937_64& rng)
    : n_in_(n_in), hidden_(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    w_ = init_uniform({4 * hidden, hidden}, bound, rng);
    v_ = init_uniform({4 * hidden, n_in}, bound, rng);
    b_ = init_uniform({4 * hidden}, bound, rng);
}

NodeId Lstm::forward(Tape& tape, NodeId x, bool track) {
    w_node_ = tape.param(w_);
    v_node_ = tape.param(v_);
    b_node_ = tape.param(b_);
    const Shape xs = tape.shape(x);
    if (xs.size() != 3 || xs[2] != n_in_) {
        throw ShapeError("lstm: expected [t, steps, " + std::to_string(n_in_) + "], got " +
                         shape_str(xs));
    }
    const std::size_t steps = xs[1];
    const std::size_t m = hidden_;
    z_nodes_.clear();
    h_prev_nodes_.clear();
    x_nodes_.clear();
    NodeId wt = tape.transpose2d(w_node_);
    NodeId vt = tape.transpose2d(v_node_);
    NodeId h = tape.constant(Tensor::zeros({xs[0], m}));
    NodeId c = tape.constant(Tensor::zeros({xs[0], m}));
    for (std::size_t st = 0; st < steps; ++st) {
        NodeId xt = tape.slice_dim1(x, st);
        NodeId z = tape.add_rowwise(tape.add(tape.matmul(h, wt), tape.matmul(xt, vt)),
                                    b_node_);
        if (track) {
            tape.retain(z);
            z_nodes_.push_back(z);
            h_prev_nodes_.push_back(h);
            x_nodes_.push_back(xt);
        }
        // gate order (f, i, g, o) in the stacked rows
        NodeId f = tape.sigmoid(tape.slice_cols(z, 0, m));
        NodeId i = tape.sigmoid(tape.slice_cols(z, m, m));
        NodeId g = tape.tanh(tape.slice_cols(z, 2 * m, m));
        NodeId o = tape.sigmoid(tape.slice_cols(z, 3 * m, m));
        c = tape.add(tape.mul(f, c), tape.mul(i, g));
        h = tape.mul(o, tape.tanh(c));
    }
    cached_ = track;
    return h;
}

void Lstm::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                 std::vector<double>& acc) const {
    if (!cached_) throw ContractError("lstm: no cached forward pass");
    std::vector<Tensor> dz, hp, xs;
    for (std::size_t st = 0; st < z_nodes_.size(); ++st) {
        dz.push_back(grads.at(z_nodes_[st]));
        hp.push_back(tape.value(h_prev_nodes_[st]));
        xs.push_back(tape.value(x_nodes_[st]));
    }
    RecurrentPeGrads g = lstm_pe_grad(dz, hp, xs);
    add_sq_norms(g.grad_w, acc);
    add_sq_norms(g.grad_v, acc);
    add_sq_norms(g.grad_b, acc);
}

std::vector<Tensor> Lstm::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("lstm: no cached forward pass");
    std::vector<Tensor> dz, hp, xs;
    for (std::size_t st = 0; st < z_nodes_.size(); ++st) {
        dz.push_back(grads.at(z_nodes_[st]));
        hp.push_back(tape.value(h_prev_nodes_[st]));
        xs.push_back(tape.value(x_nodes_[st]));
    }
    RecurrentPeGrads g = lstm_pe_grad(dz, hp, xs);
    return {std::move(g.grad_w), std::move(g.grad_v), std::move(g.grad_b)};
}

// ---- LayerNorm --------------------------------------------------------------------

LayerNorm::LayerNorm(std::size_t dim, std::mt19937_64&, double eps, bool sqrt_normalizer)
    : dim_(dim), eps_(eps), sqrt_normalizer_(sqrt_normalizer) {
    gamma_ = Tensor::full({dim}, 1.0);
    beta_ = Tensor::zeros({dim});
}

NodeId LayerNorm::forward(Tape& tape, NodeId x, bool track) {
    g_node_ = tape.param(gamma_);
    b_node_ = tape.param(beta_);
    NodeId y = tape.layer_norm(x, g_node_, b_node_, eps_, sqrt_normalizer_);
    if (track) {
        tape.retain(y);
        y_node_ = y;
        cached_ = true;
    } else {
        cached_ = false;
    }
    return y;
}

void LayerNorm::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                      std::vector<double>& acc) const {
    if (!cached_) throw ContractError("layernorm: no cached forward pass");
    const Tensor& dh = grads.at(y_node_);
    const Tensor& hbar = tape.layer_norm_hbar(y_node_);
    const std::size_t t = dh.extent(0);
    const std::size_t rows_per = dh.size() / (t * dim_);
    const double* pd = dh.data();
    const double* ph = hbar.data();
    for (std::size_t i = 0; i < t; ++i) {
        // per-example gradients sum over any sequence positions
        std::vector<double> gg(dim_, 0.0), gb(dim_, 0.0);
        for (std::size_t r = 0; r < rows_per; ++r)
            for (std::size_t j = 0; j < dim_; ++j) {
                const std::size_t idx = (i * rows_per + r) * dim_ + j;
                gg[j] += pd[idx] * ph[idx];
                gb[j] += pd[idx];
            }
        double s = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) s += gg[j] * gg[j] + gb[j] * gb[j];
        acc[i] += s;
    }
}

std::vector<Tensor> LayerNorm::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("layernorm: no cached forward pass");
    const Tensor& dh = grads.at(y_node_);
    const Tensor& hbar = tape.layer_norm_hbar(y_node_);
    const std::size_t t = dh.extent(0);
    const std::size_t rows_per = dh.size() / (t * dim_);
    std::vector<double> gg(t * dim_, 0.0), gb(t * dim_, 0.0);
    const double* pd = dh.data();
    const double* ph = hbar.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t r = 0; r < rows_per; ++r)
            for (std::size_t j = 0; j < dim_; ++j) {
                const std::size_t idx = (i * rows_per + r) * dim_ + j;
                gg[i * dim_ + j] += pd[idx] * ph[idx];
                gb[i * dim_ + j] += pd[idx];
            }
    return {Tensor({t, dim_}, std::move(gg)), Tensor({t, dim_}, std::move(gb))};
}

// ---- Attention --------------------------------------------------------------------

Attention::Attention(std::size_t d_model, std::size_t heads, std::mt19937_64& rng)
    : d_model_(d_model), heads_(heads) {
    if (heads == 0 || d_model % heads != 0) {
        throw ContractError("attention: d_model " + std::to_string(d_model) +
                            " not divisible by heads " + std::to_string(heads));
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    wq_ = init_uniform({d_model, d_model}, bound, rng);
    wk_ = init_uniform({d_model, d_model}, bound, rng);
    wv_ = init_uniform({d_model, d_model}, bound, rng);
    wo_ = init_uniform({d_model, d_model}, bound, rng);
}

NodeId Attention::project(Tape& tape, NodeId x, NodeId w) const {
    const Shape xs = tape.shape(x);
    NodeId flat = tape.reshape(x, {xs[0] * xs[1], xs[2]});
    return tape.reshape(tape.matmul(flat, tape.transpose2d(w)), xs);
}

NodeId Attention::forward(Tape& tape, NodeId x, bool track) {
    wq_node_ = tape.param(wq_);
    wk_node_ = tape.param(wk_);
    wv_node_ = tape.param(wv_);
    wo_node_ = tape.param(wo_);
    const Shape xs = tape.shape(x);
    if (xs.size() != 3 || xs[2] != d_model_) {
        throw ShapeError("attention: expected [t, s, " + std::to_string(d_model_) + "], got " +
                         shape_str(xs));
    }
    const std::size_t t = xs[0], s = xs[1];
    const std::size_t dk = d_model_ / heads_;

    NodeId q = project(tape, x, wq_node_);
    NodeId k = project(tape, x, wk_node_);
    NodeId v = project(tape, x, wv_node_);

    auto split_heads = [&](NodeId a) {
        // [t, s, d] -> [t*h, s, dk]
        return tape.reshape(tape.transpose12(tape.reshape(a, {t, s, heads_, dk})),
                            {t * heads_, s, dk});
    };
    NodeId qh = split_heads(q);
    NodeId kh = split_heads(k);
    NodeId vh = split_heads(v);

    NodeId scores = tape.scalar_mul(tape.bmm(qh, tape.transpose_last2(kh)),
                                    1.0 / std::sqrt(static_cast<double>(dk)));
    NodeId attn = tape.softmax_rows(scores);
    NodeId hh = tape.bmm(attn, vh);  // [t*h, s, dk]
    NodeId h = tape.reshape(tape.transpose12(tape.reshape(hh, {t, heads_, s, dk})),
                            {t, s, d_model_});
    NodeId y = project(tape, h, wo_node_);

    if (track) {
        tape.retain(q);
        tape.retain(k);
        tape.retain(v);
        tape.retain(y);
        x_node_ = x;
        q_node_ = q;
        k_node_ = k;
        v_node_ = v;
        h_node_ = h;
        y_node_ = y;
        cached_ = true;
    } else {
        cached_ = false;
    }
    return y;
}

void Attention::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                      std::vector<double>& acc) const {
    if (!cached_) throw ContractError("attention: no cached forward pass");
    const Tensor& xin = tape.value(x_node_);
    AttentionPeGrads g =
        attention_pe_grad(grads.at(q_node_), grads.at(k_node_), grads.at(v_node_),
                          grads.at(y_node_), xin, xin, xin, tape.value(h_node_));
    add_sq_norms(g.grad_wq, acc);
    add_sq_norms(g.grad_wk, acc);
    add_sq_norms(g.grad_wv, acc);
    add_sq_norms(g.grad_wo, acc);
}

std::vector<Tensor> Attention::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    if (!cached_) throw ContractError("attention: no cached forward pass");
    const Tensor& xin = tape.value(x_node_);
    AttentionPeGrads g =
        attention_pe_grad(grads.at(q_node_), grads.at(k_node_), grads.at(v_node_),
                          grads.at(y_node_), xin, xin, xin, tape.value(h_node_));
    return {std::move(g.grad_wq), std::move(g.grad_wk), std::move(g.grad_wv),
            std::move(g.grad_wo)};
}

// ---- parameterless layers ------------------------------------------------------------

std::string Activation::name() const {
    switch (kind_) {
        case Kind::Sigmoid: return "sigmoid";
        case Kind::Tanh: return "tanh";
        case Kind::Relu: return "relu";
    }
    return "activation";
}

NodeId Activation::forward(Tape& tape, NodeId x, bool) {
    switch (kind_) {
        case Kind::Sigmoid: return tape.sigmoid(x);
        case Kind::Tanh: return tape.tanh(x);
        case Kind::Relu: return tape.relu(x);
    }
    throw ContractError("activation: unknown kind");
}

Embedding::Embedding(std::size_t vocab, std::size_t dim, std::mt19937_64& rng)
    : vocab_(vocab), dim_(dim) {
    table_ = init_uniform({vocab, dim}, 1.0, rng);
}

NodeId Embedding::forward(Tape& tape, NodeId x, bool) {
    const Tensor& ids = tape.value(x);
    if (ids.rank() != 2) {
        throw ShapeError("embedding: expected token ids [t, s], got " + shape_str(ids.shape()));
    }
    const std::size_t t = ids.extent(0), s = ids.extent(1);
    std::vector<double> out(t * s * dim_);
    for (std::size_t i = 0; i < t * s; ++i) {
        const auto token = static_cast<std::size_t>(ids[i]);
        if (token >= vocab_) {
            throw ContractError("embedding: token id " + std::to_string(token) +
                                " outside vocabulary of " + std::to_string(vocab_));
        }
        std::memcpy(out.data() + i * dim_, table_.data() + token * dim_, dim_ * sizeof(double));
    }
    // Frozen lookup: the embedded batch enters the tape as a fresh input.
    return tape.input(Tensor({t, s, dim_}, std::move(out)));
}

NodeId PositionalEncoding::forward(Tape& tape, NodeId x, bool) {
    const Shape xs = tape.shape(x);
    if (xs.size() != 3) {
        throw ShapeError("posenc: expected [t, s, d], got " + shape_str(xs));
    }
    const std::size_t s = xs[1], d = xs[2];
    std::vector<double> pe(s * d);
    for (std::size_t pos = 0; pos < s; ++pos)
        for (std::size_t j = 0; j < d; ++j) {
            const double angle =
                static_cast<double>(pos) /
                std::pow(10000.0, static_cast<double>(2 * (j / 2)) / static_cast<double>(d));
            pe[pos * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    NodeId pe_node = tape.constant(Tensor({s * d}, std::move(pe)));
    NodeId flat = tape.reshape(x, {xs[0], s * d});
    return tape.reshape(tape.add_rowwise(flat, pe_node), xs);
}

// ---- TransformerBlock ------------------------------------------------------------------

TransformerBlock::TransformerBlock(std::size_t d_model, std::size_t heads, std::mt19937_64& rng)
    : attn_(d_model, heads, rng), ln1_(d_model, rng), fc1_(d_model, d_model, rng),
      ln2_(d_model, rng) {}

NodeId TransformerBlock::forward(Tape& tape, NodeId x, bool track) {
    NodeId a = attn_.forward(tape, x, track);
    NodeId n1 = ln1_.forward(tape, tape.add(x, a), track);
    NodeId f = tape.relu(fc1_.forward(tape, n1, track));
    return ln2_.forward(tape, tape.add(n1, f), track);
}

std::vector<Tensor*> TransformerBlock::params() {
    std::vector<Tensor*> out;
    for (Layer* l : std::initializer_list<Layer*>{&attn_, &ln1_, &fc1_, &ln2_})
        for (Tensor* p : l->params()) out.push_back(p);
    return out;
}

std::vector<std::string> TransformerBlock::param_names() const {
    std::vector<std::string> out;
    const std::pair<const Layer*, const char*> subs[] = {
        {&attn_, "attn"}, {&ln1_, "ln1"}, {&fc1_, "fc1"}, {&ln2_, "ln2"}};
    for (const auto& [layer, prefix] : subs)
        for (const std::string& n : layer->param_names()) out.push_back(std::string(prefix) + "." + n);
    return out;
}

std::vector<NodeId> TransformerBlock::param_nodes() const {
    std::vector<NodeId> out;
    for (const Layer* l : std::initializer_list<const Layer*>{&attn_, &ln1_, &fc1_, &ln2_})
        for (NodeId id : l->param_nodes()) out.push_back(id);
    return out;
}

void TransformerBlock::accumulate_pe_sqnorms(const Tape& tape, const GradMap& grads,
                                             std::vector<double>& acc) const {
    attn_.accumulate_pe_sqnorms(tape, grads, acc);
    ln1_.accumulate_pe_sqnorms(tape, grads, acc);
    fc1_.accumulate_pe_sqnorms(tape, grads, acc);
    ln2_.accumulate_pe_sqnorms(tape, grads, acc);
}

std::vector<Tensor> TransformerBlock::pe_param_grads(const Tape& tape,
                                                     const GradMap& grads) const {
    std::vector<Tensor> out;
    for (const Layer* l : std::initializer_list<const Layer*>{&attn_, &ln1_, &fc1_, &ln2_})
        for (Tensor& g : l->pe_param_grads(tape, grads)) out.push_back(std::move(g));
    return out;
}

// ---- Model --------------------------------------------------------------------------

NodeId Model::forward(Tape& tape, const Tensor& features, bool track) {
    last_batch_ = features.extent(0);
    NodeId h = tape.input(features);
    for (auto& layer : layers_) h = layer->forward(tape, h, track);
    return h;
}

NodeId Model::per_example_losses(Tape& tape, NodeId logits,
                                 const std::vector<int>& targets) const {
    return cross_entropy_losses(tape, logits, targets);
}

std::vector<Tensor*> Model::parameters() {
    std::vector<Tensor*> out;
    for (auto& layer : layers_)
        for (Tensor* p : layer->params()) out.push_back(p);
    return out;
}

std::vector<std::string> Model::param_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        for (const std::string& n : layers_[i]->param_names())
            out.push_back(std::to_string(i) + "." + layers_[i]->name() + "." + n);
    return out;
}

std::vector<NodeId> Model::param_nodes() const {
    std::vector<NodeId> out;
    for (const auto& layer : layers_)
        for (NodeId id : layer->param_nodes()) out.push_back(id);
    return out;
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_)
        for (const Tensor* p : const_cast<Layer*>(layer.get())->params()) n += p->size();
    return n;
}

Tensor Model::pe_sqnorms(const Tape& tape, const GradMap& grads) const {
    std::vector<double> acc(last_batch_, 0.0);
    for (const auto& layer : layers_) layer->accumulate_pe_sqnorms(tape, grads, acc);
    return Tensor({last_batch_}, std::move(acc));
}

std::vector<Tensor> Model::pe_param_grads(const Tape& tape, const GradMap& grads) const {
    std::vector<Tensor> out;
    for (const auto& layer : layers_)
        for (Tensor& g : layer->pe_param_grads(tape, grads)) out.push_back(std::move(g));
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> Model::layer_param_ranges() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t idx = 0;
    for (const auto& layer : layers_) {
        const std::size_t n = layer->param_names().size();
        if (n > 0) out.emplace_back(idx, idx + n);
        idx += n;
    }
    return out;
}

NodeId cross_entropy_losses(Tape& tape, NodeId logits, const std::vector<int>& targets) {
    NodeId log_probs = tape.log(tape.softmax_rows(logits));
    return tape.scalar_mul(tape.pick_rows(log_probs, targets), -1.0);
}

// ---- serialization ---------------------------------------------------------------------

namespace {

void write_doubles_le(std::ofstream& out, const Tensor& t) {
    static_assert(sizeof(double) == 8);
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * 8));
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits;
            double v = t[i];
            std::memcpy(&bits, &v, 8);
            bits = __builtin_bswap64(bits);
            out.write(reinterpret_cast<const char*>(&bits), 8);
        }
    }
}

std::vector<double> read_doubles_le(std::ifstream& in, std::size_t count) {
    std::vector<double> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 8));
    if (!in) throw Error("parameter blob truncated");
    if constexpr (std::endian::native != std::endian::little) {
        for (double& v : buf) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            bits = __builtin_bswap64(bits);
            std::memcpy(&v, &bits, 8);
        }
    }
    return buf;
}

}  // namespace

void save_parameters(Model& model, const std::string& bin_path,
                     const std::string& manifest_path) {
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("cannot open " + bin_path + " for writing");
    auto params = model.parameters();
    auto names = model.param_names();
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        write_doubles_le(bin, *params[i]);
        manifest.push_back({{"name", names[i]},
                            {"shape", params[i]->shape()},
                            {"offset", offset}});
        offset += params[i]->size() * 8;
    }
    std::ofstream mf(manifest_path);
    if (!mf) throw Error("cannot open " + manifest_path + " for writing");
    mf << manifest.dump(2) << "\n";
}

void load_parameters(Model& model, const std::string& bin_path,
                     const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw Error("cannot open " + manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    auto params = model.parameters();
    auto names = model.param_names();
    if (manifest.size() != params.size()) {
        throw Error("manifest lists " + std::to_string(manifest.size()) + " tensors, model has " +
                    std::to_string(params.size()));
    }
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw Error("cannot open " + bin_path);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = manifest[i];
        if (entry.at("name").get<std::string>() != names[i]) {
            throw Error("manifest entry " + std::to_string(i) + " names " +
                        entry.at("name").get<std::string>() + ", model expects " + names[i]);
        }
        Shape shape = entry.at("shape").get<Shape>();
        if (shape != params[i]->shape()) {
            throw Error("manifest shape mismatch for " + names[i]);
        }
        *params[i] = Tensor(shape, read_doubles_le(bin, params[i]->size()));
    }
}

}  // namespace fastgc
