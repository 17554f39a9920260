#pragma once

// Test-only oracles: brute-force reference implementations kept independent of
// the kernels and closed forms they check.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fastgc/bench.hpp"
#include "fastgc/clipping.hpp"
#include "fastgc/trainer.hpp"

namespace testsupport {

using namespace fastgc;

inline Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> buf(n);
    for (double& v : buf) v = dist(rng);
    return Tensor(std::move(shape), std::move(buf));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// max_i |a_i - b_i| / max(|b_i|, floor)
inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-9) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor));
    }
    return m;
}

// ---- brute-force kernel oracles ------------------------------------------------

/// Triple-loop matmul applied per batch index.
inline Tensor naive_bmm(const Tensor& a, const Tensor& b) {
    const std::size_t t = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    std::vector<double> out(t * m * n, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j) acc += a.at3(i, r, j) * b.at3(i, j, c);
                out[(i * m + r) * n + c] = acc;
            }
    return Tensor({t, m, n}, std::move(out));
}

/// Elementwise u[i][a] * v[i][b].
inline Tensor naive_outer_batch(const Tensor& u, const Tensor& v) {
    const std::size_t t = u.extent(0), m = u.extent(1), n = v.extent(1);
    std::vector<double> out(t * m * n);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < n; ++b) out[(i * m + a) * n + b] = u.at2(i, a) * v.at2(i, b);
    return Tensor({t, m, n}, std::move(out));
}

/// Index-arithmetic patch extraction (no padding).
inline Tensor naive_im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride) {
    const std::size_t t = x.extent(0), c = x.extent(1), sh = x.extent(2), sw = x.extent(3);
    const std::size_t oh = (sh - kh) / stride + 1, ow = (sw - kw) / stride + 1;
    const std::size_t p = oh * ow, l = kh * kw * c;
    std::vector<double> out(t * p * l);
    const double* px = x.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t z = 0; z < ow; ++z) {
                std::size_t col = 0;
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t dy = 0; dy < kh; ++dy)
                        for (std::size_t dx = 0; dx < kw; ++dx, ++col) {
                            out[(i * p + y * ow + z) * l + col] =
                                px[((i * c + ch) * sh + y * stride + dy) * sw + z * stride + dx];
                        }
            }
    return Tensor({t, p, l}, std::move(out));
}

/// Direct valid convolution of one batch with kernel [c_out, c_in, kh, kw].
inline Tensor naive_conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride) {
    const std::size_t t = x.extent(0), c_in = x.extent(1), sh = x.extent(2), sw = x.extent(3);
    const std::size_t c_out = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
    const std::size_t oh = (sh - kh) / stride + 1, ow = (sw - kw) / stride + 1;
    std::vector<double> out(t * c_out * oh * ow, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t co = 0; co < c_out; ++co)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t z = 0; z < ow; ++z) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < c_in; ++ci)
                        for (std::size_t dy = 0; dy < kh; ++dy)
                            for (std::size_t dx = 0; dx < kw; ++dx)
                                acc += x.data()[((i * c_in + ci) * sh + y * stride + dy) * sw +
                                                z * stride + dx] *
                                       kernel.data()[((co * c_in + ci) * kh + dy) * kw + dx];
                    out[((i * c_out + co) * oh + y) * ow + z] = acc;
                }
    return Tensor({t, c_out, oh, ow}, std::move(out));
}

// ---- model-level oracles --------------------------------------------------------

/// Sum of per-example cross-entropy losses for the current parameters.
inline double model_loss_sum(Model& model, const Batch& batch) {
    Tape tape;
    NodeId logits = model.forward(tape, batch.features, false);
    NodeId losses = model.per_example_losses(tape, logits, batch.targets);
    return sum_all(tape.value(losses));
}

/// Central finite differences of the summed loss w.r.t. one parameter tensor.
inline Tensor fd_grad(Model& model, Tensor* param, const Batch& batch, double h = 1e-6) {
    const Tensor original = *param;
    std::vector<double> g(param->size());
    for (std::size_t i = 0; i < original.size(); ++i) {
        std::vector<double> bumped(original.vec());
        bumped[i] += h;
        *param = Tensor(original.shape(), bumped);
        const double up = model_loss_sum(model, batch);
        bumped[i] -= 2 * h;
        *param = Tensor(original.shape(), std::move(bumped));
        const double down = model_loss_sum(model, batch);
        g[i] = (up - down) / (2 * h);
    }
    *param = original;
    return Tensor(original.shape(), std::move(g));
}

/// Per-example gradient norms via the fast route: one batched backward over
/// retained pre-activations plus the layer closed forms.
inline Tensor fast_pe_norms(Model& model, const Batch& batch) {
    Tape tape;
    NodeId logits = model.forward(tape, batch.features, true);
    NodeId losses = model.per_example_losses(tape, logits, batch.targets);
    GradMap grads = backward(tape, tape.sum_all(losses));
    Tensor sq = model.pe_sqnorms(tape, grads);
    std::vector<double> out(sq.size());
    for (std::size_t i = 0; i < sq.size(); ++i) out[i] = std::sqrt(sq[i]);
    return Tensor({sq.size()}, std::move(out));
}

/// Per-example gradient norms via the naive route: one backward sweep per
/// example over the shared tape, materializing every parameter gradient.
inline Tensor oracle_pe_norms(Model& model, const Batch& batch) {
    Tape tape;
    NodeId logits = model.forward(tape, batch.features, false);
    NodeId losses = model.per_example_losses(tape, logits, batch.targets);
    std::vector<NodeId> ids;
    for (std::size_t i = 0; i < batch.size(); ++i) ids.push_back(tape.index_scalar(losses, i));
    std::vector<GradMap> gms = backward_per_example(tape, ids);
    auto nodes = model.param_nodes();
    std::vector<double> norms(batch.size());
    for (std::size_t i = 0; i < gms.size(); ++i) {
        double sq = 0.0;
        for (NodeId id : nodes) sq += sq_norm_all(gms[i].at(id));
        norms[i] = std::sqrt(sq);
    }
    return Tensor({batch.size()}, std::move(norms));
}

// ---- random model builders, one per layer family ---------------------------------

struct FamilyCase {
    Model model;
    Batch batch;
};

inline Batch random_batch(Shape feature_shape, std::size_t classes, std::mt19937_64& rng,
                          double scale = 1.0) {
    const std::size_t tau = feature_shape[0];
    std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
    Batch b;
    b.features = rand_tensor(std::move(feature_shape), rng, scale);
    b.targets.resize(tau);
    for (int& t : b.targets) t = cls(rng);
    return b;
}

inline FamilyCase make_linear_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 16), n_d(3, 12), m_d(3, 12);
    const std::size_t tau = tau_d(rng), n = n_d(rng), m = m_d(rng), k = 4;
    Model model;
    model.add(std::make_unique<Linear>(n, m, rng));
    model.add(std::make_unique<Activation>(Activation::Kind::Sigmoid));
    model.add(std::make_unique<Linear>(m, k, rng));
    return {std::move(model), random_batch({tau, n}, k, rng)};
}

inline FamilyCase make_conv_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 8);
    const std::size_t tau = tau_d(rng), c1 = 2, c2 = 3, s = 7, kk = 3, k = 3;
    Model model;
    model.add(std::make_unique<Conv2d>(c1, c2, kk, kk, rng));
    model.add(std::make_unique<Activation>(Activation::Kind::Relu));
    model.add(std::make_unique<Flatten>());
    model.add(std::make_unique<Linear>(c2 * (s - kk + 1) * (s - kk + 1), k, rng));
    return {std::move(model), random_batch({tau, c1, s, s}, k, rng)};
}

inline FamilyCase make_conv3d_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 4);
    const std::size_t tau = tau_d(rng), c1 = 2, c2 = 2, s = 4, kk = 2, k = 3;
    Model model;
    model.add(std::make_unique<Conv3d>(c1, c2, kk, rng));
    model.add(std::make_unique<Activation>(Activation::Kind::Tanh));
    model.add(std::make_unique<Flatten>());
    const std::size_t o = s - kk + 1;
    model.add(std::make_unique<Linear>(c2 * o * o * o, k, rng));
    return {std::move(model), random_batch({tau, c1, s, s, s}, k, rng)};
}

inline FamilyCase make_rnn_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 8), t_d(2, 6);
    const std::size_t tau = tau_d(rng), steps = t_d(rng), n = 5, m = 6, k = 3;
    Model model;
    model.add(std::make_unique<Rnn>(n, m, rng));
    model.add(std::make_unique<Linear>(m, k, rng));
    return {std::move(model), random_batch({tau, steps, n}, k, rng)};
}

inline FamilyCase make_lstm_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 8), t_d(2, 5);
    const std::size_t tau = tau_d(rng), steps = t_d(rng), n = 4, m = 5, k = 3;
    Model model;
    model.add(std::make_unique<Lstm>(n, m, rng));
    model.add(std::make_unique<Linear>(m, k, rng));
    return {std::move(model), random_batch({tau, steps, n}, k, rng)};
}

inline FamilyCase make_layernorm_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 16);
    const std::size_t tau = tau_d(rng), n = 8, m = 16, k = 3;
    Model model;
    model.add(std::make_unique<Linear>(n, m, rng));
    model.add(std::make_unique<LayerNorm>(m, rng));
    model.add(std::make_unique<Activation>(Activation::Kind::Sigmoid));
    model.add(std::make_unique<Linear>(m, k, rng));
    return {std::move(model), random_batch({tau, n}, k, rng)};
}

inline FamilyCase make_attention_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 4);
    const std::size_t tau = tau_d(rng), s = 4, d = 8, heads = 2, k = 3;
    Model model;
    model.add(std::make_unique<Attention>(d, heads, rng));
    model.add(std::make_unique<MeanPoolSeq>());
    model.add(std::make_unique<Linear>(d, k, rng));
    return {std::move(model), random_batch({tau, s, d}, k, rng)};
}

inline FamilyCase make_transformer_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 4);
    const std::size_t tau = tau_d(rng), s = 4, d = 8, heads = 2, k = 3;
    Model model;
    model.add(std::make_unique<TransformerBlock>(d, heads, rng));
    model.add(std::make_unique<MeanPoolSeq>());
    model.add(std::make_unique<Linear>(d, k, rng));
    return {std::move(model), random_batch({tau, s, d}, k, rng)};
}

inline FamilyCase make_maxpool_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> tau_d(2, 6);
    const std::size_t tau = tau_d(rng), k = 3;
    Model model;
    model.add(std::make_unique<Conv2d>(1, 2, 3, 3, rng));
    model.add(std::make_unique<Activation>(Activation::Kind::Relu));
    model.add(std::make_unique<MaxPool2d>(2, 2));
    model.add(std::make_unique<Flatten>());
    model.add(std::make_unique<Linear>(2 * 3 * 3, k, rng));
    return {std::move(model), random_batch({tau, 1, 8, 8}, k, rng)};
}

}  // namespace testsupport
