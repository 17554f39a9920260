#include "fastgc/clipping.hpp"

#include <cmath>
#include <cstring>

namespace fastgc {

Strategy strategy_from_string(const std::string& name) {
    if (name == "nonprivate") return Strategy::NonPrivate;
    if (name == "nxbp") return Strategy::NxBp;
    if (name == "multiloss") return Strategy::MultiLoss;
    if (name == "reweight") return Strategy::Reweight;
    throw ContractError("unknown strategy '" + name +
                        "' (expected nonprivate|nxbp|multiloss|reweight)");
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::NonPrivate: return "nonprivate";
        case Strategy::NxBp: return "nxbp";
        case Strategy::MultiLoss: return "multiloss";
        case Strategy::Reweight: return "reweight";
    }
    return "?";
}

Tensor clip(const Tensor& g, double c) {
    if (c <= 0.0) throw DomainError("clip: threshold must be positive");
    const double norm = std::sqrt(sq_norm_all(g));
    if (norm <= c) return g;
    return scalar_mul(g, c / norm);
}

Tensor clip_weights(const Tensor& norms, double c) {
    if (c <= 0.0) throw DomainError("clip_weights: threshold must be positive");
    std::vector<double> out(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) {
        const double n = norms[i];
        out[i] = (n <= c) ? 1.0 : c / n;  // zero norm -> weight 1
    }
    return Tensor(norms.shape(), std::move(out));
}

Tensor flatten_grads(const std::vector<Tensor>& grads) {
    std::size_t total = 0;
    for (const Tensor& g : grads) total += g.size();
    std::vector<double> out(total);
    std::size_t off = 0;
    for (const Tensor& g : grads) {
        std::memcpy(out.data() + off, g.data(), g.size() * sizeof(double));
        off += g.size();
    }
    return Tensor({total}, std::move(out));
}

namespace {

std::vector<Tensor> collect_param_grads(const GradMap& gm, const std::vector<NodeId>& nodes) {
    std::vector<Tensor> out;
    out.reserve(nodes.size());
    for (NodeId id : nodes) out.push_back(gm.at(id));
    return out;
}

double grads_norm(const std::vector<Tensor>& grads, std::size_t first, std::size_t last) {
    double sq = 0.0;
    for (std::size_t i = first; i < last; ++i) sq += sq_norm_all(grads[i]);
    return std::sqrt(sq);
}

// Clip scale factors for one example's materialized gradient, either one
// global factor or one per layer (threshold c / sqrt(#layers)).
std::vector<double> clip_scales(const std::vector<Tensor>& grads, double c, bool per_layer,
                                const std::vector<std::pair<std::size_t, std::size_t>>& ranges) {
    std::vector<double> scales(grads.size(), 1.0);
    if (!per_layer) {
        const double norm = grads_norm(grads, 0, grads.size());
        const double s = norm > c ? c / norm : 1.0;
        for (double& v : scales) v = s;
        return scales;
    }
    const double layer_c = c / std::sqrt(static_cast<double>(ranges.size()));
    for (const auto& [first, last] : ranges) {
        const double norm = grads_norm(grads, first, last);
        const double s = norm > layer_c ? layer_c / norm : 1.0;
        for (std::size_t i = first; i < last; ++i) scales[i] = s;
    }
    return scales;
}

void require_pe_support(const Model& model) {
    for (const auto& layer : model.layers()) {
        if (!layer->supports_pe_norms()) {
            throw CapabilityError("layer '" + layer->name() +
                                  "' does not support per-example gradient norms");
        }
    }
}

}  // namespace

std::vector<Tensor> nonprivate_gradient(Model& model, const Batch& batch) {
    Tape tape;
    NodeId logits = model.forward(tape, batch.features, /*track=*/false);
    NodeId losses = model.per_example_losses(tape, logits, batch.targets);
    GradMap gm = backward(tape, tape.mean_all(losses));
    return collect_param_grads(gm, model.param_nodes());
}

std::vector<Tensor> nxbp_strategy(Model& model, const Batch& batch, double c, bool per_layer) {
    const std::size_t tau = batch.size();
    const double inv_tau = 1.0 / static_cast<double>(tau);
    std::vector<Tensor> acc;
    auto ranges = model.layer_param_ranges();
    // One forward and one backward per example, strictly sequential.
    for (std::size_t i = 0; i < tau; ++i) {
        Batch one = batch.select(i);
        Tape tape;
        NodeId logits = model.forward(tape, one.features, /*track=*/false);
        NodeId losses = model.per_example_losses(tape, logits, one.targets);
        GradMap gm = backward(tape, losses);  // [1] is already scalar
        std::vector<Tensor> grads = collect_param_grads(gm, model.param_nodes());
        std::vector<double> scales = clip_scales(grads, c, per_layer, ranges);
        if (acc.empty()) acc.assign(grads.size(), Tensor());
        for (std::size_t p = 0; p < grads.size(); ++p) {
            Tensor scaled = scalar_mul(grads[p], scales[p] * inv_tau);
            acc[p] = acc[p].empty() ? std::move(scaled) : add(acc[p], scaled);
        }
    }
    return acc;
}

std::vector<Tensor> multiloss_strategy(Model& model, const Batch& batch, double c,
                                       bool per_layer) {
    const std::size_t tau = batch.size();
    const double inv_tau = 1.0 / static_cast<double>(tau);
    Tape tape;
    NodeId logits = model.forward(tape, batch.features, /*track=*/false);
    NodeId losses = model.per_example_losses(tape, logits, batch.targets);
    std::vector<NodeId> loss_ids;
    loss_ids.reserve(tau);
    for (std::size_t i = 0; i < tau; ++i) loss_ids.push_back(tape.index_scalar(losses, i));
    std::vector<GradMap> gms = backward_per_example(tape, loss_ids);

    auto nodes = model.param_nodes();
    auto ranges = model.layer_param_ranges();
    std::vector<Tensor> acc;
    for (const GradMap& gm : gms) {
        std::vector<Tensor> grads = collect_param_grads(gm, nodes);
        std::vector<double> scales = clip_scales(grads, c, per_layer, ranges);
        if (acc.empty()) acc.assign(grads.size(), Tensor());
        for (std::size_t p = 0; p < grads.size(); ++p) {
            Tensor scaled = scalar_mul(grads[p], scales[p] * inv_tau);
            acc[p] = acc[p].empty() ? std::move(scaled) : add(acc[p], scaled);
        }
    }
    return acc;
}

std::vector<Tensor> reweight_strategy(Model& model, const Batch& batch, double c,
                                      bool per_layer) {
    require_pe_support(model);
    const std::size_t tau = batch.size();
    const double inv_tau = 1.0 / static_cast<double>(tau);

    Tape tape;
    NodeId logits = model.forward(tape, batch.features, /*track=*/true);
    NodeId losses = model.per_example_losses(tape, logits, batch.targets);
    // Backward from the SUM of losses so retained pre-activation gradients are
    // per-example gradients directly, with no 1/tau to undo.
    GradMap pass1 = backward(tape, tape.sum_all(losses));

    if (!per_layer) {
        Tensor sq = model.pe_sqnorms(tape, pass1);
        std::vector<double> norms(sq.size());
        for (std::size_t i = 0; i < sq.size(); ++i) norms[i] = std::sqrt(sq[i]);
        Tensor nu = clip_weights(Tensor({tau}, std::move(norms)), c);
        // nu enters pass 2 as constants: the dependency on theta is severed.
        GradMap pass2 = backward(tape, tape.weighted_sum(losses, scalar_mul(nu, inv_tau)));
        return collect_param_grads(pass2, model.param_nodes());
    }

    // Per-layer mode: materialize per-example gradients layer by layer from the
    // same closed forms and apply per-layer weights directly.
    const auto ranges = model.layer_param_ranges();
    const auto params = model.parameters();
    const double layer_c = c / std::sqrt(static_cast<double>(ranges.size()));
    std::vector<Tensor> out(params.size());
    std::size_t range_idx = 0;
    for (const auto& layer : model.layers()) {
        if (layer->param_names().empty()) continue;
        const auto [first, last] = ranges[range_idx++];
        std::vector<double> sq(tau, 0.0);
        layer->accumulate_pe_sqnorms(tape, pass1, sq);
        std::vector<Tensor> pe = layer->pe_param_grads(tape, pass1);
        std::vector<double> w(tau);
        for (std::size_t i = 0; i < tau; ++i) {
            const double norm = std::sqrt(sq[i]);
            w[i] = (norm > layer_c ? layer_c / norm : 1.0) * inv_tau;
        }
        for (std::size_t p = 0; p < pe.size(); ++p) {
            const Tensor& g = pe[p];
            const std::size_t per = g.size() / tau;
            std::vector<double> sum(per, 0.0);
            for (std::size_t i = 0; i < tau; ++i) {
                const double wi = w[i];
                const double* row = g.data() + i * per;
                for (std::size_t j = 0; j < per; ++j) sum[j] += wi * row[j];
            }
            // materialized kernel grads may carry flattened trailing dims
            out[first + p] = Tensor(params[first + p]->shape(), std::move(sum));
        }
    }
    return out;
}

std::vector<Tensor> clipped_batch_gradient(Model& model, const Batch& batch,
                                           const ClipConfig& config) {
    if (batch.size() == 0) throw ContractError("clipped_batch_gradient: empty batch");
    if (config.c <= 0.0 && config.strategy != Strategy::NonPrivate) {
        throw DomainError("clipped_batch_gradient: clip threshold must be positive");
    }
    switch (config.strategy) {
        case Strategy::NonPrivate: return nonprivate_gradient(model, batch);
        case Strategy::NxBp: return nxbp_strategy(model, batch, config.c, config.per_layer);
        case Strategy::MultiLoss:
            return multiloss_strategy(model, batch, config.c, config.per_layer);
        case Strategy::Reweight:
            return reweight_strategy(model, batch, config.c, config.per_layer);
    }
    throw ContractError("clipped_batch_gradient: unknown strategy");
}

}  // namespace fastgc
