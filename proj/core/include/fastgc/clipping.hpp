#pragma once

#include <string>
#include <vector>

#include "fastgc/data.hpp"
#include "fastgc/layers.hpp"

namespace fastgc {

/// How the clipped batch gradient is computed. All private strategies produce
/// the same result (up to float noise); they differ only in cost.
enum class Strategy {
    NonPrivate,  // unclipped mean gradient, one backward pass
    NxBp,        // one forward + backward per example, clip materialized grads
    MultiLoss,   // one forward, per-example backward sweeps, clip materialized grads
    Reweight,    // one forward + two backwards via per-example loss weights
};

Strategy strategy_from_string(const std::string& name);
std::string to_string(Strategy s);

struct ClipConfig {
    double c = 1.0;
    Strategy strategy = Strategy::Reweight;
    /// Clip each layer's gradient separately with threshold c / sqrt(#layers).
    bool per_layer = false;
};

/// clip_c(g) = g / max(1, |g|_2 / c). Zero maps to zero.
Tensor clip(const Tensor& g, double c);

/// Per-example weights nu_i = min(1, c / norms[i]); zero norm maps to 1.
Tensor clip_weights(const Tensor& norms, double c);

/// (1/tau) * sum_i clip_c(grad l_i), dispatched to the configured strategy;
/// NonPrivate returns the unclipped mean gradient. Results are aligned with
/// model.parameters().
std::vector<Tensor> clipped_batch_gradient(Model& model, const Batch& batch,
                                           const ClipConfig& config);

// Individual strategies, exposed for cross-checking.
std::vector<Tensor> nonprivate_gradient(Model& model, const Batch& batch);
std::vector<Tensor> nxbp_strategy(Model& model, const Batch& batch, double c,
                                  bool per_layer = false);
std::vector<Tensor> multiloss_strategy(Model& model, const Batch& batch, double c,
                                       bool per_layer = false);
std::vector<Tensor> reweight_strategy(Model& model, const Batch& batch, double c,
                                      bool per_layer = false);

/// Concatenate gradient tensors into one flat vector.
Tensor flatten_grads(const std::vector<Tensor>& grads);

}  // namespace fastgc
