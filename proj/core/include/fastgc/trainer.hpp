#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fastgc/clipping.hpp"
#include "fastgc/data.hpp"
#include "fastgc/privacy.hpp"

namespace fastgc {

enum class Optimizer { Sgd, Adam };

/// How the configured sigma is interpreted: Absolute adds N(0, sigma^2) to the
/// (1/tau)-scaled gradient; Relative scales it by the sensitivity, adding
/// N(0, (sigma * c / tau)^2). The ledger always accounts the applied std.
enum class NoiseScale { Absolute, Relative };

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_hat = 1e-8;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double clip_c = 1.0;
    double sigma = 0.05;
    double lr = 0.001;
    Optimizer optimizer = Optimizer::Adam;
    AdamParams adam;
    Strategy strategy = Strategy::Reweight;
    bool per_layer_clip = false;
    NoiseScale noise_scale = NoiseScale::Absolute;
    double delta = 1e-5;  // for eps' reporting
    // When set, sigma is calibrated up front for (target_eps, delta) over the
    // planned number of steps and overrides the sigma field.
    bool calibrate = false;
    double target_eps = 1.0;
    std::uint64_t seed = 42;
    std::string metrics_csv;  // append per-epoch rows when non-empty
};

/// Parse / emit the run configuration as a JSON document.
TrainConfig train_config_from_json(const std::string& text);
std::string to_json(const TrainConfig& config);

struct OptimizerState {
    std::vector<std::vector<double>> m, v;  // Adam moments, mutated in place
    std::size_t step = 0;
};

struct EpochMetrics {
    std::size_t epoch;
    double wall_seconds;
    double loss;
    double accuracy;
    double eps_prime;
};

struct TrainResult {
    std::vector<EpochMetrics> log;
    RdpLedger ledger;
    double sigma_used = 0.0;
};

struct EvalResult {
    double accuracy;
    double mean_loss;
};

/// One optimization step: clipped (or plain) batch gradient, Gaussian noise,
/// optimizer update, ledger composition (skipped for NonPrivate).
void train_step(Model& model, const Batch& batch, const TrainConfig& config, RdpLedger& ledger,
                OptimizerState& state);

/// Full loop: per-epoch shuffle, partition into size-tau chunks (short tail
/// dropped), per-epoch wall time / loss / accuracy / eps'.
TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& config);

/// Forward-only pass; no caches retained, no privacy cost.
EvalResult evaluate(Model& model, const Dataset& dataset);

/// Shuffled epoch order partitioned into size-tau batches (tail dropped).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t tau,
                                                    std::mt19937_64& rng);

}  // namespace fastgc
