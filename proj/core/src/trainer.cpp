#include "fastgc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace fastgc {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t step) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (step + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

void apply_update(Model& model, const std::vector<Tensor>& grads, const TrainConfig& config,
                  OptimizerState& state) {
    auto params = model.parameters();
    state.step += 1;
    if (config.optimizer == Optimizer::Sgd) {
        for (std::size_t p = 0; p < params.size(); ++p) {
            *params[p] = axpy(*params[p], grads[p], -config.lr);
        }
        return;
    }
    // Adam; moments updated in place to keep the per-step cost flat
    if (state.m.empty()) {
        for (const Tensor* t : params) {
            state.m.emplace_back(t->size(), 0.0);
            state.v.emplace_back(t->size(), 0.0);
        }
    }
    const double b1 = config.adam.beta1, b2 = config.adam.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor& g = grads[p];
        double* m = state.m[p].data();
        double* v = state.v[p].data();
        std::vector<double> upd(g.size());
        const double* theta = params[p]->data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = m[i] / corr1;
            const double vhat = v[i] / corr2;
            upd[i] = theta[i] - config.lr * mhat / (std::sqrt(vhat) + config.adam.eps_hat);
        }
        *params[p] = Tensor(params[p]->shape(), std::move(upd));
    }
}

}  // namespace

void train_step(Model& model, const Batch& batch, const TrainConfig& config, RdpLedger& ledger,
                OptimizerState& state) {
    ClipConfig clip_cfg{config.clip_c, config.strategy, config.per_layer_clip};
    std::vector<Tensor> grads = clipped_batch_gradient(model, batch, clip_cfg);

    if (config.strategy != Strategy::NonPrivate) {
        const double tau = static_cast<double>(batch.size());
        const double sensitivity = config.clip_c / tau;
        const double applied_std = config.noise_scale == NoiseScale::Absolute
                                       ? config.sigma
                                       : config.sigma * sensitivity;
        if (applied_std > 0.0) {
            grads = add_noise(grads, applied_std, mix_seed(config.seed, state.step));
        }
        compose(ledger, gaussian_step_eps(ledger, applied_std, sensitivity));
    }
    apply_update(model, grads, config, state);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t tau,
                                                    std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start + tau <= n; start += tau) {
        batches.emplace_back(order.begin() + start, order.begin() + start + tau);
    }
    return batches;
}

EvalResult evaluate(Model& model, const Dataset& dataset) {
    if (dataset.size() == 0) throw ContractError("evaluate: empty dataset");
    constexpr std::size_t kEvalBatch = 256;
    std::size_t correct = 0;
    double loss_sum = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < dataset.size(); start += kEvalBatch) {
        const std::size_t end = std::min(dataset.size(), start + kEvalBatch);
        idx.clear();
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        Batch batch = gather(dataset, idx);
        Tape tape;
        NodeId logits_id = model.forward(tape, batch.features, /*track=*/false);
        NodeId losses_id = model.per_example_losses(tape, logits_id, batch.targets);
        const Tensor& logits = tape.value(logits_id);
        const Tensor& losses = tape.value(losses_id);
        const std::size_t classes = logits.extent(1);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c) {
                if (logits.at2(i, c) > logits.at2(i, best)) best = c;
            }
            if (static_cast<int>(best) == batch.targets[i]) ++correct;
            loss_sum += losses[i];
        }
    }
    const double n = static_cast<double>(dataset.size());
    return {static_cast<double>(correct) / n, loss_sum / n};
}

TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& config_in) {
    if (dataset.size() == 0) throw ContractError("train: empty dataset");
    TrainConfig config = config_in;
    const std::size_t steps_per_epoch = dataset.size() / config.batch_size;

    if (config.calibrate && config.strategy != Strategy::NonPrivate) {
        const double sensitivity = config.clip_c / static_cast<double>(config.batch_size);
        config.sigma = calibrate_sigma(config.target_eps, config.delta,
                                       std::max<std::size_t>(1, config.epochs * steps_per_epoch),
                                       sensitivity, RdpLedger::default_alphas());
        config.noise_scale = NoiseScale::Absolute;
    }

    TrainResult result;
    result.sigma_used = config.sigma;
    OptimizerState state;
    std::mt19937_64 shuffle_rng(config.seed);

    std::ofstream csv;
    if (!config.metrics_csv.empty()) {
        const bool fresh = !std::ifstream(config.metrics_csv).good();
        csv.open(config.metrics_csv, std::ios::app);
        if (fresh) csv << "epoch,wall_seconds,loss,accuracy,eps_prime\n";
    }

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& idx : epoch_batches(dataset.size(), config.batch_size, shuffle_rng)) {
            Batch batch = gather(dataset, idx);
            train_step(model, batch, config, result.ledger, state);
        }
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        EvalResult eval = evaluate(model, dataset);
        const double eps_prime = config.strategy == Strategy::NonPrivate
                                     ? std::numeric_limits<double>::infinity()
                                     : to_dp(result.ledger, config.delta).eps_prime;
        result.log.push_back({epoch, wall, eval.mean_loss, eval.accuracy, eps_prime});
        if (csv.is_open()) {
            csv << epoch << ',' << wall << ',' << eval.mean_loss << ',' << eval.accuracy << ','
                << eps_prime << '\n';
        }
    }
    return result;
}

// ---- config JSON -----------------------------------------------------------

namespace {

Optimizer optimizer_from_string(const std::string& s) {
    if (s == "sgd") return Optimizer::Sgd;
    if (s == "adam") return Optimizer::Adam;
    throw ContractError("unknown optimizer '" + s + "'");
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TrainConfig c;
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("clip")) c.clip_c = j["clip"].get<double>();
    if (j.contains("sigma")) c.sigma = j["sigma"].get<double>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j["optimizer"]);
    if (j.contains("beta1")) c.adam.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) c.adam.beta2 = j["beta2"].get<double>();
    if (j.contains("adam_eps")) c.adam.eps_hat = j["adam_eps"].get<double>();
    if (j.contains("method")) c.strategy = strategy_from_string(j["method"]);
    if (j.contains("per_layer_clip")) c.per_layer_clip = j["per_layer_clip"].get<bool>();
    if (j.contains("noise_scale")) {
        const std::string s = j["noise_scale"];
        if (s == "absolute") {
            c.noise_scale = NoiseScale::Absolute;
        } else if (s == "relative") {
            c.noise_scale = NoiseScale::Relative;
        } else {
            throw ContractError("noise_scale must be absolute|relative, got '" + s + "'");
        }
    }
    if (j.contains("delta")) c.delta = j["delta"].get<double>();
    if (j.contains("target_eps")) {
        c.calibrate = true;
        c.target_eps = j["target_eps"].get<double>();
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("metrics_csv")) c.metrics_csv = j["metrics_csv"].get<std::string>();

    if (c.batch_size < 1 || c.lr <= 0.0 || c.clip_c <= 0.0 || c.sigma < 0.0 ||
        c.adam.beta1 < 0.0 || c.adam.beta1 >= 1.0 || c.adam.beta2 < 0.0 || c.adam.beta2 >= 1.0) {
        throw ContractError("train config violates parameter bounds");
    }
    return c;
}

std::string to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["clip"] = c.clip_c;
    j["sigma"] = c.sigma;
    j["lr"] = c.lr;
    j["optimizer"] = c.optimizer == Optimizer::Sgd ? "sgd" : "adam";
    j["beta1"] = c.adam.beta1;
    j["beta2"] = c.adam.beta2;
    j["adam_eps"] = c.adam.eps_hat;
    j["method"] = to_string(c.strategy);
    j["per_layer_clip"] = c.per_layer_clip;
    j["noise_scale"] = c.noise_scale == NoiseScale::Absolute ? "absolute" : "relative";
    j["delta"] = c.delta;
    if (c.calibrate) j["target_eps"] = c.target_eps;
    j["seed"] = c.seed;
    if (!c.metrics_csv.empty()) j["metrics_csv"] = c.metrics_csv;
    return j.dump(2);
}

}  // namespace fastgc
