#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastgc/tensor.hpp"

namespace fastgc {

/// Multi-alpha RDP ledger: per-alpha epsilon accumulated across training steps.
class RdpLedger {
public:
    RdpLedger() : RdpLedger(default_alphas()) {}
    explicit RdpLedger(std::vector<double> alphas);

    static std::vector<double> default_alphas() {
        return {1.25, 1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0};
    }

    const std::vector<double>& alphas() const { return alphas_; }
    const std::vector<double>& eps_acc() const { return eps_acc_; }
    std::size_t steps() const { return steps_; }

private:
    friend void compose(RdpLedger& ledger, const std::vector<double>& step_eps);
    std::vector<double> alphas_;
    std::vector<double> eps_acc_;
    std::size_t steps_ = 0;
};

/// Gaussian mechanism RDP cost: eps = alpha * sensitivity^2 / (2 sigma^2).
double gaussian_rdp_eps(double sigma, double sensitivity, double alpha);

/// Per-alpha RDP of one Gaussian step on the ledger's alpha grid.
std::vector<double> gaussian_step_eps(const RdpLedger& ledger, double sigma, double sensitivity);

/// Add one step's per-alpha epsilons (same grid) to the ledger.
void compose(RdpLedger& ledger, const std::vector<double>& step_eps);

struct DpBound {
    double eps_prime;
    double best_alpha;
};

/// Convert the ledger to (eps', delta)-DP: minimize eps(alpha) + log(1/delta)/(alpha-1)
/// over the grid. Ties break toward the smaller alpha.
DpBound to_dp(const RdpLedger& ledger, double delta);

/// Smallest sigma (to relative 1e-4) such that `steps` Gaussian releases at
/// that sigma still satisfy eps' <= target_eps at target_delta. Throws
/// CalibrationError if no sigma <= 1e6 works.
double calibrate_sigma(double target_eps, double target_delta, std::size_t steps,
                       double sensitivity, const std::vector<double>& alpha_grid);

/// Add iid N(0, sigma^2) to every coordinate of every gradient tensor.
/// Deterministic given the seed; sigma = 0 returns the input bit-identically.
std::vector<Tensor> add_noise(const std::vector<Tensor>& grads, double sigma,
                              std::uint64_t rng_seed);

/// Privacy report: steps, sigma, c, tau, per-alpha eps, final (eps', delta, alpha).
std::string privacy_report_json(const RdpLedger& ledger, double sigma, double c, std::size_t tau,
                                double delta);

}  // namespace fastgc
