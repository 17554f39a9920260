#include "fastgc/privacy.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "json.hpp"

namespace fastgc {

RdpLedger::RdpLedger(std::vector<double> alphas) : alphas_(std::move(alphas)) {
    if (alphas_.empty()) throw DomainError("ledger: alpha grid must be non-empty");
    for (double a : alphas_) {
        if (a <= 1.0) throw DomainError("ledger: alpha must exceed 1, got " + std::to_string(a));
    }
    eps_acc_.assign(alphas_.size(), 0.0);
}

double gaussian_rdp_eps(double sigma, double sensitivity, double alpha) {
    if (alpha <= 1.0) throw DomainError("gaussian_rdp_eps: alpha must exceed 1");
    if (sigma <= 0.0) return std::numeric_limits<double>::infinity();
    return alpha * sensitivity * sensitivity / (2.0 * sigma * sigma);
}

std::vector<double> gaussian_step_eps(const RdpLedger& ledger, double sigma,
                                      double sensitivity) {
    std::vector<double> out;
    out.reserve(ledger.alphas().size());
    for (double a : ledger.alphas()) out.push_back(gaussian_rdp_eps(sigma, sensitivity, a));
    return out;
}

void compose(RdpLedger& ledger, const std::vector<double>& step_eps) {
    if (step_eps.size() != ledger.alphas_.size()) {
        throw ContractError("compose: step has " + std::to_string(step_eps.size()) +
                            " entries for an alpha grid of " +
                            std::to_string(ledger.alphas_.size()));
    }
    for (std::size_t i = 0; i < step_eps.size(); ++i) {
        if (step_eps[i] < 0.0) throw DomainError("compose: step epsilon must be >= 0");
        ledger.eps_acc_[i] += step_eps[i];
    }
    ledger.steps_ += 1;
}

DpBound to_dp(const RdpLedger& ledger, double delta) {
    if (delta <= 0.0 || delta >= 1.0) {
        throw DomainError("to_dp: delta must lie in (0, 1), got " + std::to_string(delta));
    }
    const double log_inv_delta = std::log(1.0 / delta);
    double best = std::numeric_limits<double>::infinity();
    double best_alpha = ledger.alphas().front();
    for (std::size_t i = 0; i < ledger.alphas().size(); ++i) {
        const double a = ledger.alphas()[i];
        const double candidate = ledger.eps_acc()[i] + log_inv_delta / (a - 1.0);
        if (candidate < best) {  // ties keep the earlier (smaller) alpha
            best = candidate;
            best_alpha = a;
        }
    }
    return {best, best_alpha};
}

double calibrate_sigma(double target_eps, double target_delta, std::size_t steps,
                       double sensitivity, const std::vector<double>& alpha_grid) {
    if (target_eps <= 0.0) throw DomainError("calibrate_sigma: target epsilon must be positive");
    if (steps == 0) throw DomainError("calibrate_sigma: need at least one step");

    auto eps_at = [&](double sigma) {
        RdpLedger ledger(alpha_grid);
        std::vector<double> step = gaussian_step_eps(ledger, sigma, sensitivity);
        for (std::size_t t = 0; t < steps; ++t) compose(ledger, step);
        return to_dp(ledger, target_delta).eps_prime;
    };

    constexpr double kLo = 1e-6, kHi = 1e6;
    if (eps_at(kHi) > target_eps) {
        throw CalibrationError("calibrate_sigma: target (" + std::to_string(target_eps) + ", " +
                               std::to_string(target_delta) + ") unattainable with sigma <= 1e6");
    }
    if (eps_at(kLo) <= target_eps) return kLo;  // vacuous target

    // eps'(sigma) is monotone decreasing; bisect for the smallest feasible sigma.
    double lo = kLo, hi = kHi;
    while ((hi - lo) / hi > 1e-4) {
        const double mid = 0.5 * (lo + hi);
        if (eps_at(mid) <= target_eps) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    return hi;
}

namespace {

// xoshiro256++ with splitmix64 seeding; noise is drawn every step over the
// whole parameter vector, so generation speed must not distort step timing.
struct NoiseRng {
    std::uint64_t s[4];

    explicit NoiseRng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& v : s) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            v = z ^ (z >> 31);
        }
    }

    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
};

// Box-Muller with a cached spare draw.
struct GaussianSampler {
    NoiseRng rng;
    double spare = 0.0;
    bool has_spare = false;

    explicit GaussianSampler(std::uint64_t seed) : rng(seed) {}

    double operator()() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        const double u1 = 1.0 - rng.uniform01();  // (0, 1]
        const double u2 = rng.uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare = r * std::sin(theta);
        has_spare = true;
        return r * std::cos(theta);
    }
};

}  // namespace

std::vector<Tensor> add_noise(const std::vector<Tensor>& grads, double sigma,
                              std::uint64_t rng_seed) {
    if (sigma < 0.0) throw DomainError("add_noise: sigma must be >= 0");
    if (sigma == 0.0) return grads;  // bit-identical passthrough
    GaussianSampler noise(rng_seed);
    std::vector<Tensor> out;
    out.reserve(grads.size());
    for (const Tensor& g : grads) {
        std::vector<double> buf(g.size());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = g[i] + sigma * noise();
        out.emplace_back(g.shape(), std::move(buf));
    }
    return out;
}

std::string privacy_report_json(const RdpLedger& ledger, double sigma, double c, std::size_t tau,
                                double delta) {
    nlohmann::json report;
    report["steps"] = ledger.steps();
    report["sigma"] = sigma;
    report["c"] = c;
    report["tau"] = tau;
    nlohmann::json per_alpha = nlohmann::json::array();
    for (std::size_t i = 0; i < ledger.alphas().size(); ++i) {
        per_alpha.push_back({{"alpha", ledger.alphas()[i]}, {"eps", ledger.eps_acc()[i]}});
    }
    report["per_alpha_eps"] = per_alpha;
    DpBound bound = to_dp(ledger, delta);
    report["final"] = {
        {"eps_prime", bound.eps_prime}, {"delta", delta}, {"best_alpha", bound.best_alpha}};
    return report.dump(2);
}

}  // namespace fastgc
