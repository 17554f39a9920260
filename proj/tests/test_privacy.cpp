#include <cmath>

#include "doctest.h"
#include "fastgc/privacy.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace fastgc;
using namespace testsupport;

namespace {

// Renyi alpha-divergence of N(delta, 1) from N(0, 1) by Simpson quadrature:
// (1/(alpha-1)) log integral p1(x)^alpha p2(x)^(1-alpha) dx
double renyi_divergence_quadrature(double delta, double alpha) {
    const double lo = -30.0, hi = 30.0 + alpha * delta;
    const int n = 200000;  // even
    const double h = (hi - lo) / n;
    auto integrand = [&](double x) {
        const double log_p1 = -0.5 * (x - delta) * (x - delta);
        const double log_p2 = -0.5 * x * x;
        return std::exp(alpha * log_p1 + (1.0 - alpha) * log_p2) / std::sqrt(2.0 * M_PI);
    };
    double acc = integrand(lo) + integrand(hi);
    for (int i = 1; i < n; ++i) acc += integrand(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return std::log(acc * h / 3.0) / (alpha - 1.0);
}

}  // namespace

TEST_CASE("gaussian mechanism goldens") {
    CHECK(gaussian_rdp_eps(1.0, 1.0, 2.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(gaussian_rdp_eps(2.0, 1.0, 2.0) == doctest::Approx(0.25).epsilon(1e-15));
    // doubling the sensitivity quadruples epsilon
    CHECK(gaussian_rdp_eps(1.3, 2.0, 3.0) ==
          doctest::Approx(4.0 * gaussian_rdp_eps(1.3, 1.0, 3.0)).epsilon(1e-12));
    CHECK_THROWS_AS(gaussian_rdp_eps(1.0, 1.0, 1.0), DomainError);
    CHECK_THROWS_AS(gaussian_rdp_eps(1.0, 1.0, 0.5), DomainError);
}

TEST_CASE("gaussian_rdp_eps monotonicity") {
    CHECK(gaussian_rdp_eps(2.0, 1.0, 2.0) < gaussian_rdp_eps(1.0, 1.0, 2.0));
    CHECK(gaussian_rdp_eps(1.0, 1.0, 4.0) > gaussian_rdp_eps(1.0, 1.0, 2.0));
    CHECK(gaussian_rdp_eps(1.0, 2.0, 2.0) > gaussian_rdp_eps(1.0, 1.0, 2.0));
}

TEST_CASE("compose accumulates per alpha and counts steps") {
    RdpLedger ledger({2.0, 4.0});
    compose(ledger, {0.3, 0.1});
    compose(ledger, {0.2, 0.4});
    CHECK(ledger.eps_acc()[0] == doctest::Approx(0.5));
    CHECK(ledger.eps_acc()[1] == doctest::Approx(0.5));
    CHECK(ledger.steps() == 2);

    compose(ledger, {0.0, 0.0});  // composing zero leaves accumulators unchanged
    CHECK(ledger.eps_acc()[0] == doctest::Approx(0.5));
    CHECK(ledger.steps() == 3);

    CHECK_THROWS_AS(compose(ledger, {0.1}), ContractError);
    CHECK_THROWS_AS(compose(ledger, {-0.1, 0.0}), DomainError);
}

TEST_CASE("T identical steps accumulate T times the single-step epsilon") {
    RdpLedger ledger;  // default grid
    const std::vector<double> step = gaussian_step_eps(ledger, 0.7, 0.25);
    const std::size_t T = 13;
    for (std::size_t t = 0; t < T; ++t) compose(ledger, step);
    for (std::size_t i = 0; i < step.size(); ++i) {
        CHECK(std::abs(ledger.eps_acc()[i] - T * step[i]) < 1e-12 * T * step[i] + 1e-15);
    }
}

TEST_CASE("to_dp: single-alpha and two-alpha goldens") {
    RdpLedger single({2.0});
    compose(single, {1.0});
    DpBound b1 = to_dp(single, std::exp(-1.0));
    CHECK(b1.eps_prime == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(b1.best_alpha == doctest::Approx(2.0));

    RdpLedger pair({2.0, 4.0});
    compose(pair, {1.0, 1.0});
    DpBound b2 = to_dp(pair, std::exp(-3.0));
    CHECK(b2.eps_prime == doctest::Approx(2.0).epsilon(1e-12));  // min(1+3, 1+1)
    CHECK(b2.best_alpha == doctest::Approx(4.0));

    CHECK_THROWS_AS(to_dp(single, 0.0), DomainError);
    CHECK_THROWS_AS(to_dp(single, 1.0), DomainError);
}

TEST_CASE("to_dp ties break toward the smaller alpha") {
    RdpLedger pair({2.0, 3.0});
    // candidates: e1 + L, e2 + L/2; pick e1, e2 so both equal at L = log(1/delta)
    // e1 + L == e2 + L/2  =>  e2 = e1 + L/2
    const double delta = std::exp(-2.0);  // L = 2
    compose(pair, {0.5, 1.5});
    DpBound b = to_dp(pair, delta);
    CHECK(b.eps_prime == doctest::Approx(2.5));
    CHECK(b.best_alpha == doctest::Approx(2.0));
}

TEST_CASE("eps' is non-increasing in delta") {
    RdpLedger ledger;
    compose(ledger, gaussian_step_eps(ledger, 0.5, 0.2));
    double prev = std::numeric_limits<double>::infinity();
    for (double delta : {1e-9, 1e-7, 1e-5, 1e-3, 1e-1, 0.5}) {
        const double eps = to_dp(ledger, delta).eps_prime;
        CHECK(eps <= prev + 1e-12);
        prev = eps;
    }
}

TEST_CASE("removing an alpha from the grid never decreases eps'") {
    const std::vector<double> full = {1.5, 2.0, 8.0, 32.0};
    RdpLedger ledger(full);
    compose(ledger, gaussian_step_eps(ledger, 0.3, 0.5));
    const double best = to_dp(ledger, 1e-5).eps_prime;
    for (std::size_t drop = 0; drop < full.size(); ++drop) {
        std::vector<double> reduced;
        for (std::size_t i = 0; i < full.size(); ++i)
            if (i != drop) reduced.push_back(full[i]);
        RdpLedger lr(reduced);
        compose(lr, gaussian_step_eps(lr, 0.3, 0.5));
        CHECK(to_dp(lr, 1e-5).eps_prime >= best - 1e-12);
    }
}

TEST_CASE("compose is associative and commutative per alpha") {
    std::mt19937_64 rng(51);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::vector<std::vector<double>> steps;
    for (int i = 0; i < 5; ++i) steps.push_back({dist(rng), dist(rng)});

    RdpLedger fwd({2.0, 4.0});
    for (const auto& s : steps) compose(fwd, s);
    RdpLedger rev({2.0, 4.0});
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) compose(rev, *it);
    CHECK(fwd.eps_acc()[0] == doctest::Approx(rev.eps_acc()[0]).epsilon(1e-14));
    CHECK(fwd.eps_acc()[1] == doctest::Approx(rev.eps_acc()[1]).epsilon(1e-14));
}

TEST_CASE("calibrate_sigma inverts the to_dp golden") {
    const double sigma = calibrate_sigma(2.0, std::exp(-1.0), 1, 1.0, {2.0});
    CHECK(sigma == doctest::Approx(1.0).epsilon(5e-4));
}

TEST_CASE("doubling steps grows sigma by sqrt(2) when the same alpha stays optimal") {
    const std::vector<double> grid = {2.0};
    const double s1 = calibrate_sigma(2.0, std::exp(-1.0), 1, 1.0, grid);
    const double s2 = calibrate_sigma(2.0, std::exp(-1.0), 2, 1.0, grid);
    CHECK(s2 / s1 == doctest::Approx(std::sqrt(2.0)).epsilon(1e-3));
}

TEST_CASE("vacuous target returns the lower search bound") {
    const double sigma = calibrate_sigma(1e9, 1e-5, 1, 1e-3, RdpLedger::default_alphas());
    CHECK(sigma == doctest::Approx(1e-6));
}

TEST_CASE("unattainable target raises a calibration error") {
    // steps so numerous that even sigma = 1e6 cannot meet the bound
    CHECK_THROWS_AS(calibrate_sigma(1e-9, 1e-12, 1000000000, 1.0, {1.25}), CalibrationError);
}

TEST_CASE("add_noise: sigma 0 is bit-identical, seeds are reproducible") {
    std::mt19937_64 rng(52);
    std::vector<Tensor> grads = {rand_tensor({3, 4}, rng), rand_tensor({7}, rng)};
    std::vector<Tensor> same = add_noise(grads, 0.0, 99);
    for (std::size_t p = 0; p < grads.size(); ++p)
        for (std::size_t i = 0; i < grads[p].size(); ++i) CHECK(same[p][i] == grads[p][i]);

    std::vector<Tensor> a = add_noise(grads, 0.5, 1234);
    std::vector<Tensor> b = add_noise(grads, 0.5, 1234);
    std::vector<Tensor> c = add_noise(grads, 0.5, 1235);
    double diff_ab = 0.0, diff_ac = 0.0;
    for (std::size_t p = 0; p < grads.size(); ++p)
        for (std::size_t i = 0; i < grads[p].size(); ++i) {
            diff_ab = std::max(diff_ab, std::abs(a[p][i] - b[p][i]));
            diff_ac = std::max(diff_ac, std::abs(a[p][i] - c[p][i]));
        }
    CHECK(diff_ab == 0.0);
    CHECK(diff_ac > 0.0);
    CHECK_THROWS_AS(add_noise(grads, -1.0, 0), DomainError);
}

TEST_CASE("add_noise sample variance matches sigma^2 within 1%") {
    std::vector<Tensor> zero = {Tensor::zeros({1000000})};
    std::vector<Tensor> noisy = add_noise(zero, 1.0, 7);
    double mean = 0.0;
    for (std::size_t i = 0; i < noisy[0].size(); ++i) mean += noisy[0][i];
    mean /= static_cast<double>(noisy[0].size());
    double var = 0.0;
    for (std::size_t i = 0; i < noisy[0].size(); ++i)
        var += (noisy[0][i] - mean) * (noisy[0][i] - mean);
    var /= static_cast<double>(noisy[0].size() - 1);
    CHECK(var == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("quadrature confirms the Renyi divergence of shifted unit Gaussians") {
    for (double delta : {0.5, 1.0, 2.0}) {
        for (double alpha : {1.5, 2.0, 4.0}) {
            const double numeric = renyi_divergence_quadrature(delta, alpha);
            const double closed = gaussian_rdp_eps(1.0, delta, alpha);  // alpha delta^2 / 2
            CHECK(numeric == doctest::Approx(closed).epsilon(1e-6));
        }
    }
}

TEST_CASE("privacy report carries the full ledger state") {
    RdpLedger ledger;
    compose(ledger, gaussian_step_eps(ledger, 0.05, 1.0 / 32.0));
    compose(ledger, gaussian_step_eps(ledger, 0.05, 1.0 / 32.0));
    const std::string text = privacy_report_json(ledger, 0.05, 1.0, 32, 1e-5);
    auto j = nlohmann::json::parse(text);
    CHECK(j["steps"] == 2);
    CHECK(j["sigma"] == doctest::Approx(0.05));
    CHECK(j["c"] == doctest::Approx(1.0));
    CHECK(j["tau"] == 32);
    CHECK(j["per_alpha_eps"].size() == RdpLedger::default_alphas().size());
    CHECK(j["final"]["eps_prime"].get<double>() > 0.0);
    CHECK(j["final"]["delta"] == doctest::Approx(1e-5));
}
