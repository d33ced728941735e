#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fae/array.hpp"
#include "fae/densities.hpp"
#include "fae/mlp.hpp"
#include "fae/rng.hpp"

// Self-contained numerical checks of the divergence machinery: closed-form
// quadrature values, the integration-by-parts identity, and analytic scores
// against finite differences. Used by the `verify` CLI subcommand and by the
// acceptance suite.

namespace fae::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;  // the quantity the bound applies to
    double bound = 0.0;
    std::string detail;
};

inline bool all_passed(const std::vector<CheckResult>& checks) {
    for (const CheckResult& c : checks) {
        if (!c.pass) return false;
    }
    return true;
}

inline void print_checks(std::ostream& os, const std::vector<CheckResult>& checks) {
    char buf[64];
    for (const CheckResult& c : checks) {
        os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name;
        std::snprintf(buf, sizeof(buf), " (measured %.3e, bound %.3e)", c.measured, c.bound);
        os << buf;
        if (!c.detail.empty()) os << " — " << c.detail;
        os << '\n';
    }
}

namespace detail {

inline CheckResult abs_check(std::string name, double value, double expected, double tol,
                             std::string detail = {}) {
    CheckResult c;
    c.name = std::move(name);
    c.measured = std::abs(value - expected);
    c.bound = tol;
    c.pass = c.measured <= tol;
    c.detail = std::move(detail);
    return c;
}

template <typename F>
Array fd_gradient(const F& f, const Array& x, double step) {
    Array g(x.shape());
    Array probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + step;
        const double hi = f(probe);
        probe[i] = x[i] - step;
        const double lo = f(probe);
        probe[i] = x[i];
        g[i] = (hi - lo) / (2.0 * step);
    }
    return g;
}

inline double rel_vec_error(const Array& a, const Array& b) {
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        ref += a[i] * a[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

}  // namespace detail

// Divergence values with known closed forms. Gaussians on a wide uniform
// grid make the trapezoid rule accurate far beyond the tolerances here.
inline std::vector<CheckResult> closed_form_divergence_checks() {
    using density::gaussian_density;
    const density::QuadGrid grid(-14.0, 14.0, 4001);
    std::vector<CheckResult> checks;
    checks.push_back(detail::abs_check(
        "divergence N(0,1) || N(2,1) equals 2",
        density::fisher_divergence_quadrature(gaussian_density(0, 1), gaussian_density(2, 1),
                                              grid),
        2.0, 1e-6, "mean shift m gives m^2/2"));
    checks.push_back(detail::abs_check(
        "divergence N(0,1) || N(0,4) equals 9/32",
        density::fisher_divergence_quadrature(gaussian_density(0, 1), gaussian_density(0, 4),
                                              grid),
        0.28125, 1e-6, "scale mismatch gives (1-1/4)^2/2 * E[x^2]"));
    checks.push_back(detail::abs_check(
        "divergence of identical densities is 0",
        density::fisher_divergence_quadrature(gaussian_density(0, 1), gaussian_density(0, 1),
                                              grid),
        0.0, 1e-10));
    return checks;
}

// Both sides of the integration-by-parts identity on Gaussian and mixture
// pairs, each integrated over at least eight standard deviations of p.
inline std::vector<CheckResult> identity_checks() {
    using density::gaussian_density;
    using density::gmm_density_1d;
    struct Pair {
        std::string name;
        density::ScoredDensity1D p, q;
        double lo, hi;
    };
    const std::vector<Pair> pairs = {
        {"N(0,1) vs N(2,1)", gaussian_density(0, 1), gaussian_density(2, 1), -10, 10},
        {"N(0,1) vs N(0,4)", gaussian_density(0, 1), gaussian_density(0, 4), -10, 10},
        {"N(1,2) vs N(0,1)", gaussian_density(1, 2), gaussian_density(0, 1), -13, 15},
        {"mixture vs N(0,1)",
         gmm_density_1d({0.5, 0.5}, {-1.0, 1.0}, {1.0, 1.0}), gaussian_density(0, 1), -11, 11},
        {"N(0,1) vs mixture", gaussian_density(0, 1),
         gmm_density_1d({0.3, 0.7}, {-1.0, 2.0}, {1.0, 1.5}), -10, 10},
        {"mixture vs mixture",
         gmm_density_1d({0.4, 0.6}, {-2.0, 1.5}, {0.8, 1.2}),
         gmm_density_1d({0.5, 0.5}, {0.0, 1.0}, {1.0, 1.0}), -13, 13},
    };
    std::vector<CheckResult> checks;
    for (const Pair& pr : pairs) {
        const density::QuadGrid grid(pr.lo, pr.hi, 4001);
        const auto id = density::hyvarinen_identity_check(pr.p, pr.q, grid);
        checks.push_back(detail::abs_check("identity gap " + pr.name, id.gap(), 0.0, 1e-6));
    }
    {
        // With p == q the right-hand side collapses to zero on its own.
        const density::QuadGrid grid(-10.0, 10.0, 4001);
        const auto id = density::hyvarinen_identity_check(gaussian_density(0, 1),
                                                          gaussian_density(0, 1), grid);
        checks.push_back(detail::abs_check("identity rhs for identical densities",
                                           id.via_identity, 0.0, 1e-8));
    }
    return checks;
}

// Analytic scores against central finite differences of the corresponding
// log-densities, at random points kept away from activation kinks.
inline std::vector<CheckResult> score_consistency_checks(std::uint64_t seed = 0x5c02ec0de) {
    constexpr double kStep = 1e-6;
    constexpr double kTol = 1e-6;
    constexpr int kPoints = 20;
    SplitMix64 rng(seed);
    std::vector<CheckResult> checks;

    const std::size_t latent = 2;
    for (std::size_t K : {1u, 2u, 3u}) {
        auto prior = density::make_gmm_prior(K, latent);
        for (double& v : prior.logits) v = rng.uniform(-1.0, 1.0);
        for (double& v : prior.means) v = rng.normal();
        for (double& v : prior.logvars) v = rng.uniform(-1.0, 1.0);
        double worst = 0.0;
        for (int pt = 0; pt < kPoints; ++pt) {
            Array z(Shape{latent});
            Array analytic(Shape{latent});
            do {
                for (double& v : z) v = 2.0 * rng.normal();
                analytic = density::gmm_score_z(prior, z);
            } while (std::sqrt(analytic[0] * analytic[0] + analytic[1] * analytic[1]) < 1e-3);
            const Array fd = detail::fd_gradient(
                [&prior](const Array& p) { return density::gmm_logpdf(prior, p); }, z, kStep);
            worst = std::max(worst, detail::rel_vec_error(analytic, fd));
        }
        checks.push_back({"prior score vs finite difference (K=" + std::to_string(K) + ")",
                          worst <= kTol, worst, kTol, ""});
    }

    {
        const std::size_t feature = 4, hidden = 8;
        nn::Encoder enc = nn::make_encoder(feature, hidden, latent, rng);
        double worst = 0.0;
        for (int pt = 0; pt < kPoints; ++pt) {
            Array x(Shape{feature});
            Array z(Shape{latent});
            bool safe = false;
            while (!safe) {
                for (double& v : x) v = rng.normal();
                for (double& v : z) v = rng.normal();
                safe = true;
                for (double pre : nn::dense_forward(enc.trunk, x)) {
                    if (std::abs(pre) < 1e-4) safe = false;
                }
            }
            const Array analytic = density::posterior_score_x(enc, x, z);
            const Array fd = detail::fd_gradient(
                [&enc, &z](const Array& p) { return density::posterior_logpdf(enc, p, z); }, x,
                kStep);
            worst = std::max(worst, detail::rel_vec_error(analytic, fd));
        }
        checks.push_back(
            {"posterior score vs finite difference", worst <= kTol, worst, kTol, ""});
    }

    {
        const std::size_t feature = 4, hidden = 8;
        nn::Mlp dec = nn::make_mlp({latent, hidden, feature}, rng);
        double worst = 0.0;
        for (int pt = 0; pt < kPoints; ++pt) {
            Array x(Shape{feature});
            Array z(Shape{latent});
            bool safe = false;
            while (!safe) {
                for (double& v : x) v = rng.normal();
                for (double& v : z) v = rng.normal();
                safe = true;
                for (double pre : nn::dense_forward(dec.layers[0], z)) {
                    if (std::abs(pre) < 1e-4) safe = false;
                }
            }
            const Array analytic = density::likelihood_score_z(dec, z, x);
            const Array fd = detail::fd_gradient(
                [&dec, &x](const Array& p) {
                    const Array f = nn::mlp_forward(dec, p);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        acc += (x[i] - f[i]) * (x[i] - f[i]);
                    }
                    return -0.5 * acc;
                },
                z, kStep);
            worst = std::max(worst, detail::rel_vec_error(analytic, fd));
        }
        checks.push_back(
            {"likelihood score vs finite difference", worst <= kTol, worst, kTol, ""});
    }
    return checks;
}

inline std::vector<CheckResult> run_all_density_checks() {
    std::vector<CheckResult> all = closed_form_divergence_checks();
    for (auto& c : identity_checks()) all.push_back(std::move(c));
    for (auto& c : score_consistency_checks()) all.push_back(std::move(c));
    return all;
}

}  // namespace fae::verify
