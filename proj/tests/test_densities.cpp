#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fae/densities.hpp"

using namespace fae;
using namespace fae::density;

TEST_CASE("diagonal Gaussian log-density reference values") {
    const Array zero1 = Array::zeros(Shape{1});
    const Array zero2 = Array::zeros(Shape{2});

    // standard normal at the origin: -0.5 log(2 pi)
    CHECK(diag_gaussian_logpdf(zero1, zero1, zero1) ==
          Catch::Approx(-0.9189385).margin(1e-7));
    // one sigma away adds 1/2
    CHECK(diag_gaussian_logpdf(Array::vector({1.0}), zero1, zero1) ==
          Catch::Approx(-1.4189385).margin(1e-7));
    // two independent dimensions add their constants
    CHECK(diag_gaussian_logpdf(zero2, zero2, zero2) ==
          Catch::Approx(-1.8378771).margin(1e-7));
    // scaling: var 4 at z=2 equals standard normal at 1 minus log 2
    CHECK(diag_gaussian_logpdf(Array::vector({2.0}), zero1,
                               Array::vector({std::log(4.0)})) ==
          Catch::Approx(-1.4189385 - 0.5 * std::log(4.0)).margin(1e-7));
}

TEST_CASE("diagonal Gaussian score is -(z - mu) / var") {
    const Array z = Array::vector({2.0, -1.0});
    const Array mu = Array::vector({0.5, 0.5});
    const Array lv = Array::vector({0.0, std::log(4.0)});
    const Array s = diag_gaussian_score_z(z, mu, lv);
    CHECK(s[0] == Catch::Approx(-1.5).margin(1e-15));
    CHECK(s[1] == Catch::Approx(1.5 / 4.0).margin(1e-15));
}

TEST_CASE("single-component mixture reduces to the diagonal Gaussian") {
    GmmPrior p = make_gmm_prior(1, 2);
    p.means = Array(Shape{1, 2}, {0.3, -0.7});
    p.logvars = Array(Shape{1, 2}, {0.2, -0.4});
    const Array z = Array::vector({1.0, 1.0});
    const Array mu = Array::vector({0.3, -0.7});
    const Array lv = Array::vector({0.2, -0.4});
    CHECK(gmm_logpdf(p, z) == Catch::Approx(diag_gaussian_logpdf(z, mu, lv)).epsilon(1e-14));

    const Array s = gmm_score_z(p, z);
    const Array s0 = diag_gaussian_score_z(z, mu, lv);
    CHECK(s[0] == Catch::Approx(s0[0]).epsilon(1e-14));
    CHECK(s[1] == Catch::Approx(s0[1]).epsilon(1e-14));
}

TEST_CASE("symmetric two-component mixture at the midpoint") {
    GmmPrior p = make_gmm_prior(2, 1);
    p.means = Array(Shape{2, 1}, {-1.0, 1.0});
    const Array z = Array::zeros(Shape{1});

    // both components contribute phi(1), so the mixture density is phi(1)
    CHECK(gmm_logpdf(p, z) == Catch::Approx(-1.4189385).margin(1e-7));
    // responsibilities split evenly and the score cancels by symmetry
    const Array r = gmm_responsibilities(p, z);
    CHECK(r[0] == Catch::Approx(0.5).margin(1e-14));
    CHECK(r[1] == Catch::Approx(0.5).margin(1e-14));
    CHECK(std::abs(gmm_score_z(p, z)[0]) < 1e-14);
}

TEST_CASE("identical components behave like a single Gaussian") {
    GmmPrior p = make_gmm_prior(3, 2);
    for (std::size_t k = 0; k < 3; ++k) {
        p.means.at(k, 0) = 0.4;
        p.means.at(k, 1) = -0.2;
    }
    p.logits = Array::vector({2.0, -1.0, 0.5});  // arbitrary weights, same component
    const Array z = Array::vector({0.9, 0.1});
    const Array mu = Array::vector({0.4, -0.2});
    const Array lv = Array::zeros(Shape{2});
    CHECK(gmm_logpdf(p, z) == Catch::Approx(diag_gaussian_logpdf(z, mu, lv)).epsilon(1e-12));
}

TEST_CASE("responsibilities are a probability vector") {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t K = 1 + rng.below(4);
        const std::size_t d = 1 + rng.below(3);
        GmmPrior p = make_gmm_prior(K, d);
        for (double& v : p.logits) v = rng.normal();
        for (double& v : p.means) v = 2.0 * rng.normal();
        for (double& v : p.logvars) v = rng.uniform(-1.0, 1.0);
        Array z(Shape{d});
        for (double& v : z) v = 3.0 * rng.normal();

        const Array r = gmm_responsibilities(p, z);
        double total = 0.0;
        for (double v : r) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("mixture log-density stays finite under extreme logits and variances") {
    GmmPrior p = make_gmm_prior(2, 1);
    p.logits = Array::vector({500.0, -500.0});
    p.logvars = Array(Shape{2, 1}, {-40.0, 40.0});  // clamped to +-10 where consumed
    const Array z = Array::vector({3.0});
    CHECK(std::isfinite(gmm_logpdf(p, z)));
    CHECK(std::isfinite(gmm_score_z(p, z)[0]));
    const Array r = gmm_responsibilities(p, z);
    CHECK(std::abs(r[0] + r[1] - 1.0) < 1e-12);
}

TEST_CASE("mixture score matches the expression-graph gradient") {
    SplitMix64 rng(2024);
    for (std::size_t K : {1, 2, 3}) {
        const std::size_t d = 2;
        GmmPrior p = make_gmm_prior(K, d);
        for (double& v : p.logits) v = rng.normal();
        for (double& v : p.means) v = rng.normal();
        for (double& v : p.logvars) v = rng.uniform(-0.5, 0.5);

        const GmmVars gv = gmm_vars("prior", K, d);
        auto z = ad::variable("z", Shape{d});
        auto logq = gmm_logpdf_expr(gv, z);
        auto score = ad::gradient_of(logq, z);

        for (int trial = 0; trial < 5; ++trial) {
            Array zv(Shape{d});
            for (double& v : zv) v = 2.0 * rng.normal();
            ad::Bindings b{{"z", zv},
                           {"prior.logits", p.logits},
                           {"prior.means", p.means},
                           {"prior.logvars", p.logvars}};
            CHECK(std::abs(ad::eval_scalar(logq, b) - gmm_logpdf(p, zv)) < 1e-10);
            const Array s_expr = ad::eval(score, b);
            const Array s_direct = gmm_score_z(p, zv);
            for (std::size_t i = 0; i < d; ++i) {
                CHECK(std::abs(s_expr[i] - s_direct[i]) < 1e-10);
            }
        }
    }
}

TEST_CASE("likelihood score pulls the residual back through the decoder") {
    // Linear decoder f(z) = W z with unit observation variance: the score of
    // log N(x | f(z), I) with respect to z is W^T (x - W z).
    nn::Mlp dec;
    dec.layers.resize(1);
    dec.layers[0].W = Array(Shape{2, 2}, {1.0, 2.0, -1.0, 0.5});
    dec.layers[0].b = Array::zeros(Shape{2});
    const Array z = Array::vector({0.3, -0.6});
    const Array x = Array::vector({1.0, 1.0});

    const Array fz = nn::mlp_forward(dec, z);
    const Array resid = Array::vector({x[0] - fz[0], x[1] - fz[1]});
    const Array want = nn::mlp_vjp(dec, z, resid);
    const Array got = likelihood_score_z(dec, z, x);
    CHECK(got[0] == Catch::Approx(want[0]).margin(1e-15));
    CHECK(got[1] == Catch::Approx(want[1]).margin(1e-15));
}

TEST_CASE("posterior score in x matches finite differences") {
    SplitMix64 rng(55);
    const nn::Encoder enc = nn::make_encoder(4, 8, 2, rng);
    Array x = Array::vector({0.6, -0.2, 1.1, 0.4});
    const Array z = Array::vector({0.25, -0.75});

    const Array analytic = posterior_score_x(enc, x, z);
    const double h = 1e-6;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double saved = x[j];
        x[j] = saved + h;
        const double up = posterior_logpdf(enc, x, z);
        x[j] = saved - h;
        const double dn = posterior_logpdf(enc, x, z);
        x[j] = saved;
        const double fd = (up - dn) / (2.0 * h);
        CHECK(std::abs(analytic[j] - fd) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("scored 1-d densities integrate to one") {
    const QuadGrid grid{-14.0, 14.0, 4001};
    const auto mass = [&grid](const ScoredDensity1D& p) {
        return quad_integral([&p](double x) { return std::exp(p.logpdf(x)); }, grid);
    };
    CHECK(mass(gaussian_density(0.0, 1.0)) == Catch::Approx(1.0).margin(1e-6));
    CHECK(mass(gaussian_density(2.0, 0.5)) == Catch::Approx(1.0).margin(1e-6));
    CHECK(mass(gmm_density_1d({1.0}, {0.0}, {1.0})) == Catch::Approx(1.0).margin(1e-6));
    CHECK(mass(gmm_density_1d({0.5, 0.5}, {-1.0, 1.0}, {1.0, 1.0})) ==
          Catch::Approx(1.0).margin(1e-6));
    CHECK(mass(gmm_density_1d({0.2, 0.3, 0.5}, {-2.0, 0.0, 2.0}, {0.5, 1.0, 2.0})) ==
          Catch::Approx(1.0).margin(1e-6));

    // a density the grid cannot capture is rejected before integration
    CHECK_THROWS_AS(fisher_divergence_quadrature(gaussian_density(100.0, 1.0),
                                                 gaussian_density(0.0, 1.0), grid),
                    std::invalid_argument);
}

TEST_CASE("scored densities report the derivative of their own log-density") {
    const auto densities = {
        gaussian_density(0.5, 2.0),
        gmm_density_1d({0.3, 0.7}, {-1.0, 2.0}, {1.0, 1.5}),
        gmm_density_1d({0.25, 0.25, 0.5}, {-2.0, 0.0, 1.0}, {0.4, 1.0, 3.0}),
    };
    const double h = 1e-6;
    for (const auto& dns : densities) {
        for (double t : {-3.0, -1.2, 0.0, 0.7, 2.5}) {
            const double fd_score = (dns.logpdf(t + h) - dns.logpdf(t - h)) / (2.0 * h);
            CHECK(std::abs(dns.score(t) - fd_score) < 1e-7);
            const double fd_lap = (dns.score(t + h) - dns.score(t - h)) / (2.0 * h);
            CHECK(std::abs(dns.loglap(t) - fd_lap) < 1e-6);
        }
    }
}

TEST_CASE("closed-form divergence values under quadrature") {
    const QuadGrid grid{-14.0, 14.0, 4001};
    // mean shift: D = (mu_p - mu_q)^2 / 2 with unit variances
    CHECK(fisher_divergence_quadrature(gaussian_density(0.0, 1.0),
                                       gaussian_density(2.0, 1.0), grid) ==
          Catch::Approx(2.0).margin(1e-6));
    // variance mismatch 1 vs 4: 0.5 (1 - 1/4)^2 = 0.28125
    CHECK(fisher_divergence_quadrature(gaussian_density(0.0, 1.0),
                                       gaussian_density(0.0, 4.0), grid) ==
          Catch::Approx(0.28125).margin(1e-6));
    // identical densities
    CHECK(fisher_divergence_quadrature(gaussian_density(0.0, 1.0),
                                       gaussian_density(0.0, 1.0), grid) ==
          Catch::Approx(0.0).margin(1e-10));
}

TEST_CASE("divergence is non-negative on random pairs") {
    SplitMix64 rng(808);
    const QuadGrid grid{-16.0, 16.0, 4001};
    for (int trial = 0; trial < 5; ++trial) {
        const auto p = gaussian_density(rng.uniform(-1.0, 1.0), rng.uniform(0.5, 2.0));
        const auto q = gmm_density_1d({0.5, 0.5},
                                      {rng.uniform(-2.0, 0.0), rng.uniform(0.0, 2.0)},
                                      {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)});
        CHECK(fisher_divergence_quadrature(p, q, grid) >= 0.0);
    }
}

TEST_CASE("integration-by-parts identity holds for smooth pairs") {
    const QuadGrid grid{-14.0, 14.0, 4001};
    const auto check = hyvarinen_identity_check(
        gaussian_density(0.0, 1.0), gmm_density_1d({0.4, 0.6}, {-1.0, 1.5}, {1.0, 0.8}), grid);
    CHECK(check.gap() < 1e-6);
    CHECK(check.direct == Catch::Approx(check.via_identity).margin(1e-6));
}

TEST_CASE("quadrature rejects degenerate grids") {
    CHECK_THROWS_AS(quad_integral([](double) { return 1.0; }, QuadGrid{1.0, -1.0, 101}),
                    std::invalid_argument);
    CHECK_THROWS_AS(quad_integral([](double) { return 1.0; }, QuadGrid{-1.0, 1.0, 1}),
                    std::invalid_argument);
}

TEST_CASE("mixture construction validates its inputs") {
    CHECK_THROWS_AS(gmm_density_1d({0.5, -0.1}, {0.0, 1.0}, {1.0, 1.0}),
                    std::invalid_argument);  // weights must be positive
    CHECK_THROWS_AS(gmm_density_1d({1.0}, {0.0}, {-1.0}), std::invalid_argument);
    CHECK_THROWS_AS(gmm_density_1d({0.5, 0.5}, {0.0}, {1.0, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(make_gmm_prior(0, 2), std::invalid_argument);

    // weights are normalized, so unnormalized inputs still give a density
    const auto p = gmm_density_1d({1.0, 3.0}, {-1.0, 1.0}, {1.0, 1.0});
    const QuadGrid grid{-12.0, 12.0, 3001};
    CHECK(quad_integral([&p](double x) { return std::exp(p.logpdf(x)); }, grid) ==
          Catch::Approx(1.0).margin(1e-6));
}
