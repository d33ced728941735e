#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fae/mlp.hpp"

using namespace fae;
using namespace fae::nn;

namespace {

// J assembled column-by-column from forward tangents.
Array jacobian_from_jvp(const Mlp& m, const Array& x) {
    Array jac(Shape{m.out_dim(), m.in_dim()});
    for (std::size_t j = 0; j < m.in_dim(); ++j) {
        Array t = Array::zeros(Shape{m.in_dim()});
        t[j] = 1.0;
        const Array col = mlp_jvp(m, x, t);
        for (std::size_t i = 0; i < m.out_dim(); ++i) jac.at(i, j) = col[i];
    }
    return jac;
}

// J assembled row-by-row from pulled-back cotangents.
Array jacobian_from_vjp(const Mlp& m, const Array& x) {
    Array jac(Shape{m.out_dim(), m.in_dim()});
    for (std::size_t i = 0; i < m.out_dim(); ++i) {
        Array c = Array::zeros(Shape{m.out_dim()});
        c[i] = 1.0;
        const Array rowv = mlp_vjp(m, x, c);
        for (std::size_t j = 0; j < m.in_dim(); ++j) jac.at(i, j) = rowv[j];
    }
    return jac;
}

}  // namespace

TEST_CASE("dense forward computes Wx + b") {
    DenseLayer l;
    l.W = Array(Shape{2, 3}, {1, 0, -1, 2, 1, 0});
    l.b = Array::vector({0.5, -0.5});
    const Array y = dense_forward(l, Array::vector({1.0, 2.0, 3.0}));
    CHECK(y == Array::vector({-1.5, 3.5}));
}

TEST_CASE("mlp forward applies relu between layers but not at the output") {
    Mlp m;
    m.layers.resize(2);
    m.layers[0].W = Array(Shape{2, 1}, {1.0, -1.0});
    m.layers[0].b = Array::zeros(Shape{2});
    m.layers[1].W = Array(Shape{1, 2}, {1.0, 1.0});
    m.layers[1].b = Array::vector({-5.0});

    // x=3: hidden pre = (3, -3) -> relu (3, 0) -> out 3 - 5 = -2 (no relu at output)
    CHECK(mlp_forward(m, Array::vector({3.0}))[0] == -2.0);
    // x=-3: hidden (0, 3) -> out 3 - 5 = -2
    CHECK(mlp_forward(m, Array::vector({-3.0}))[0] == -2.0);
}

TEST_CASE("glorot initialization respects the fan-based bound and zero biases") {
    SplitMix64 rng(42);
    const std::size_t in = 64, out = 32;
    const DenseLayer l = glorot_dense(in, out, rng);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));

    double mean = 0.0;
    for (double v : l.W) {
        CHECK(std::abs(v) <= bound);
        mean += v;
    }
    mean /= static_cast<double>(l.W.size());
    CHECK(std::abs(mean) < bound / 10.0);  // loose sanity bound on the sample mean
    for (double v : l.b) CHECK(v == 0.0);
}

TEST_CASE("identical seeds give identical networks") {
    SplitMix64 a(7), b(7);
    const Mlp m1 = make_mlp({4, 8, 3}, a);
    const Mlp m2 = make_mlp({4, 8, 3}, b);
    REQUIRE(m1.layers.size() == m2.layers.size());
    for (std::size_t i = 0; i < m1.layers.size(); ++i) {
        CHECK(m1.layers[i].W == m2.layers[i].W);
        CHECK(m1.layers[i].b == m2.layers[i].b);
    }
}

TEST_CASE("jvp and vjp of a purely linear network are W t and W^T c") {
    Mlp m;
    m.layers.resize(1);
    m.layers[0].W = Array(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    m.layers[0].b = Array::vector({10.0, 20.0});

    const Array x = Array::vector({0.1, 0.2, 0.3});
    const Array t = Array::vector({1.0, -1.0, 2.0});
    const Array c = Array::vector({1.0, 1.0});

    CHECK(mlp_jvp(m, x, t) == Array::vector({5.0, 11.0}));
    CHECK(mlp_vjp(m, x, c) == Array::vector({5.0, 7.0, 9.0}));
}

TEST_CASE("Jacobian assembled from jvp columns equals Jacobian from vjp rows") {
    SplitMix64 rng(99);
    const Mlp m = make_mlp({5, 7, 4, 3}, rng);
    for (int trial = 0; trial < 10; ++trial) {
        Array x(Shape{5});
        for (double& v : x) v = rng.normal();
        const Array a = jacobian_from_jvp(m, x);
        const Array b = jacobian_from_vjp(m, x);
        REQUIRE(a.shape() == b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(std::abs(a[i] - b[i]) < 1e-10);
        }
    }
}

TEST_CASE("vjp matches finite differences of the forward map") {
    SplitMix64 rng(4242);
    const Mlp m = make_mlp({3, 6, 2}, rng);
    Array x = Array::vector({0.4, -0.7, 1.1});
    const Array cot = Array::vector({1.0, -2.0});
    const Array analytic = mlp_vjp(m, x, cot);

    const double h = 1e-6;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double saved = x[j];
        x[j] = saved + h;
        const Array up = mlp_forward(m, x);
        x[j] = saved - h;
        const Array dn = mlp_forward(m, x);
        x[j] = saved;
        double dir = 0.0;
        for (std::size_t i = 0; i < cot.size(); ++i) dir += cot[i] * (up[i] - dn[i]) / (2.0 * h);
        CHECK(std::abs(analytic[j] - dir) < 1e-5 * std::max(1.0, std::abs(dir)));
    }
}

TEST_CASE("relu derivative at exactly zero is zero in both jvp and vjp") {
    Mlp m;
    m.layers.resize(2);
    m.layers[0].W = Array(Shape{1, 1}, {1.0});
    m.layers[0].b = Array::zeros(Shape{1});
    m.layers[1].W = Array(Shape{1, 1}, {1.0});
    m.layers[1].b = Array::zeros(Shape{1});

    const Array x = Array::vector({0.0});  // pre-activation lands exactly on the kink
    CHECK(mlp_jvp(m, x, Array::vector({1.0}))[0] == 0.0);
    CHECK(mlp_vjp(m, x, Array::vector({1.0}))[0] == 0.0);
}

TEST_CASE("encoder clamps the log-variance head into [-10, 10]") {
    Encoder e;
    e.trunk.W = Array(Shape{1, 1}, {1.0});
    e.trunk.b = Array::zeros(Shape{1});
    e.mu_head.W = Array(Shape{1, 1}, {1.0});
    e.mu_head.b = Array::zeros(Shape{1});
    e.logvar_head.W = Array(Shape{1, 1}, {1.0});
    e.logvar_head.b = Array::zeros(Shape{1});

    const EncoderOutput big = encoder_apply(e, Array::vector({12.0}));
    CHECK(big.raw_logvar[0] == 12.0);
    CHECK(big.logvar[0] == kLogVarHi);

    // negative raw values can only come from the head bias: the trunk is relu-gated
    e.logvar_head.b = Array::vector({-42.0});
    const EncoderOutput small = encoder_apply(e, Array::vector({0.0}));
    CHECK(small.raw_logvar[0] == -42.0);
    CHECK(small.logvar[0] == kLogVarLo);

    e.logvar_head.b = Array::zeros(Shape{1});
    const EncoderOutput mid = encoder_apply(e, Array::vector({3.0}));
    CHECK(mid.logvar[0] == 3.0);
}

TEST_CASE("zero-weight encoder maps every input to the origin") {
    Encoder e;
    e.trunk.W = Array::zeros(Shape{4, 3});
    e.trunk.b = Array::zeros(Shape{4});
    e.mu_head.W = Array::zeros(Shape{2, 4});
    e.mu_head.b = Array::zeros(Shape{2});
    e.logvar_head.W = Array::zeros(Shape{2, 4});
    e.logvar_head.b = Array::zeros(Shape{2});

    const EncoderOutput out = encoder_apply(e, Array::vector({5.0, -2.0, 9.0}));
    CHECK(out.mu == Array::zeros(Shape{2}));
    CHECK(out.logvar == Array::zeros(Shape{2}));
}

TEST_CASE("encoder vjp matches finite differences through both heads") {
    SplitMix64 rng(31);
    const Encoder e = make_encoder(4, 6, 2, rng);
    Array x = Array::vector({0.3, -0.9, 0.5, 1.2});
    const Array cmu = Array::vector({0.7, -0.4});
    const Array clv = Array::vector({-1.1, 0.6});
    const Array analytic = encoder_vjp(e, x, cmu, clv);

    const double h = 1e-6;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double saved = x[j];
        x[j] = saved + h;
        const EncoderOutput up = encoder_apply(e, x);
        x[j] = saved - h;
        const EncoderOutput dn = encoder_apply(e, x);
        x[j] = saved;
        double dir = 0.0;
        for (std::size_t i = 0; i < 2; ++i) {
            dir += cmu[i] * (up.mu[i] - dn.mu[i]) / (2.0 * h);
            dir += clv[i] * (up.logvar[i] - dn.logvar[i]) / (2.0 * h);
        }
        CHECK(std::abs(analytic[j] - dir) < 1e-5 * std::max(1.0, std::abs(dir)));
    }
}

TEST_CASE("expression builders agree with the direct implementations") {
    SplitMix64 rng(911);
    const Mlp m = make_mlp({3, 5, 2}, rng);
    const MlpVars mv = mlp_vars("net", {3, 5, 2});
    auto x = ad::variable("x", Shape{3});
    auto out = mlp_expr(mv, x);

    ad::Bindings b{{"x", Array::vector({0.2, -0.8, 1.4})}};
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        b["net." + std::to_string(i) + ".W"] = m.layers[i].W;
        b["net." + std::to_string(i) + ".b"] = m.layers[i].b;
    }
    const Array via_expr = ad::eval(out, b);
    const Array direct = mlp_forward(m, b.at("x"));
    REQUIRE(via_expr.size() == direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i) {
        CHECK(std::abs(via_expr[i] - direct[i]) < 1e-14);
    }

    SplitMix64 rng2(911);
    const Encoder enc = make_encoder(3, 5, 2, rng2);
    const EncoderVars ev = encoder_vars("enc", 3, 5, 2);
    auto eout = encoder_expr(ev, x);
    ad::Bindings be{{"x", Array::vector({0.2, -0.8, 1.4})},
                    {"enc.trunk.0.W", enc.trunk.W},     {"enc.trunk.0.b", enc.trunk.b},
                    {"enc.mu.W", enc.mu_head.W},        {"enc.mu.b", enc.mu_head.b},
                    {"enc.logvar.W", enc.logvar_head.W},{"enc.logvar.b", enc.logvar_head.b}};
    const EncoderOutput direct_enc = encoder_apply(enc, be.at("x"));
    const Array mu = ad::eval(eout.mu, be);
    const Array lv = ad::eval(eout.logvar, be);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(std::abs(mu[i] - direct_enc.mu[i]) < 1e-14);
        CHECK(std::abs(lv[i] - direct_enc.logvar[i]) < 1e-14);
    }
}

TEST_CASE("dimension mismatches are rejected") {
    SplitMix64 rng(5);
    const Mlp m = make_mlp({3, 4, 2}, rng);
    CHECK_THROWS_AS(mlp_forward(m, Array::vector({1.0, 2.0})), std::invalid_argument);
    CHECK_THROWS_AS(mlp_jvp(m, Array::vector({1.0, 2.0, 3.0}), Array::vector({1.0})),
                    std::invalid_argument);
    CHECK_THROWS_AS(mlp_vjp(m, Array::vector({1.0, 2.0, 3.0}), Array::vector({1.0})),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_mlp({3}, rng), std::invalid_argument);
}
