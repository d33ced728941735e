#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fae/array.hpp"
#include "fae/autodiff.hpp"
#include "fae/rng.hpp"

// Small dense networks: a plain MLP decoder and a Gaussian encoder with a
// shared hidden trunk and separate mean / log-variance heads. Every forward
// rule exists twice — as direct numeric code and as an expression builder —
// and the tests hold the two accountable to each other.

namespace fae::nn {

inline constexpr double kLogVarLo = -10.0;
inline constexpr double kLogVarHi = 10.0;

struct DenseLayer {
    Array W;  // {out, in}
    Array b;  // {out}

    DenseLayer() = default;
    DenseLayer(Array weight, Array bias) : W(std::move(weight)), b(std::move(bias)) {
        if (!W.is_matrix() || !b.is_vector() || W.rows() != b.size()) {
            throw std::invalid_argument("DenseLayer: weight " + shape_str(W.shape()) +
                                        " does not match bias " + shape_str(b.shape()));
        }
    }

    std::size_t in_dim() const { return W.cols(); }
    std::size_t out_dim() const { return W.rows(); }
};

// Uniform Glorot initialisation: W ~ U(-a, a) with a = sqrt(6 / (in + out)),
// biases zero.
inline DenseLayer glorot_dense(std::size_t in, std::size_t out, SplitMix64& rng) {
    if (in == 0 || out == 0) throw std::invalid_argument("glorot_dense: zero dimension");
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    Array w(Shape{out, in});
    for (double& x : w) x = rng.uniform(-a, a);
    return DenseLayer(std::move(w), Array::zeros(Shape{out}));
}

inline Array dense_forward(const DenseLayer& l, const Array& x) {
    if (!x.is_vector() || x.size() != l.in_dim()) {
        throw std::invalid_argument("dense_forward: input " + shape_str(x.shape()) +
                                    " for layer expecting {" + std::to_string(l.in_dim()) + "}");
    }
    Array y(Shape{l.out_dim()});
    const double* w = l.W.data();
    for (std::size_t i = 0; i < l.out_dim(); ++i) {
        double acc = l.b[i];
        for (std::size_t j = 0; j < l.in_dim(); ++j) acc += w[i * l.in_dim() + j] * x[j];
        y[i] = acc;
    }
    return y;
}

struct Mlp {
    std::vector<DenseLayer> layers;  // relu between layers, last layer linear

    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }
};

inline Mlp make_mlp(const std::vector<std::size_t>& dims, SplitMix64& rng) {
    if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least two dims");
    Mlp m;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        m.layers.push_back(glorot_dense(dims[i], dims[i + 1], rng));
    }
    return m;
}

inline Array mlp_forward(const Mlp& m, const Array& x) {
    Array h = x;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        h = dense_forward(m.layers[i], h);
        if (i + 1 < m.layers.size()) {
            for (double& v : h) v = v > 0.0 ? v : 0.0;
        }
    }
    return h;
}

// Pull a cotangent on the MLP output back to the input: returns J(x)^T cot,
// with relu'(0) taken as 0.
inline Array mlp_vjp(const Mlp& m, const Array& x, const Array& cot) {
    if (cot.size() != m.out_dim()) {
        throw std::invalid_argument("mlp_vjp: cotangent " + shape_str(cot.shape()) +
                                    " for output dim " + std::to_string(m.out_dim()));
    }
    std::vector<Array> pre;  // pre-activation of every layer
    pre.reserve(m.layers.size());
    Array h = x;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        pre.push_back(dense_forward(m.layers[i], h));
        h = pre.back();
        if (i + 1 < m.layers.size()) {
            for (double& v : h) v = v > 0.0 ? v : 0.0;
        }
    }
    Array a = cot;
    for (std::size_t li = m.layers.size(); li-- > 0;) {
        if (li + 1 < m.layers.size()) {
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (!(pre[li][i] > 0.0)) a[i] = 0.0;
            }
        }
        const DenseLayer& l = m.layers[li];
        Array prev(Shape{l.in_dim()});
        const double* w = l.W.data();
        for (std::size_t i = 0; i < l.out_dim(); ++i) {
            const double ai = a[i];
            for (std::size_t j = 0; j < l.in_dim(); ++j) prev[j] += w[i * l.in_dim() + j] * ai;
        }
        a = std::move(prev);
    }
    return a;
}

// Push a tangent on the input forward to the output: returns J(x) t,
// with relu'(0) taken as 0.
inline Array mlp_jvp(const Mlp& m, const Array& x, const Array& t) {
    if (t.size() != m.in_dim()) {
        throw std::invalid_argument("mlp_jvp: tangent " + shape_str(t.shape()) +
                                    " for input dim " + std::to_string(m.in_dim()));
    }
    Array h = x;
    Array dh = t;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const DenseLayer& l = m.layers[li];
        const Array pre = dense_forward(l, h);
        Array dpre(Shape{l.out_dim()});
        const double* w = l.W.data();
        for (std::size_t i = 0; i < l.out_dim(); ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < l.in_dim(); ++j) acc += w[i * l.in_dim() + j] * dh[j];
            dpre[i] = acc;
        }
        h = pre;
        dh = std::move(dpre);
        if (li + 1 < m.layers.size()) {
            for (std::size_t i = 0; i < h.size(); ++i) {
                if (!(h[i] > 0.0)) {
                    h[i] = 0.0;
                    dh[i] = 0.0;
                }
            }
        }
    }
    return dh;
}

struct Encoder {
    DenseLayer trunk;       // feature -> hidden, relu
    DenseLayer mu_head;     // hidden -> latent, linear
    DenseLayer logvar_head; // hidden -> latent, linear, output clamped

    std::size_t in_dim() const { return trunk.in_dim(); }
    std::size_t latent_dim() const { return mu_head.out_dim(); }
};

inline Encoder make_encoder(std::size_t feature, std::size_t hidden, std::size_t latent,
                            SplitMix64& rng) {
    Encoder e;
    e.trunk = glorot_dense(feature, hidden, rng);
    e.mu_head = glorot_dense(hidden, latent, rng);
    e.logvar_head = glorot_dense(hidden, latent, rng);
    return e;
}

struct EncoderOutput {
    Array mu;
    Array logvar;      // clamped to [kLogVarLo, kLogVarHi]
    Array raw_logvar;  // head output before the clamp
    Array hidden;      // trunk activation, reused by the pullback
};

inline EncoderOutput encoder_apply(const Encoder& e, const Array& x) {
    EncoderOutput out;
    out.hidden = dense_forward(e.trunk, x);
    for (double& v : out.hidden) v = v > 0.0 ? v : 0.0;
    out.mu = dense_forward(e.mu_head, out.hidden);
    out.raw_logvar = dense_forward(e.logvar_head, out.hidden);
    out.logvar = out.raw_logvar;
    for (double& v : out.logvar) v = std::min(std::max(v, kLogVarLo), kLogVarHi);
    return out;
}

// Pull cotangents on (mu, logvar) back to the input. The log-variance clamp
// contributes a zero factor wherever the raw head output sits outside
// (kLogVarLo, kLogVarHi), matching the relu-composed clamp used by the
// expression form.
inline Array encoder_vjp(const Encoder& e, const Array& x, const Array& cot_mu,
                         const Array& cot_logvar) {
    const std::size_t latent = e.latent_dim();
    if (cot_mu.size() != latent || cot_logvar.size() != latent) {
        throw std::invalid_argument("encoder_vjp: cotangent size mismatch");
    }
    const Array pre = dense_forward(e.trunk, x);
    Array hidden = pre;
    for (double& v : hidden) v = v > 0.0 ? v : 0.0;
    const Array raw = dense_forward(e.logvar_head, hidden);

    Array a_hidden = Array::zeros(Shape{e.trunk.out_dim()});
    const double* wm = e.mu_head.W.data();
    const double* wl = e.logvar_head.W.data();
    const std::size_t h = e.trunk.out_dim();
    for (std::size_t i = 0; i < latent; ++i) {
        const double am = cot_mu[i];
        const double mask = (raw[i] > kLogVarLo && !(raw[i] > kLogVarHi)) ? 1.0 : 0.0;
        const double al = cot_logvar[i] * mask;
        for (std::size_t j = 0; j < h; ++j) {
            a_hidden[j] += wm[i * h + j] * am + wl[i * h + j] * al;
        }
    }
    for (std::size_t j = 0; j < h; ++j) {
        if (!(pre[j] > 0.0)) a_hidden[j] = 0.0;
    }
    Array a_x = Array::zeros(Shape{e.in_dim()});
    const double* wt = e.trunk.W.data();
    for (std::size_t j = 0; j < h; ++j) {
        const double aj = a_hidden[j];
        for (std::size_t k = 0; k < e.in_dim(); ++k) a_x[k] += wt[j * e.in_dim() + k] * aj;
    }
    return a_x;
}

// --- expression builders ----------------------------------------------------

struct DenseVars {
    ad::Expr W;
    ad::Expr b;
};

inline DenseVars dense_vars(const std::string& prefix, std::size_t in, std::size_t out) {
    return {ad::variable(prefix + ".W", Shape{out, in}),
            ad::variable(prefix + ".b", Shape{out})};
}

inline ad::Expr dense_expr(const DenseVars& l, const ad::Expr& x) {
    return ad::matvec(l.W, x) + l.b;
}

struct MlpVars {
    std::vector<DenseVars> layers;
};

inline MlpVars mlp_vars(const std::string& prefix, const std::vector<std::size_t>& dims) {
    if (dims.size() < 2) throw std::invalid_argument("mlp_vars: need at least two dims");
    MlpVars v;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        v.layers.push_back(dense_vars(prefix + "." + std::to_string(i), dims[i], dims[i + 1]));
    }
    return v;
}

inline ad::Expr mlp_expr(const MlpVars& v, const ad::Expr& x) {
    ad::Expr h = x;
    for (std::size_t i = 0; i < v.layers.size(); ++i) {
        h = dense_expr(v.layers[i], h);
        if (i + 1 < v.layers.size()) h = ad::relu(h);
    }
    return h;
}

struct EncoderVars {
    DenseVars trunk;
    DenseVars mu;
    DenseVars logvar;
};

inline EncoderVars encoder_vars(const std::string& prefix, std::size_t feature,
                                std::size_t hidden, std::size_t latent) {
    return {dense_vars(prefix + ".trunk.0", feature, hidden),
            dense_vars(prefix + ".mu", hidden, latent),
            dense_vars(prefix + ".logvar", hidden, latent)};
}

struct EncoderExpr {
    ad::Expr mu;
    ad::Expr logvar;
    ad::Expr raw_logvar;
};

inline EncoderExpr encoder_expr(const EncoderVars& v, const ad::Expr& x) {
    const ad::Expr h = ad::relu(dense_expr(v.trunk, x));
    EncoderExpr out;
    out.mu = dense_expr(v.mu, h);
    out.raw_logvar = dense_expr(v.logvar, h);
    out.logvar = ad::clamp(out.raw_logvar, kLogVarLo, kLogVarHi);
    return out;
}

}  // namespace fae::nn
