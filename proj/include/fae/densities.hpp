#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "fae/array.hpp"
#include "fae/autodiff.hpp"
#include "fae/mlp.hpp"

// Log-densities and their score functions (gradients of log-density). Every
// score here has a closed form; the expression builders at the bottom define
// the same functions symbolically so the two can be cross-checked.

namespace fae::density {

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

// --- diagonal Gaussian ------------------------------------------------------

inline double diag_gaussian_logpdf(const Array& z, const Array& mu, const Array& logvar) {
    if (!same_shape(z, mu) || !same_shape(z, logvar) || !z.is_vector()) {
        throw std::invalid_argument("diag_gaussian_logpdf: shape mismatch");
    }
    double acc = -0.5 * kLog2Pi * static_cast<double>(z.size());
    for (std::size_t d = 0; d < z.size(); ++d) {
        const double diff = z[d] - mu[d];
        acc += -0.5 * logvar[d] - 0.5 * diff * diff * std::exp(-logvar[d]);
    }
    return acc;
}

// d/dz log N(z; mu, diag(exp(logvar)))
inline Array diag_gaussian_score_z(const Array& z, const Array& mu, const Array& logvar) {
    if (!same_shape(z, mu) || !same_shape(z, logvar) || !z.is_vector()) {
        throw std::invalid_argument("diag_gaussian_score_z: shape mismatch");
    }
    Array s(z.shape());
    for (std::size_t d = 0; d < z.size(); ++d) {
        s[d] = -(z[d] - mu[d]) * std::exp(-logvar[d]);
    }
    return s;
}

// --- Gaussian mixture prior ---------------------------------------------------

// Mixture of K diagonal Gaussians over the latent space. Weights are stored
// as unnormalised logits; log-variances are clamped to the same range as the
// encoder head wherever they are consumed.
struct GmmPrior {
    Array logits;   // {K}
    Array means;    // {K, d}
    Array logvars;  // {K, d}, raw

    std::size_t components() const { return logits.size(); }
    std::size_t dim() const { return means.cols(); }
};

// Uniform weights, zero means, unit variances.
inline GmmPrior make_gmm_prior(std::size_t components, std::size_t dim) {
    if (components == 0 || dim == 0) throw std::invalid_argument("make_gmm_prior: zero size");
    GmmPrior p;
    p.logits = Array::zeros(Shape{components});
    p.means = Array::zeros(Shape{components, dim});
    p.logvars = Array::zeros(Shape{components, dim});
    return p;
}

inline void check_gmm_shapes(const GmmPrior& p) {
    if (!p.logits.is_vector() || !p.means.is_matrix() || !p.logvars.is_matrix() ||
        p.means.shape() != p.logvars.shape() || p.means.rows() != p.logits.size()) {
        throw std::invalid_argument("GmmPrior: inconsistent parameter shapes");
    }
}

namespace detail {

inline double clamp_logvar(double lv) {
    return std::min(std::max(lv, nn::kLogVarLo), nn::kLogVarHi);
}

// log w_k + log N(z; m_k, v_k) for every component.
inline std::vector<double> component_logterms(const GmmPrior& p, const Array& z) {
    check_gmm_shapes(p);
    if (!z.is_vector() || z.size() != p.dim()) {
        throw std::invalid_argument("gmm: latent point has shape " + shape_str(z.shape()) +
                                    ", prior dim is " + std::to_string(p.dim()));
    }
    const std::size_t K = p.components();
    const std::size_t d = p.dim();
    double lse = p.logits[0];
    for (double l : p.logits) lse = std::max(lse, l);
    double acc = 0.0;
    for (double l : p.logits) acc += std::exp(l - lse);
    lse += std::log(acc);

    std::vector<double> terms(K);
    for (std::size_t k = 0; k < K; ++k) {
        double t = p.logits[k] - lse - 0.5 * kLog2Pi * static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double lv = clamp_logvar(p.logvars.at(k, j));
            const double diff = z[j] - p.means.at(k, j);
            t += -0.5 * lv - 0.5 * diff * diff * std::exp(-lv);
        }
        terms[k] = t;
    }
    return terms;
}

}  // namespace detail

inline double gmm_logpdf(const GmmPrior& p, const Array& z) {
    const auto terms = detail::component_logterms(p, z);
    double m = terms[0];
    for (double t : terms) m = std::max(m, t);
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - m);
    return m + std::log(acc);
}

// Posterior component probabilities r_k(z); softmax of the component log terms.
inline Array gmm_responsibilities(const GmmPrior& p, const Array& z) {
    const auto terms = detail::component_logterms(p, z);
    double m = terms[0];
    for (double t : terms) m = std::max(m, t);
    Array r(Shape{terms.size()});
    double acc = 0.0;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        r[k] = std::exp(terms[k] - m);
        acc += r[k];
    }
    for (double& v : r) v /= acc;
    return r;
}

// d/dz log p(z): responsibility-weighted component scores.
inline Array gmm_score_z(const GmmPrior& p, const Array& z) {
    const Array r = gmm_responsibilities(p, z);
    Array s = Array::zeros(z.shape());
    for (std::size_t k = 0; k < p.components(); ++k) {
        for (std::size_t j = 0; j < p.dim(); ++j) {
            const double lv = detail::clamp_logvar(p.logvars.at(k, j));
            s[j] += r[k] * (-(z[j] - p.means.at(k, j)) * std::exp(-lv));
        }
    }
    return s;
}

// --- conditional likelihood and posterior scores ------------------------------

// d/dz log p(x | z) for a unit-variance Gaussian observation model around the
// decoder output: J_f(z)^T (x - f(z)).
inline Array likelihood_score_z(const nn::Mlp& decoder, const Array& z, const Array& x) {
    Array residual = mlp_forward(decoder, z);
    if (!same_shape(residual, x)) {
        throw std::invalid_argument("likelihood_score_z: decoder output " +
                                    shape_str(residual.shape()) + " vs observation " +
                                    shape_str(x.shape()));
    }
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = x[i] - residual[i];
    return mlp_vjp(decoder, z, residual);
}

inline double posterior_logpdf(const nn::Encoder& enc, const Array& x, const Array& z) {
    const auto out = encoder_apply(enc, x);
    return diag_gaussian_logpdf(z, out.mu, out.logvar);
}

// d/dx log q(z | x) at a fixed latent point z. The chain rule runs through
// the encoder heads only; z itself is held constant.
inline Array posterior_score_x(const nn::Encoder& enc, const Array& x, const Array& z) {
    const auto out = encoder_apply(enc, x);
    if (!same_shape(z, out.mu)) {
        throw std::invalid_argument("posterior_score_x: latent point has shape " +
                                    shape_str(z.shape()) + ", encoder emits " +
                                    shape_str(out.mu.shape()));
    }
    Array cot_mu(out.mu.shape());
    Array cot_lv(out.mu.shape());
    for (std::size_t d = 0; d < z.size(); ++d) {
        const double inv_var = std::exp(-out.logvar[d]);
        const double diff = z[d] - out.mu[d];
        cot_mu[d] = diff * inv_var;
        cot_lv[d] = -0.5 + 0.5 * diff * diff * inv_var;
    }
    return encoder_vjp(enc, x, cot_mu, cot_lv);
}

// --- one-dimensional quadrature checks ----------------------------------------

// A density on the line with enough structure to evaluate the score-matching
// objective two ways: logpdf, its first derivative (score) and the second
// derivative of logpdf (needed by the integration-by-parts form).
struct ScoredDensity1D {
    std::function<double(double)> logpdf;
    std::function<double(double)> score;
    std::function<double(double)> loglap;
};

inline ScoredDensity1D gaussian_density(double mean, double var) {
    if (!(var > 0.0)) throw std::invalid_argument("gaussian_density: variance must be > 0");
    return {
        [mean, var](double x) {
            const double d = x - mean;
            return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * d * d / var;
        },
        [mean, var](double x) { return -(x - mean) / var; },
        [var](double) { return -1.0 / var; },
    };
}

inline ScoredDensity1D gmm_density_1d(std::vector<double> weights, std::vector<double> means,
                                      std::vector<double> vars) {
    const std::size_t K = weights.size();
    if (K == 0 || means.size() != K || vars.size() != K) {
        throw std::invalid_argument("gmm_density_1d: component lists must have equal size");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw std::invalid_argument("gmm_density_1d: weights must be > 0");
        wsum += w;
    }
    for (double& w : weights) w /= wsum;
    for (double v : vars) {
        if (!(v > 0.0)) throw std::invalid_argument("gmm_density_1d: variances must be > 0");
    }

    auto logterms = [weights, means, vars, K](double x) {
        std::vector<double> t(K);
        for (std::size_t k = 0; k < K; ++k) {
            const double d = x - means[k];
            t[k] = std::log(weights[k]) - 0.5 * (kLog2Pi + std::log(vars[k])) -
                   0.5 * d * d / vars[k];
        }
        return t;
    };
    auto lse = [](const std::vector<double>& t) {
        double m = t[0];
        for (double v : t) m = std::max(m, v);
        double acc = 0.0;
        for (double v : t) acc += std::exp(v - m);
        return m + std::log(acc);
    };

    ScoredDensity1D d;
    d.logpdf = [logterms, lse](double x) { return lse(logterms(x)); };
    d.score = [logterms, lse, means, vars, K](double x) {
        const auto t = logterms(x);
        const double total = lse(t);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            s += std::exp(t[k] - total) * (-(x - means[k]) / vars[k]);
        }
        return s;
    };
    d.loglap = [logterms, lse, means, vars, K](double x) {
        const auto t = logterms(x);
        const double total = lse(t);
        double s = 0.0, s2 = 0.0, inv = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double r = std::exp(t[k] - total);
            const double sk = -(x - means[k]) / vars[k];
            s += r * sk;
            s2 += r * sk * sk;
            inv += r / vars[k];
        }
        return s2 - s * s - inv;
    };
    return d;
}

struct QuadGrid {
    double lo;
    double hi;
    std::size_t points;

    QuadGrid(double lo_, double hi_, std::size_t points_) : lo(lo_), hi(hi_), points(points_) {
        if (!(hi > lo) || points < 3) throw std::invalid_argument("QuadGrid: bad grid");
    }
    double step() const { return (hi - lo) / static_cast<double>(points - 1); }
};

// Trapezoidal rule over the grid.
inline double quad_integral(const std::function<double(double)>& f, const QuadGrid& g) {
    const double h = g.step();
    double acc = 0.5 * (f(g.lo) + f(g.hi));
    for (std::size_t i = 1; i + 1 < g.points; ++i) {
        acc += f(g.lo + h * static_cast<double>(i));
    }
    return acc * h;
}

namespace detail {

inline void check_normalised(const ScoredDensity1D& p, const QuadGrid& g) {
    const double mass = quad_integral([&p](double x) { return std::exp(p.logpdf(x)); }, g);
    if (std::abs(mass - 1.0) > 1e-4) {
        throw std::invalid_argument("quadrature grid does not capture the density: mass " +
                                    std::to_string(mass));
    }
}

}  // namespace detail

// E_p[ 1/2 (score_p - score_q)^2 ] computed directly on the grid.
inline double fisher_divergence_quadrature(const ScoredDensity1D& p, const ScoredDensity1D& q,
                                           const QuadGrid& g) {
    detail::check_normalised(p, g);
    return quad_integral(
        [&p, &q](double x) {
            const double d = p.score(x) - q.score(x);
            return std::exp(p.logpdf(x)) * 0.5 * d * d;
        },
        g);
}

struct IdentityCheck {
    double direct;        // E_p[ 1/2 (s_p - s_q)^2 ]
    double via_identity;  // E_p[ 1/2 s_q^2 + (log q)'' ] + E_p[ 1/2 s_p^2 ]
    double gap() const { return std::abs(direct - via_identity); }
};

// Integration-by-parts restatement of the divergence: expanding the square
// and moving the cross term onto the second derivative of log q leaves only
// quantities evaluable without the true score, plus a term independent of q.
inline IdentityCheck hyvarinen_identity_check(const ScoredDensity1D& p,
                                              const ScoredDensity1D& q, const QuadGrid& g) {
    IdentityCheck c;
    c.direct = fisher_divergence_quadrature(p, q, g);
    const double model_part = quad_integral(
        [&p, &q](double x) {
            const double sq = q.score(x);
            return std::exp(p.logpdf(x)) * (0.5 * sq * sq + q.loglap(x));
        },
        g);
    const double self_part = quad_integral(
        [&p](double x) {
            const double sp = p.score(x);
            return std::exp(p.logpdf(x)) * 0.5 * sp * sp;
        },
        g);
    c.via_identity = model_part + self_part;
    return c;
}

// --- expression builders ----------------------------------------------------

inline ad::Expr diag_gaussian_logpdf_expr(const ad::Expr& z, const ad::Expr& mu,
                                          const ad::Expr& logvar) {
    if (z.shape() != mu.shape() || z.shape() != logvar.shape() || z.shape().size() != 1) {
        throw std::invalid_argument("diag_gaussian_logpdf_expr: shape mismatch");
    }
    const double dim = static_cast<double>(z.shape()[0]);
    const ad::Expr diff = z - mu;
    return ad::constant(-0.5 * kLog2Pi * dim) - 0.5 * ad::sum(logvar) -
           0.5 * ad::sum(diff * diff * ad::exp(-logvar));
}

struct GmmVars {
    ad::Expr logits;   // {K}
    ad::Expr means;    // {K, d}
    ad::Expr logvars;  // {K, d}
};

inline GmmVars gmm_vars(const std::string& prefix, std::size_t components, std::size_t dim) {
    return {ad::variable(prefix + ".logits", Shape{components}),
            ad::variable(prefix + ".means", Shape{components, dim}),
            ad::variable(prefix + ".logvars", Shape{components, dim})};
}

inline ad::Expr gmm_logpdf_expr(const GmmVars& v, const ad::Expr& z) {
    const std::size_t K = v.logits.shape()[0];
    const ad::Expr log_norm = ad::logsumexp(v.logits);
    std::vector<ad::Expr> terms;
    terms.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        const ad::Expr lv = ad::clamp(ad::row(v.logvars, k), nn::kLogVarLo, nn::kLogVarHi);
        const ad::Expr mean = ad::row(v.means, k);
        terms.push_back(ad::index(v.logits, k) - log_norm +
                        diag_gaussian_logpdf_expr(z, mean, lv));
    }
    return ad::logsumexp(ad::stack(terms));
}

}  // namespace fae::density
