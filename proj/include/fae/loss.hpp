#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fae/array.hpp"
#include "fae/autodiff.hpp"
#include "fae/densities.hpp"
#include "fae/mlp.hpp"
#include "fae/model.hpp"
#include "fae/rng.hpp"

// The training objectives. The score-matching loss per input X, averaged
// over L reparameterized draws z = mu(X) + sigma(X) * eps:
//
//   score_match     mean_l 1/2 || d/dz log q(z|X) - d/dz log p(z) - d/dz log p(X|z) ||^2
//   reconstruction  mean_l 1/2 || X - f(z) ||^2
//   stability       mean_l 1/2 || d/dX log q(z|X) ||^2   (z held fixed inside the gradient)
//   total           score_match + reconstruction + k_stability * stability
//
// The baseline objective is the negative ELBO with a standard-normal prior:
// reconstruction plus the closed-form KL(q(z|X) || N(0, I)), the latter
// reported in the score_match slot of the breakdown.
//
// All three score terms are built symbolically, so the parameter gradient of
// the total differentiates through them (including through the sampled z),
// while the stability term's inner gradient itself treats z as a constant.

namespace fae::loss {

struct LossBreakdown {
    double score_match = 0.0;
    double reconstruction = 0.0;
    double stability = 0.0;
    double total = 0.0;
};

inline Array reparameterize(const Array& mu, const Array& logvar, const Array& eps) {
    if (!same_shape(mu, logvar) || !same_shape(mu, eps) || !mu.is_vector()) {
        throw std::invalid_argument("reparameterize: shape mismatch");
    }
    Array z(mu.shape());
    for (std::size_t d = 0; d < z.size(); ++d) {
        z[d] = mu[d] + std::exp(0.5 * logvar[d]) * eps[d];
    }
    return z;
}

// Deterministic supply of reparameterization noise, keyed so that loss value
// and loss gradient consume identical draws, and distinct (sample, draw)
// pairs never collide.
struct NoiseSource {
    CounterRng rng;

    explicit NoiseSource(std::uint64_t key) : rng(key) {}

    double eps(std::uint64_t sample, std::uint64_t draw, std::uint64_t dim) const {
        return rng.normal(sample, draw, dim);
    }

    Array eps_vector(std::uint64_t sample, std::uint64_t draw, std::size_t dims) const {
        Array e(Shape{dims});
        for (std::size_t d = 0; d < dims; ++d) e[d] = eps(sample, draw, d);
        return e;
    }
};

inline std::uint64_t noise_key(std::uint64_t seed, std::uint64_t context) {
    return mix64(seed ^ mix64(context ^ 0x9E3779B97F4A7C15ull));
}

// Context for held-out evaluation noise: fixed across epochs so evaluation
// curves move only when parameters do.
inline constexpr std::uint64_t kEvalNoiseContext = 0x6576616cull;

// --- symbolic construction ----------------------------------------------------

struct LossExprs {
    ad::Expr x;
    std::vector<ad::Expr> eps;  // one variable per Monte-Carlo draw, "eps.<l>"
    std::vector<ad::Expr> z;    // sampled latents
    ad::Expr score_match;
    ad::Expr reconstruction;
    ad::Expr stability;
    ad::Expr total;
};

inline LossExprs build_fae_exprs(std::size_t feature_dim, const FaeConfig& cfg) {
    LossExprs e;
    e.x = ad::variable("x", Shape{feature_dim});
    const auto enc = nn::encoder_vars("enc", feature_dim, cfg.hidden_dim, cfg.latent_dim);
    const auto dec = nn::mlp_vars("dec", {cfg.latent_dim, cfg.hidden_dim, feature_dim});
    const auto prior = density::gmm_vars("prior", cfg.components, cfg.latent_dim);
    const auto encoded = nn::encoder_expr(enc, e.x);
    const ad::Expr sigma = ad::exp(0.5 * encoded.logvar);

    ad::Expr t1 = ad::constant(0.0);
    ad::Expr t2 = ad::constant(0.0);
    ad::Expr t3 = ad::constant(0.0);
    for (std::size_t l = 0; l < cfg.mc_samples; ++l) {
        const ad::Expr epsl = ad::variable("eps." + std::to_string(l), Shape{cfg.latent_dim});
        e.eps.push_back(epsl);
        const ad::Expr z = encoded.mu + sigma * epsl;
        e.z.push_back(z);

        const ad::Expr logq = density::diag_gaussian_logpdf_expr(z, encoded.mu, encoded.logvar);
        const ad::Expr score_q = ad::gradient_of(logq, z);
        const ad::Expr score_prior = ad::gradient_of(density::gmm_logpdf_expr(prior, z), z);
        const ad::Expr decoded = nn::mlp_expr(dec, z);
        const ad::Expr loglik = ad::constant(-0.5) * ad::sqnorm(e.x - decoded);
        const ad::Expr score_lik = ad::gradient_of(loglik, z);
        const ad::Expr fixed_z[] = {z};
        const ad::Expr score_x = ad::gradient_of(logq, e.x, fixed_z);

        t1 = t1 + 0.5 * ad::sqnorm(score_q - score_prior - score_lik);
        t2 = t2 + 0.5 * ad::sqnorm(e.x - decoded);
        t3 = t3 + 0.5 * ad::sqnorm(score_x);
    }
    const ad::Expr inv_l = ad::constant(1.0 / static_cast<double>(cfg.mc_samples));
    e.score_match = inv_l * t1;
    e.reconstruction = inv_l * t2;
    e.stability = inv_l * t3;
    e.total = e.score_match + e.reconstruction + cfg.k_stability * e.stability;
    return e;
}

inline LossExprs build_vae_exprs(std::size_t feature_dim, const FaeConfig& cfg) {
    LossExprs e;
    e.x = ad::variable("x", Shape{feature_dim});
    const auto enc = nn::encoder_vars("enc", feature_dim, cfg.hidden_dim, cfg.latent_dim);
    const auto dec = nn::mlp_vars("dec", {cfg.latent_dim, cfg.hidden_dim, feature_dim});
    const auto encoded = nn::encoder_expr(enc, e.x);
    const ad::Expr sigma = ad::exp(0.5 * encoded.logvar);

    ad::Expr t2 = ad::constant(0.0);
    for (std::size_t l = 0; l < cfg.mc_samples; ++l) {
        const ad::Expr epsl = ad::variable("eps." + std::to_string(l), Shape{cfg.latent_dim});
        e.eps.push_back(epsl);
        const ad::Expr z = encoded.mu + sigma * epsl;
        e.z.push_back(z);
        t2 = t2 + 0.5 * ad::sqnorm(e.x - nn::mlp_expr(dec, z));
    }
    const ad::Expr kl = 0.5 * ad::sum(encoded.mu * encoded.mu + ad::exp(encoded.logvar) -
                                      ad::constant(1.0) - encoded.logvar);
    e.score_match = kl;
    e.reconstruction = ad::constant(1.0 / static_cast<double>(cfg.mc_samples)) * t2;
    e.stability = ad::constant(0.0);
    e.total = e.score_match + e.reconstruction + cfg.k_stability * e.stability;
    return e;
}

// --- compiled loss ----------------------------------------------------------

// Owns the value and value-plus-gradient execution plans for one loss kind.
// Parameters are bound once per optimizer step; samples stream through.
class LossGraph {
public:
    LossGraph(std::size_t feature_dim, const FaeConfig& cfg, LossKind kind)
        : cfg_(cfg), feature_dim_(feature_dim) {
        cfg.validate();
        exprs_ = kind == LossKind::kFae ? build_fae_exprs(feature_dim, cfg)
                                        : build_vae_exprs(feature_dim, cfg);
        const std::vector<ad::Expr> terms = {exprs_.score_match, exprs_.reconstruction,
                                             exprs_.stability};
        value_plan_.emplace(terms, /*check_finite=*/false);
        for (const std::string& name : value_plan_->variable_names()) {
            if (name != "x" && name.rfind("eps.", 0) != 0) param_names_.push_back(name);
        }
        std::vector<ad::Expr> grad_outs = terms;
        for (ad::Expr& g : ad::named_gradient_exprs(exprs_.total, param_names_)) {
            grad_outs.push_back(std::move(g));
        }
        grad_plan_.emplace(grad_outs, /*check_finite=*/false);
    }

    const LossExprs& exprs() const { return exprs_; }
    const std::vector<std::string>& param_names() const { return param_names_; }
    std::size_t feature_dim() const { return feature_dim_; }
    const FaeConfig& config() const { return cfg_; }

    // Binds every parameter the graph uses; extra entries are ignored (the
    // baseline graph has no prior variables).
    void bind_parameters(const ParameterSet& params) {
        for (const auto& [name, value] : params) {
            if (value_plan_->has_variable(name)) value_plan_->bind(name, value);
            if (grad_plan_->has_variable(name)) grad_plan_->bind(name, value);
        }
    }

    LossBreakdown sample_value(const Array& x, const NoiseSource& noise,
                               std::uint64_t sample_index) {
        bind_sample(*value_plan_, x, noise, sample_index);
        value_plan_->run();
        return read_terms(*value_plan_, sample_index);
    }

    // Evaluates the breakdown and adds the gradient of the total into `acc`
    // (one array per param_names() entry, allocated on first use).
    LossBreakdown sample_value_grad(const Array& x, const NoiseSource& noise,
                                    std::uint64_t sample_index, ParameterSet& acc) {
        bind_sample(*grad_plan_, x, noise, sample_index);
        grad_plan_->run();
        const LossBreakdown bd = read_terms(*grad_plan_, sample_index);
        for (std::size_t i = 0; i < param_names_.size(); ++i) {
            const Array& g = grad_plan_->output(3 + i);
            if (!g.all_finite()) {
                throw std::runtime_error("non-finite gradient for " + param_names_[i] +
                                         " at sample " + std::to_string(sample_index));
            }
            auto [it, fresh] = acc.try_emplace(param_names_[i], g.shape());
            Array& slot = it->second;
            for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += g[k];
        }
        return bd;
    }

    LossBreakdown batch_value(const std::vector<Array>& xs, const NoiseSource& noise) {
        check_batch(xs);
        LossBreakdown sum;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const LossBreakdown bd = sample_value(xs[i], noise, i);
            sum.score_match += bd.score_match;
            sum.reconstruction += bd.reconstruction;
            sum.stability += bd.stability;
        }
        return finalize(sum, xs.size());
    }

    LossBreakdown batch_value_grad(const std::vector<Array>& xs, const NoiseSource& noise,
                                   ParameterSet& grads) {
        check_batch(xs);
        grads.clear();
        LossBreakdown sum;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const LossBreakdown bd = sample_value_grad(xs[i], noise, i, grads);
            sum.score_match += bd.score_match;
            sum.reconstruction += bd.reconstruction;
            sum.stability += bd.stability;
        }
        const double inv = 1.0 / static_cast<double>(xs.size());
        for (auto& [name, g] : grads) {
            for (double& v : g) v *= inv;
        }
        return finalize(sum, xs.size());
    }

private:
    void check_batch(const std::vector<Array>& xs) const {
        if (xs.empty()) throw std::invalid_argument("loss: empty batch");
        for (const Array& x : xs) {
            if (!x.is_vector() || x.size() != feature_dim_) {
                throw std::invalid_argument("loss: sample has shape " + shape_str(x.shape()) +
                                            ", expected {" + std::to_string(feature_dim_) + "}");
            }
        }
    }

    void bind_sample(ad::Plan& plan, const Array& x, const NoiseSource& noise,
                     std::uint64_t sample_index) {
        plan.bind("x", x);
        for (std::size_t l = 0; l < cfg_.mc_samples; ++l) {
            plan.bind("eps." + std::to_string(l),
                      noise.eps_vector(sample_index, l, cfg_.latent_dim));
        }
    }

    LossBreakdown read_terms(const ad::Plan& plan, std::uint64_t sample_index) const {
        LossBreakdown bd;
        bd.score_match = plan.output_scalar(0);
        bd.reconstruction = plan.output_scalar(1);
        bd.stability = plan.output_scalar(2);
        const char* names[] = {"score_match", "reconstruction", "stability"};
        const double values[] = {bd.score_match, bd.reconstruction, bd.stability};
        for (int i = 0; i < 3; ++i) {
            if (!std::isfinite(values[i])) {
                throw std::runtime_error("non-finite " + std::string(names[i]) +
                                         " term at sample " + std::to_string(sample_index));
            }
        }
        bd.total = bd.score_match + bd.reconstruction + cfg_.k_stability * bd.stability;
        return bd;
    }

    LossBreakdown finalize(LossBreakdown sum, std::size_t count) const {
        const double inv = 1.0 / static_cast<double>(count);
        LossBreakdown bd;
        bd.score_match = sum.score_match * inv;
        bd.reconstruction = sum.reconstruction * inv;
        bd.stability = sum.stability * inv;
        bd.total = bd.score_match + bd.reconstruction + cfg_.k_stability * bd.stability;
        return bd;
    }

    FaeConfig cfg_;
    std::size_t feature_dim_;
    LossExprs exprs_;
    std::optional<ad::Plan> value_plan_;
    std::optional<ad::Plan> grad_plan_;
    std::vector<std::string> param_names_;
};

// --- one-shot entry points -----------------------------------------------------

inline LossBreakdown fae_loss(const std::vector<Array>& batch, const Model& m,
                              const NoiseSource& noise) {
    LossGraph g(m.feature_dim, m.cfg, LossKind::kFae);
    g.bind_parameters(to_params(m));
    return g.batch_value(batch, noise);
}

inline LossBreakdown elbo_loss(const std::vector<Array>& batch, const Model& m,
                               const NoiseSource& noise) {
    LossGraph g(m.feature_dim, m.cfg, LossKind::kVae);
    g.bind_parameters(to_params(m));
    return g.batch_value(batch, noise);
}

inline ParameterSet loss_gradient(const std::vector<Array>& batch, const Model& m,
                                  const NoiseSource& noise,
                                  LossBreakdown* breakdown = nullptr) {
    LossGraph g(m.feature_dim, m.cfg, m.kind);
    g.bind_parameters(to_params(m));
    ParameterSet grads;
    const LossBreakdown bd = g.batch_value_grad(batch, noise, grads);
    if (breakdown) *breakdown = bd;
    return grads;
}

}  // namespace fae::loss
