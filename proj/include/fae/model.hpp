#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fae/array.hpp"
#include "fae/cmapss.hpp"
#include "fae/densities.hpp"
#include "fae/mlp.hpp"
#include "fae/rng.hpp"

// The full model: Gaussian encoder, MLP decoder, mixture prior over the
// latent space, and the normalization stats it was trained with. Parameters
// travel as a named map so the optimizer, the expression plans, and the
// checkpoint format all speak the same dialect.

namespace fae {

using ParameterSet = std::map<std::string, Array>;

enum class LossKind : std::uint8_t {
    kFae,  // score-matching objective with the mixture prior
    kVae,  // negative ELBO baseline with a standard-normal prior
};

inline const char* loss_kind_name(LossKind k) { return k == LossKind::kFae ? "fae" : "vae"; }

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "fae") return LossKind::kFae;
    if (s == "vae") return LossKind::kVae;
    throw std::invalid_argument("unknown loss kind '" + s + "' (expected fae or vae)");
}

struct FaeConfig {
    std::size_t latent_dim = 2;
    std::size_t hidden_dim = 32;
    std::size_t components = 3;   // mixture components K
    std::size_t mc_samples = 1;   // Monte-Carlo draws L per input
    double k_stability = 1.0;     // weight on the stability term
    std::size_t batch_size = 16;
    std::size_t epochs = 50;
    double learning_rate = 1e-3;
    std::uint64_t seed = 7;
    bool prior_jitter = false;         // tiny noise on mixture means at init
    bool prior_random_weights = false; // random initial logits instead of equal
    bool early_stop = false;           // stop when train loss plateaus
    double grad_clip = 0.0;            // global-norm clip; 0 disables

    void validate() const {
        if (latent_dim < 1) throw std::invalid_argument("config: latent_dim must be >= 1");
        if (hidden_dim < 1) throw std::invalid_argument("config: hidden_dim must be >= 1");
        if (components < 1) throw std::invalid_argument("config: components must be >= 1");
        if (mc_samples < 1) throw std::invalid_argument("config: mc_samples must be >= 1");
        if (!(k_stability >= 0.0)) throw std::invalid_argument("config: k_stability must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) {
            throw std::invalid_argument("config: learning_rate must be > 0");
        }
        if (!(grad_clip >= 0.0)) throw std::invalid_argument("config: grad_clip must be >= 0");
    }
};

struct Model {
    FaeConfig cfg;
    LossKind kind = LossKind::kFae;
    std::size_t feature_dim = 0;
    nn::Encoder encoder;
    nn::Mlp decoder;
    density::GmmPrior prior;
    cmapss::NormStats stats;  // identity (mean 0, divisor 1) until trained
    // Sorted reconstruction errors on the (unaugmented) normal training pool,
    // cached so thresholds can be calibrated against the training set without
    // the training data at hand. Empty until a training run fills it.
    std::vector<double> calib_errors;
};

inline Model make_model(std::size_t feature_dim, const FaeConfig& cfg,
                        LossKind kind = LossKind::kFae) {
    cfg.validate();
    if (feature_dim < 1) throw std::invalid_argument("make_model: feature_dim must be >= 1");
    Model m;
    m.cfg = cfg;
    m.kind = kind;
    m.feature_dim = feature_dim;
    SplitMix64 rng(cfg.seed);
    m.encoder = nn::make_encoder(feature_dim, cfg.hidden_dim, cfg.latent_dim, rng);
    m.decoder = nn::make_mlp({cfg.latent_dim, cfg.hidden_dim, feature_dim}, rng);
    m.prior = density::make_gmm_prior(cfg.components, cfg.latent_dim);
    if (cfg.prior_random_weights) {
        for (double& l : m.prior.logits) l = rng.uniform(-1.0, 1.0);
    }
    if (cfg.prior_jitter) {
        for (double& v : m.prior.means) v = 0.01 * rng.normal();
    }
    m.stats.mean.fill(0.0);
    m.stats.divisor.fill(1.0);
    return m;
}

// Checkpoint / expression-variable names for every trainable array.
inline ParameterSet to_params(const Model& m) {
    ParameterSet p;
    p.emplace("enc.trunk.0.W", m.encoder.trunk.W);
    p.emplace("enc.trunk.0.b", m.encoder.trunk.b);
    p.emplace("enc.mu.W", m.encoder.mu_head.W);
    p.emplace("enc.mu.b", m.encoder.mu_head.b);
    p.emplace("enc.logvar.W", m.encoder.logvar_head.W);
    p.emplace("enc.logvar.b", m.encoder.logvar_head.b);
    for (std::size_t i = 0; i < m.decoder.layers.size(); ++i) {
        const std::string base = "dec." + std::to_string(i);
        p.emplace(base + ".W", m.decoder.layers[i].W);
        p.emplace(base + ".b", m.decoder.layers[i].b);
    }
    p.emplace("prior.logits", m.prior.logits);
    p.emplace("prior.means", m.prior.means);
    p.emplace("prior.logvars", m.prior.logvars);
    return p;
}

inline void apply_params(Model& m, const ParameterSet& params) {
    ParameterSet current = to_params(m);
    if (params.size() != current.size()) {
        throw std::invalid_argument("apply_params: expected " + std::to_string(current.size()) +
                                    " arrays, got " + std::to_string(params.size()));
    }
    for (const auto& [name, value] : params) {
        auto it = current.find(name);
        if (it == current.end()) {
            throw std::invalid_argument("apply_params: unknown parameter '" + name + "'");
        }
        if (it->second.shape() != value.shape()) {
            throw std::invalid_argument("apply_params: '" + name + "' has shape " +
                                        shape_str(value.shape()) + ", model expects " +
                                        shape_str(it->second.shape()));
        }
    }
    Array* slots[] = {&m.encoder.trunk.W,       &m.encoder.trunk.b, &m.encoder.mu_head.W,
                      &m.encoder.mu_head.b,     &m.encoder.logvar_head.W,
                      &m.encoder.logvar_head.b, &m.prior.logits,    &m.prior.means,
                      &m.prior.logvars};
    const char* names[] = {"enc.trunk.0.W", "enc.trunk.0.b", "enc.mu.W",    "enc.mu.b",
                           "enc.logvar.W",  "enc.logvar.b",  "prior.logits", "prior.means",
                           "prior.logvars"};
    for (std::size_t i = 0; i < 9; ++i) *slots[i] = params.at(names[i]);
    for (std::size_t i = 0; i < m.decoder.layers.size(); ++i) {
        const std::string base = "dec." + std::to_string(i);
        m.decoder.layers[i].W = params.at(base + ".W");
        m.decoder.layers[i].b = params.at(base + ".b");
    }
}

// Parameter names the optimizer updates. The baseline has no trainable
// prior: its latent prior is the fixed standard normal.
inline std::vector<std::string> trainable_param_names(const Model& m) {
    std::vector<std::string> names;
    for (const auto& [name, value] : to_params(m)) {
        if (m.kind == LossKind::kVae && name.rfind("prior.", 0) == 0) continue;
        names.push_back(name);
    }
    return names;
}

// Posterior-mean coordinates per row, the quantity latent-space figures are
// drawn from.
inline Array latent_embed(const Model& m, const cmapss::EngineDataset& ds) {
    if (ds.features.is_matrix() && ds.features.cols() != m.feature_dim) {
        throw std::invalid_argument("latent_embed: dataset width " +
                                    std::to_string(ds.features.cols()) + ", model expects " +
                                    std::to_string(m.feature_dim));
    }
    Array out(Shape{ds.rows(), m.cfg.latent_dim});
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        const auto enc = nn::encoder_apply(m.encoder, ds.row_features(i));
        for (std::size_t d = 0; d < m.cfg.latent_dim; ++d) out.at(i, d) = enc.mu[d];
    }
    return out;
}

}  // namespace fae
