#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fae/array.hpp"
#include "fae/cmapss.hpp"
#include "fae/loss.hpp"
#include "fae/model.hpp"
#include "fae/rng.hpp"

// Minibatch training: per epoch, a seeded full permutation of the normal
// pool is walked in batches, one Adam step per batch. Everything that draws
// randomness is keyed on (seed, epoch, batch), so a run is a pure function
// of (dataset, config, loss kind).

namespace fae::train {

struct AdamState {
    ParameterSet m;  // first moments
    ParameterSet v;  // second moments
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-3;
};

inline AdamState make_adam_state(const ParameterSet& params, double learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    for (const auto& [name, p] : params) {
        s.m.emplace(name, Array::zeros(p.shape()));
        s.v.emplace(name, Array::zeros(p.shape()));
    }
    return s;
}

// Standard Adam with bias correction; epsilon is added outside the square
// root. Only parameters present in `grads` are touched.
inline void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& s) {
    ++s.t;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        auto mit = s.m.find(name);
        auto vit = s.v.find(name);
        if (pit == params.end() || mit == s.m.end() || vit == s.v.end()) {
            throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name +
                                        "'");
        }
        Array& p = pit->second;
        Array& m = mit->second;
        Array& v = vit->second;
        if (!same_shape(p, g) || !same_shape(m, g)) {
            throw std::invalid_argument("adam_step: shape mismatch for '" + name + "'");
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon);
        }
    }
}

// Global-norm gradient clipping; no-op when max_norm <= 0.
inline void clip_gradients(ParameterSet& grads, double max_norm) {
    if (!(max_norm > 0.0)) return;
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double x : g) sq += x * x;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
        for (double& x : g) x *= scale;
    }
}

struct EpochStats {
    std::size_t epoch = 0;  // 1-based
    loss::LossBreakdown train;
    loss::LossBreakdown heldout;
    bool has_heldout = false;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
};

struct TrainResult {
    Model model;
    TrainHistory history;
};

namespace detail {

inline std::uint64_t shuffle_key(std::uint64_t seed, std::uint64_t epoch) {
    return mix64(seed ^ mix64(epoch ^ 0x73687566ull));
}

inline std::vector<Array> dataset_rows(const cmapss::EngineDataset& ds) {
    std::vector<Array> xs;
    xs.reserve(ds.rows());
    for (std::size_t i = 0; i < ds.rows(); ++i) xs.push_back(ds.row_features(i));
    return xs;
}

}  // namespace detail

// Early-stop plateau test: stop after epoch e when total train loss improved
// by less than this over the trailing window.
inline constexpr double kEarlyStopDelta = 1e-6;
inline constexpr std::size_t kEarlyStopWindow = 5;

inline TrainResult train(const cmapss::EngineDataset& normal_data, const FaeConfig& cfg,
                         LossKind kind, const cmapss::EngineDataset* heldout = nullptr) {
    cfg.validate();
    if (normal_data.rows() == 0) throw std::invalid_argument("train: empty dataset");
    const std::size_t feature_dim = normal_data.features.cols();

    TrainResult out;
    out.model = make_model(feature_dim, cfg, kind);
    out.model.stats = normal_data.stats;

    loss::LossGraph graph(feature_dim, cfg, kind);
    ParameterSet params = to_params(out.model);
    ParameterSet trainable;
    for (const std::string& name : graph.param_names()) trainable.emplace(name, params.at(name));
    AdamState adam = make_adam_state(trainable, cfg.learning_rate);

    const std::vector<Array> xs = detail::dataset_rows(normal_data);
    std::vector<Array> heldout_xs;
    if (heldout && heldout->rows() > 0) heldout_xs = detail::dataset_rows(*heldout);
    const loss::NoiseSource eval_noise(loss::noise_key(cfg.seed, loss::kEvalNoiseContext));

    const std::size_t n = xs.size();
    const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    std::vector<Array> batch;
    ParameterSet grads;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto perm = random_permutation(n, detail::shuffle_key(cfg.seed, epoch));
        loss::LossBreakdown epoch_sum;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            batch.clear();
            for (std::size_t i = begin; i < end; ++i) batch.push_back(xs[perm[i]]);

            graph.bind_parameters(params);
            const loss::NoiseSource noise(
                loss::noise_key(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) | b));
            loss::LossBreakdown bd;
            try {
                bd = graph.batch_value_grad(batch, noise, grads);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("training aborted at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(b) + ": " + e.what());
            }
            const double weight = static_cast<double>(batch.size());
            epoch_sum.score_match += bd.score_match * weight;
            epoch_sum.reconstruction += bd.reconstruction * weight;
            epoch_sum.stability += bd.stability * weight;

            clip_gradients(grads, cfg.grad_clip);
            adam_step(params, grads, adam);
        }

        EpochStats es;
        es.epoch = epoch;
        const double inv = 1.0 / static_cast<double>(n);
        es.train.score_match = epoch_sum.score_match * inv;
        es.train.reconstruction = epoch_sum.reconstruction * inv;
        es.train.stability = epoch_sum.stability * inv;
        es.train.total = es.train.score_match + es.train.reconstruction +
                         cfg.k_stability * es.train.stability;
        if (!heldout_xs.empty()) {
            graph.bind_parameters(params);
            es.heldout = graph.batch_value(heldout_xs, eval_noise);
            es.has_heldout = true;
        }
        out.history.epochs.push_back(es);

        if (cfg.early_stop && out.history.epochs.size() > kEarlyStopWindow) {
            const auto& hist = out.history.epochs;
            const double before = hist[hist.size() - 1 - kEarlyStopWindow].train.total;
            const double now = hist.back().train.total;
            if (before - now < kEarlyStopDelta) break;
        }
    }

    apply_params(out.model, params);
    return out;
}

// History CSV: one row per (epoch, split), matching the loss breakdown.
inline void write_history_csv(std::ostream& os, const TrainHistory& history) {
    os << "epoch,split,score_match,reconstruction,stability,total\n";
    char buf[160];
    auto emit = [&os, &buf](std::size_t epoch, const char* split,
                            const loss::LossBreakdown& bd) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", epoch, split,
                      bd.score_match, bd.reconstruction, bd.stability, bd.total);
        os << buf;
    };
    for (const EpochStats& es : history.epochs) {
        emit(es.epoch, "train", es.train);
        if (es.has_heldout) emit(es.epoch, "test", es.heldout);
    }
}

}  // namespace fae::train
