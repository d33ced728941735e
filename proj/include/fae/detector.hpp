#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "fae/array.hpp"
#include "fae/cmapss.hpp"
#include "fae/mlp.hpp"
#include "fae/model.hpp"

// Detection pipeline: deterministic reconstruction error through the
// posterior mean, nearest-rank percentile threshold, strict-inequality
// flagging, and standard binary classification metrics.

namespace fae::detect {

inline double reconstruction_error(const Model& m, const Array& x) {
    if (!x.is_vector() || x.size() != m.feature_dim) {
        throw std::invalid_argument("reconstruction_error: input " + shape_str(x.shape()) +
                                    ", model expects {" + std::to_string(m.feature_dim) + "}");
    }
    const auto enc = nn::encoder_apply(m.encoder, x);
    const Array recon = nn::mlp_forward(m.decoder, enc.mu);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - recon[i];
        err += d * d;
    }
    return err;
}

inline std::vector<double> reconstruction_errors(const Model& m,
                                                 const cmapss::EngineDataset& ds) {
    std::vector<double> errors;
    errors.reserve(ds.rows());
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        errors.push_back(reconstruction_error(m, ds.row_features(i)));
    }
    return errors;
}

// Nearest-rank percentile: ascending sort, then the value at 1-based index
// ceil(p/100 * n).
inline double calibrate_threshold(std::vector<double> errors, double percentile) {
    if (errors.empty()) throw std::invalid_argument("calibrate_threshold: empty error list");
    if (!(percentile > 0.0 && percentile <= 100.0)) {
        throw std::invalid_argument("calibrate_threshold: percentile must be in (0, 100]");
    }
    std::sort(errors.begin(), errors.end());
    const double n = static_cast<double>(errors.size());
    const std::size_t rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
    return errors[std::max<std::size_t>(rank, 1) - 1];
}

struct DetectionMetrics {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double fpr = 0.0;
};

inline DetectionMetrics evaluate(const std::vector<int>& flags, const std::vector<int>& labels) {
    if (flags.size() != labels.size()) {
        throw std::invalid_argument("evaluate: " + std::to_string(flags.size()) + " flags vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    DetectionMetrics m;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (flags[i] != 0 && flags[i] != 1) {
            throw std::invalid_argument("evaluate: flags must be binary");
        }
        if (labels[i] != 0 && labels[i] != 1) {
            throw std::invalid_argument("evaluate: labels must be binary");
        }
        if (flags[i] && labels[i]) ++m.tp;
        else if (flags[i] && !labels[i]) ++m.fp;
        else if (!flags[i] && labels[i]) ++m.fn;
        else ++m.tn;
    }
    const auto ratio = [](std::size_t num, std::size_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn);
    m.f1 = (m.precision + m.recall) == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    m.fpr = ratio(m.fp, m.fp + m.tn);
    return m;
}

struct DetectionReport {
    std::vector<double> errors;
    double threshold = 0.0;
    std::vector<int> flags;  // flags[i] == (errors[i] > threshold)
    std::optional<DetectionMetrics> metrics;  // present iff the dataset had labels
};

inline DetectionReport detect(const Model& m, const cmapss::EngineDataset& ds,
                              double threshold) {
    if (!std::isfinite(threshold)) {
        throw std::invalid_argument("detect: threshold must be finite");
    }
    DetectionReport rep;
    rep.threshold = threshold;
    rep.errors = reconstruction_errors(m, ds);
    rep.flags.reserve(rep.errors.size());
    for (double e : rep.errors) rep.flags.push_back(e > threshold ? 1 : 0);
    if (ds.has_labels()) rep.metrics = evaluate(rep.flags, ds.labels);
    return rep;
}

inline void write_report_csv(std::ostream& os, const DetectionReport& rep,
                             const cmapss::EngineDataset& ds) {
    const bool labeled = ds.has_labels();
    os << (labeled ? "row_index,unit,cycle,error,flagged,label\n"
                   : "row_index,unit,cycle,error,flagged\n");
    char buf[128];
    for (std::size_t i = 0; i < rep.errors.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%d,%d,%.17g,%d", i, ds.unit[i], ds.cycle[i],
                      rep.errors[i], rep.flags[i]);
        os << buf;
        if (labeled) os << ',' << ds.labels[i];
        os << '\n';
    }
}

}  // namespace fae::detect
