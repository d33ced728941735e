#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fae/array.hpp"
#include "fae/rng.hpp"

// Run-to-failure sensor data in the standard 26-column turbofan layout:
// unit id, cycle index, three operating settings, 21 sensor channels.
// Within a unit, cycles run contiguously from 1 to the failure cycle.

namespace fae::cmapss {

inline constexpr std::size_t kSensorCount = 21;
inline constexpr std::size_t kSettingCount = 3;
inline constexpr std::size_t kColumnCount = 2 + kSettingCount + kSensorCount;

struct EngineRecord {
    int unit = 0;
    int cycle = 0;
    std::array<double, kSettingCount> settings{};
    std::array<double, kSensorCount> sensors{};
};

namespace detail {

[[noreturn]] inline void parse_fail(std::size_t line, const std::string& what) {
    throw std::invalid_argument("parse error at line " + std::to_string(line) + ": " + what);
}

inline double to_number(const std::string& tok, std::size_t line) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(tok, &used);
    } catch (const std::exception&) {
        parse_fail(line, "non-numeric token '" + tok + "'");
    }
    if (used != tok.size()) parse_fail(line, "non-numeric token '" + tok + "'");
    return v;
}

inline int to_natural(const std::string& tok, std::size_t line, const char* what) {
    const double v = to_number(tok, line);
    const int n = static_cast<int>(v);
    if (static_cast<double>(n) != v || n < 1) {
        parse_fail(line, std::string(what) + " must be a positive integer, got '" + tok + "'");
    }
    return n;
}

}  // namespace detail

// Reads the whitespace-separated layout, preserving row order. Validates the
// column count per line, numeric tokens, and the per-unit cycle contract
// (each unit's rows are consecutive with cycles 1, 2, ..., lifetime).
inline std::vector<EngineRecord> parse_cmapss(std::istream& in) {
    std::vector<EngineRecord> records;
    std::vector<int> seen_units;
    std::string line;
    std::size_t line_no = 0;
    int current_unit = 0;
    int expected_cycle = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream row(line);
        std::vector<std::string> tokens;
        for (std::string tok; row >> tok;) tokens.push_back(tok);
        if (tokens.empty()) continue;  // blank line
        if (tokens.size() != kColumnCount) {
            detail::parse_fail(line_no, "expected " + std::to_string(kColumnCount) +
                                            " columns, got " + std::to_string(tokens.size()));
        }
        EngineRecord r;
        r.unit = detail::to_natural(tokens[0], line_no, "unit");
        r.cycle = detail::to_natural(tokens[1], line_no, "cycle");
        for (std::size_t i = 0; i < kSettingCount; ++i) {
            r.settings[i] = detail::to_number(tokens[2 + i], line_no);
        }
        for (std::size_t i = 0; i < kSensorCount; ++i) {
            r.sensors[i] = detail::to_number(tokens[2 + kSettingCount + i], line_no);
        }
        if (r.unit != current_unit) {
            for (int u : seen_units) {
                if (u == r.unit) {
                    detail::parse_fail(line_no, "unit " + std::to_string(r.unit) +
                                                    " reappears after other units");
                }
            }
            seen_units.push_back(r.unit);
            current_unit = r.unit;
            expected_cycle = 1;
        }
        if (r.cycle != expected_cycle) {
            detail::parse_fail(line_no, "non-contiguous cycles for unit " +
                                            std::to_string(r.unit) + ": expected " +
                                            std::to_string(expected_cycle) + ", got " +
                                            std::to_string(r.cycle));
        }
        ++expected_cycle;
        records.push_back(r);
    }
    return records;
}

inline std::vector<EngineRecord> parse_cmapss_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open data file: " + path);
    try {
        return parse_cmapss(in);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

inline void write_cmapss(std::ostream& out, const std::vector<EngineRecord>& records) {
    char buf[32];
    for (const EngineRecord& r : records) {
        out << r.unit << ' ' << r.cycle;
        for (double s : r.settings) {
            std::snprintf(buf, sizeof(buf), " %.17g", s);
            out << buf;
        }
        for (double s : r.sensors) {
            std::snprintf(buf, sizeof(buf), " %.17g", s);
            out << buf;
        }
        out << '\n';
    }
}

inline void write_cmapss_file(const std::string& path, const std::vector<EngineRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write data file: " + path);
    write_cmapss(out, records);
}

// --- normalization ------------------------------------------------------------

// Per-sensor z-score statistics. `divisor` stores what apply divides by:
// the population standard deviation, or 1 for near-constant channels so they
// pass through centered instead of blowing up.
struct NormStats {
    Array mean{Shape{kSensorCount}};
    Array divisor{Shape{kSensorCount}};
};

inline constexpr double kDegenerateStd = 1e-8;

inline NormStats fit_normalizer(const std::vector<EngineRecord>& fit_rows) {
    if (fit_rows.empty()) throw std::invalid_argument("fit_normalizer: empty fitting set");
    NormStats st;
    const double n = static_cast<double>(fit_rows.size());
    for (const EngineRecord& r : fit_rows) {
        for (std::size_t s = 0; s < kSensorCount; ++s) st.mean[s] += r.sensors[s];
    }
    for (std::size_t s = 0; s < kSensorCount; ++s) st.mean[s] /= n;
    for (const EngineRecord& r : fit_rows) {
        for (std::size_t s = 0; s < kSensorCount; ++s) {
            const double d = r.sensors[s] - st.mean[s];
            st.divisor[s] += d * d;
        }
    }
    for (std::size_t s = 0; s < kSensorCount; ++s) {
        const double sd = std::sqrt(st.divisor[s] / n);
        st.divisor[s] = sd < kDegenerateStd ? 1.0 : sd;
    }
    return st;
}

// --- datasets -------------------------------------------------------------------

struct EngineDataset {
    Array features;            // {rows, kSensorCount}, normalized
    std::vector<int> unit;     // per row
    std::vector<int> cycle;    // per row
    std::vector<int> labels;   // empty, or one 0/1 entry per row
    NormStats stats;           // the stats the features were normalized with
    std::string provenance;

    std::size_t rows() const { return unit.size(); }
    bool has_labels() const { return !labels.empty(); }

    Array row_features(std::size_t i) const {
        const std::size_t width = features.cols();
        Array x(Shape{width});
        for (std::size_t s = 0; s < width; ++s) x[s] = features.at(i, s);
        return x;
    }
};

inline EngineDataset apply_normalizer(const std::vector<EngineRecord>& records,
                                      const NormStats& stats) {
    EngineDataset ds;
    ds.stats = stats;
    ds.features = Array(Shape{records.size(), kSensorCount});
    ds.unit.reserve(records.size());
    ds.cycle.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        ds.unit.push_back(records[i].unit);
        ds.cycle.push_back(records[i].cycle);
        for (std::size_t s = 0; s < kSensorCount; ++s) {
            ds.features.at(i, s) = (records[i].sensors[s] - stats.mean[s]) / stats.divisor[s];
        }
    }
    return ds;
}

// --- split and label --------------------------------------------------------------

// Healthy/anomalous split of run-to-failure trajectories. Per unit of
// lifetime T: the first floor(normal_fraction * T) cycles form the normal
// training pool; every remaining cycle goes to the evaluation set, labeled
// anomalous exactly when cycle > T - anomaly_window (the last W cycles
// before failure).
struct SplitResult {
    std::vector<EngineRecord> train_normal;
    std::vector<EngineRecord> eval_rows;
    std::vector<int> eval_labels;
    std::vector<int> short_units;  // lifetime <= window; labeled entirely anomalous
};

inline SplitResult split_and_label(const std::vector<EngineRecord>& records,
                                   double normal_fraction, int anomaly_window) {
    if (!(normal_fraction > 0.0 && normal_fraction < 1.0)) {
        throw std::invalid_argument("split_and_label: normal_fraction must be in (0, 1)");
    }
    if (anomaly_window < 1) {
        throw std::invalid_argument("split_and_label: anomaly_window must be >= 1");
    }
    // lifetime per unit = its maximum cycle (cycles are contiguous from 1)
    std::vector<std::pair<int, int>> lifetimes;  // (unit, lifetime), file order
    for (const EngineRecord& r : records) {
        if (lifetimes.empty() || lifetimes.back().first != r.unit) {
            lifetimes.emplace_back(r.unit, r.cycle);
        } else {
            lifetimes.back().second = std::max(lifetimes.back().second, r.cycle);
        }
    }

    SplitResult out;
    std::size_t li = 0;
    for (const EngineRecord& r : records) {
        while (lifetimes[li].first != r.unit) ++li;
        const int lifetime = lifetimes[li].second;
        const int pool_end = static_cast<int>(std::floor(normal_fraction * lifetime));
        if (r.cycle <= pool_end) {
            out.train_normal.push_back(r);
        } else {
            out.eval_rows.push_back(r);
            out.eval_labels.push_back(r.cycle > lifetime - anomaly_window ? 1 : 0);
        }
    }
    for (const auto& [unit, lifetime] : lifetimes) {
        if (lifetime <= anomaly_window) out.short_units.push_back(unit);
    }
    return out;
}

// Duplication augmentation: each row repeated `factor` times in place, so the
// multiset of rows is preserved factor-fold and order stays grouped.
inline EngineDataset augment_normals(const EngineDataset& ds, std::size_t factor) {
    if (factor == 0) throw std::invalid_argument("augment_normals: factor must be >= 1");
    EngineDataset out;
    out.stats = ds.stats;
    out.provenance = ds.provenance.empty() ? "" : ds.provenance + "; ";
    out.provenance += "augment=" + std::to_string(factor);
    const std::size_t width = ds.features.cols();
    out.features = Array(Shape{ds.rows() * factor, width});
    out.unit.reserve(ds.rows() * factor);
    out.cycle.reserve(ds.rows() * factor);
    const bool labeled = ds.has_labels();
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        for (std::size_t k = 0; k < factor; ++k) {
            const std::size_t j = out.unit.size();
            out.unit.push_back(ds.unit[i]);
            out.cycle.push_back(ds.cycle[i]);
            if (labeled) out.labels.push_back(ds.labels[i]);
            for (std::size_t s = 0; s < width; ++s) {
                out.features.at(j, s) = ds.features.at(i, s);
            }
        }
    }
    return out;
}

// --- synthetic fixture ----------------------------------------------------------

// Sensors that carry the degradation drift in generated data.
inline std::vector<std::size_t> synth_drifting_sensors() {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < kSensorCount; ++s) {
        if (s % 4 == 2) out.push_back(s);
    }
    return out;
}

// Generates run-to-failure trajectories: each sensor fluctuates around a
// fixed operating point, driven by two shared latent factors plus channel
// noise, so the healthy phase is low-dimensional. After 70% of the lifetime
// the drifting channels ramp linearly to a mean shift of
// drift_magnitude * sigma at the failure cycle. Deterministic per seed.
inline std::vector<EngineRecord> synth_generate(int n_units, int lifetime,
                                                double drift_magnitude, std::uint64_t seed) {
    if (n_units < 1 || lifetime < 1) {
        throw std::invalid_argument("synth_generate: n_units and lifetime must be >= 1");
    }
    if (drift_magnitude < 0.0) {
        throw std::invalid_argument("synth_generate: drift_magnitude must be >= 0");
    }
    constexpr double kResidualVar = 0.2;  // channel-noise share of unit variance
    std::array<double, kSensorCount> baseline{}, sigma{}, load1{}, load2{};
    for (std::size_t s = 0; s < kSensorCount; ++s) {
        baseline[s] = 100.0 + 25.0 * static_cast<double>(s);
        sigma[s] = 0.5 + 0.25 * static_cast<double>(s % 7);
        const double l1 = std::sin(0.3 + 0.31 * static_cast<double>(s));
        const double l2 = std::cos(0.2 + 0.47 * static_cast<double>(s));
        const double norm = std::sqrt(l1 * l1 + l2 * l2);
        load1[s] = l1 / norm;
        load2[s] = l2 / norm;
    }
    std::array<bool, kSensorCount> drifting{};
    for (std::size_t s : synth_drifting_sensors()) drifting[s] = true;

    const int onset = static_cast<int>(std::floor(0.7 * lifetime));
    CounterRng rng(seed);
    std::vector<EngineRecord> records;
    records.reserve(static_cast<std::size_t>(n_units) * static_cast<std::size_t>(lifetime));
    for (int u = 1; u <= n_units; ++u) {
        for (int c = 1; c <= lifetime; ++c) {
            EngineRecord r;
            r.unit = u;
            r.cycle = c;
            r.settings = {0.0, 0.0, 100.0};
            const double g1 = rng.normal(static_cast<std::uint64_t>(u),
                                         static_cast<std::uint64_t>(c), 0);
            const double g2 = rng.normal(static_cast<std::uint64_t>(u),
                                         static_cast<std::uint64_t>(c), 1);
            double delta = 0.0;
            if (c > onset && onset < lifetime) {
                delta = drift_magnitude * static_cast<double>(c - onset) /
                        static_cast<double>(lifetime - onset);
            }
            for (std::size_t s = 0; s < kSensorCount; ++s) {
                const double e = rng.normal(static_cast<std::uint64_t>(u),
                                            static_cast<std::uint64_t>(c), 2 + s);
                const double signal = std::sqrt(1.0 - kResidualVar) *
                                          (load1[s] * g1 + load2[s] * g2) +
                                      std::sqrt(kResidualVar) * e;
                const double shift = drifting[s] ? delta : 0.0;
                r.sensors[s] = baseline[s] + sigma[s] * (signal + shift);
            }
            records.push_back(r);
        }
    }
    return records;
}

}  // namespace fae::cmapss
