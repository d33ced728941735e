#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "fae/detector.hpp"

using namespace fae;
using namespace fae::detect;

namespace {

Model identity_free_model(std::size_t width) {
    FaeConfig cfg;
    cfg.latent_dim = 1;
    cfg.hidden_dim = 2;
    cfg.components = 1;
    Model m = make_model(width, cfg, LossKind::kFae);
    for (auto& l : m.decoder.layers) {
        l.W.fill(0.0);
        l.b.fill(0.0);
    }
    return m;  // f(z) = 0, so the squared error is ||x||^2
}

cmapss::EngineDataset dataset_from_errors(const Model& m, const std::vector<double>& targets,
                                          std::vector<int> labels = {}) {
    // One feature row per target error t: x = (sqrt(t), 0, ...) against the
    // zero decoder gives reconstruction error exactly t.
    cmapss::EngineDataset ds;
    const std::size_t width = m.feature_dim;
    ds.features = Array(Shape{targets.size(), width});
    for (std::size_t i = 0; i < targets.size(); ++i) {
        ds.features.at(i, 0) = std::sqrt(targets[i]);
        ds.unit.push_back(1);
        ds.cycle.push_back(static_cast<int>(i) + 1);
    }
    ds.labels = std::move(labels);
    ds.stats.mean = Array::zeros(Shape{width});
    ds.stats.divisor = Array::full(Shape{width}, 1.0);
    return ds;
}

}  // namespace

TEST_CASE("reconstruction error against a zero decoder is the squared norm") {
    const Model m = identity_free_model(3);
    CHECK(reconstruction_error(m, Array::vector({0.0, 0.0, 0.0})) == 0.0);
    CHECK(reconstruction_error(m, Array::vector({3.0, 4.0, 0.0})) ==
          Catch::Approx(25.0).margin(1e-12));
}

TEST_CASE("reconstruction error composes encoder and decoder exactly") {
    FaeConfig cfg;
    cfg.latent_dim = 2;
    cfg.hidden_dim = 5;
    cfg.components = 2;
    cfg.seed = 23;
    const Model m = make_model(4, cfg, LossKind::kFae);
    const Array x = Array::vector({0.4, -0.9, 1.2, 0.1});

    const nn::EncoderOutput enc = nn::encoder_apply(m.encoder, x);
    const Array fz = nn::mlp_forward(m.decoder, enc.mu);
    double want = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) want += (x[i] - fz[i]) * (x[i] - fz[i]);
    CHECK(std::abs(reconstruction_error(m, x) - want) < 1e-12);
}

TEST_CASE("threshold picks the nearest-rank percentile") {
    const std::vector<double> errors{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    CHECK(calibrate_threshold(errors, 90.0) == 9.0);
    CHECK(calibrate_threshold(errors, 100.0) == 10.0);
    CHECK(calibrate_threshold(errors, 10.0) == 1.0);
    CHECK(calibrate_threshold(errors, 0.1) == 1.0);  // rank clamps up to the first entry
    CHECK(calibrate_threshold({5.0, 5.0, 5.0}, 50.0) == 5.0);
    CHECK(calibrate_threshold({7.0}, 99.0) == 7.0);
    // order of the input does not matter
    CHECK(calibrate_threshold({10, 1, 9, 2, 8, 3, 7, 4, 6, 5}, 90.0) == 9.0);
}

TEST_CASE("threshold calibration validates its inputs") {
    CHECK_THROWS_AS(calibrate_threshold({}, 90.0), std::invalid_argument);
    CHECK_THROWS_AS(calibrate_threshold({1.0}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(calibrate_threshold({1.0}, 100.5), std::invalid_argument);
    CHECK_THROWS_AS(calibrate_threshold({1.0}, -3.0), std::invalid_argument);
}

TEST_CASE("flagging is strictly above the threshold") {
    const Model m = identity_free_model(2);
    const auto ds = dataset_from_errors(m, {1.0, 4.0, 9.0});
    const DetectionReport rep = detect::detect(m, ds, 4.0);
    REQUIRE(rep.flags.size() == 3);
    CHECK(rep.flags[0] == 0);
    CHECK(rep.flags[1] == 0);  // equality does not flag
    CHECK(rep.flags[2] == 1);
    CHECK_FALSE(rep.metrics.has_value());
}

TEST_CASE("a negative threshold flags every row of non-negative errors") {
    const Model m = identity_free_model(2);
    const auto ds = dataset_from_errors(m, {0.0, 2.0, 5.0});
    const DetectionReport rep = detect::detect(m, ds, -1.0);
    for (int f : rep.flags) CHECK(f == 1);
}

TEST_CASE("metrics match the worked confusion-matrix example") {
    std::vector<int> flags, labels;
    for (int i = 0; i < 8; ++i) { flags.push_back(1); labels.push_back(1); }   // TP
    for (int i = 0; i < 2; ++i) { flags.push_back(1); labels.push_back(0); }   // FP
    for (int i = 0; i < 2; ++i) { flags.push_back(0); labels.push_back(1); }   // FN
    for (int i = 0; i < 88; ++i) { flags.push_back(0); labels.push_back(0); }  // TN

    const DetectionMetrics m = evaluate(flags, labels);
    CHECK(m.tp == 8);
    CHECK(m.fp == 2);
    CHECK(m.fn == 2);
    CHECK(m.tn == 88);
    CHECK(m.precision == Catch::Approx(0.8).margin(1e-15));
    CHECK(m.recall == Catch::Approx(0.8).margin(1e-15));
    CHECK(m.f1 == Catch::Approx(0.8).margin(1e-15));
    CHECK(m.fpr == Catch::Approx(2.0 / 90.0).margin(1e-15));
}

TEST_CASE("degenerate metric denominators yield zero, not NaN") {
    // nothing flagged, nothing anomalous
    const DetectionMetrics none = evaluate({0, 0}, {0, 0});
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);
    CHECK(none.fpr == 0.0);
    // everything anomalous: FPR has no negatives to draw on
    const DetectionMetrics all = evaluate({1, 0}, {1, 1});
    CHECK(all.fpr == 0.0);
    CHECK(all.precision == 1.0);
    CHECK(all.recall == Catch::Approx(0.5));
}

TEST_CASE("evaluate validates lengths and binary values") {
    CHECK_THROWS_AS(evaluate({1, 0}, {1}), std::invalid_argument);
    CHECK_THROWS_AS(evaluate({2, 0}, {1, 0}), std::invalid_argument);
    CHECK_THROWS_AS(evaluate({1, 0}, {1, -1}), std::invalid_argument);
    // empty comparison degenerates to all-zero counts and metrics
    const DetectionMetrics empty = evaluate({}, {});
    CHECK(empty.tp + empty.fp + empty.fn + empty.tn == 0);
    CHECK(empty.f1 == 0.0);
}

TEST_CASE("raising the percentile never flags more rows") {
    SplitMix64 rng(404);
    const Model m = identity_free_model(2);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<double> errors;
        const std::size_t n = 1 + rng.below(60);
        for (std::size_t i = 0; i < n; ++i) errors.push_back(rng.uniform(0.0, 10.0));
        const auto ds = dataset_from_errors(m, errors);

        const double p_lo = rng.uniform(1.0, 99.0);
        const double p_hi = rng.uniform(p_lo, 100.0);
        const double t_lo = calibrate_threshold(errors, p_lo);
        const double t_hi = calibrate_threshold(errors, p_hi);
        CHECK(t_lo <= t_hi);

        const auto flags_lo = detect::detect(m, ds, t_lo).flags;
        const auto flags_hi = detect::detect(m, ds, t_hi).flags;
        std::size_t count_lo = 0, count_hi = 0;
        for (std::size_t i = 0; i < n; ++i) {
            count_lo += static_cast<std::size_t>(flags_lo[i]);
            count_hi += static_cast<std::size_t>(flags_hi[i]);
            // the high-threshold flag set is a subset of the low one
            CHECK(flags_hi[i] <= flags_lo[i]);
        }
        CHECK(count_hi <= count_lo);
    }
}

TEST_CASE("the calibrated threshold bounds the strictly-above fraction") {
    SplitMix64 rng(505);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> errors;
        const std::size_t n = 1 + rng.below(100);
        for (std::size_t i = 0; i < n; ++i) errors.push_back(rng.uniform(0.0, 5.0));
        const double p = rng.uniform(1.0, 100.0);
        const double lambda = calibrate_threshold(errors, p);
        std::size_t above = 0;
        for (double e : errors) above += (e > lambda) ? 1 : 0;
        const double frac = static_cast<double>(above) / static_cast<double>(n);
        CHECK(frac <= 1.0 - p / 100.0 + 1.0 / static_cast<double>(n) + 1e-12);
    }
}

TEST_CASE("report CSV includes labels only when present") {
    const Model m = identity_free_model(2);
    const auto labelled = dataset_from_errors(m, {1.0, 9.0}, {0, 1});
    const DetectionReport rep = detect::detect(m, labelled, 4.0);
    REQUIRE(rep.metrics.has_value());
    CHECK(rep.metrics->tp == 1);
    CHECK(rep.metrics->tn == 1);

    std::ostringstream os;
    write_report_csv(os, rep, labelled);
    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "row_index,unit,cycle,error,flagged,label");
    REQUIRE(std::getline(is, line));
    CHECK(line.rfind("0,1,1,", 0) == 0);
    CHECK(line.back() == '0');  // not flagged, label 0
    REQUIRE(std::getline(is, line));
    CHECK(line.rfind("1,1,2,", 0) == 0);
    CHECK(line.back() == '1');

    const auto unlabelled = dataset_from_errors(m, {1.0, 9.0});
    std::ostringstream os2;
    write_report_csv(os2, detect::detect(m, unlabelled, 4.0), unlabelled);
    std::istringstream is2(os2.str());
    REQUIRE(std::getline(is2, line));
    CHECK(line == "row_index,unit,cycle,error,flagged");
}

TEST_CASE("detect rejects a non-finite threshold and mismatched width") {
    const Model m = identity_free_model(2);
    const auto ds = dataset_from_errors(m, {1.0});
    CHECK_THROWS_AS(detect::detect(m, ds, std::numeric_limits<double>::quiet_NaN()),
                    std::invalid_argument);
    CHECK_THROWS_AS(reconstruction_error(m, Array::vector({1.0, 2.0, 3.0})),
                    std::invalid_argument);
}

TEST_CASE("empty dataset produces an empty report") {
    const Model m = identity_free_model(2);
    cmapss::EngineDataset ds;
    ds.features = Array(Shape{0, 2});
    ds.stats.mean = Array::zeros(Shape{2});
    ds.stats.divisor = Array::full(Shape{2}, 1.0);
    const DetectionReport rep = detect::detect(m, ds, 1.0);
    CHECK(rep.errors.empty());
    CHECK(rep.flags.empty());
    CHECK_FALSE(rep.metrics.has_value());
}
