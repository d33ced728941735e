#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fae/fae.hpp"

// fae — train score-matching / ELBO autoencoders on run-to-failure sensor
// data, score files for anomalies, export latent coordinates, generate
// synthetic fixtures, and run the numerical verification table.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CommonOpts {
    std::string data;
    std::string out_dir = ".";
    double normal_fraction = 0.5;
    int window = 30;
};

struct TrainOpts : CommonOpts {
    std::string loss = "fae";
    std::size_t augment = 2;
    fae::FaeConfig cfg;
};

struct DetectOpts : CommonOpts {
    std::string model;
    double percentile = 90.0;
    std::string calibrate = "train";
};

struct LatentOpts {
    std::string data;
    std::string model;
    std::string out_file = "latent.csv";
    int window = 30;
};

struct SynthOpts {
    int units = 100;
    int lifetime = 120;
    double drift = 5.0;
    std::uint64_t seed = 7;
    std::string out_file = "synth.txt";
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

// The resolved option values of the subcommand that ran, re-loadable via
// `fae --config <file>`.
void write_resolved_config(const CLI::App& sub, const std::string& out_dir) {
    std::string body = "[" + sub.get_name() + "]\n" + sub.config_to_str(true, false);
    write_text((fs::path(out_dir) / "config.ini").string(), body);
}

std::string labeling_note(int window) {
    return "anomalous iff cycle > lifetime - " + std::to_string(window);
}

json metrics_json(const fae::detect::DetectionReport& rep, double percentile,
                  const std::string& calibration, int window) {
    json j{
        {"threshold", rep.threshold},
        {"percentile", percentile},
        {"calibration", calibration},
        {"labeling", labeling_note(window)},
        {"rows", rep.errors.size()},
        {"flagged", static_cast<std::size_t>(
                        std::count(rep.flags.begin(), rep.flags.end(), 1))},
    };
    if (rep.metrics) {
        const auto& m = *rep.metrics;
        j["precision"] = m.precision;
        j["recall"] = m.recall;
        j["f1"] = m.f1;
        j["fpr"] = m.fpr;
        j["tp"] = m.tp;
        j["fp"] = m.fp;
        j["fn"] = m.fn;
        j["tn"] = m.tn;
    }
    return j;
}

// Labels a full run-to-failure file by the window convention so scored
// reports carry ground truth under the stated assumption.
std::vector<int> convention_labels(const std::vector<fae::cmapss::EngineRecord>& records,
                                   int window) {
    std::vector<int> lifetime_of;  // per row, resolved in a second pass
    std::vector<std::pair<int, int>> lifetimes;
    for (const auto& r : records) {
        if (lifetimes.empty() || lifetimes.back().first != r.unit) {
            lifetimes.emplace_back(r.unit, r.cycle);
        } else {
            lifetimes.back().second = r.cycle;
        }
    }
    std::vector<int> labels;
    labels.reserve(records.size());
    std::size_t li = 0;
    for (const auto& r : records) {
        while (lifetimes[li].first != r.unit) ++li;
        labels.push_back(r.cycle > lifetimes[li].second - window ? 1 : 0);
    }
    return labels;
}

int run_train(const TrainOpts& opt, const CLI::App& sub) {
    auto records = fae::cmapss::parse_cmapss_file(opt.data);
    if (records.empty()) throw std::runtime_error("no rows in " + opt.data);
    auto split = fae::cmapss::split_and_label(records, opt.normal_fraction, opt.window);
    for (int u : split.short_units) {
        std::cerr << "warning: unit " << u << " is not longer than the anomaly window; "
                  << "all of its evaluation rows are labeled anomalous\n";
    }
    if (split.train_normal.empty()) throw std::runtime_error("normal pool is empty");

    const auto stats = fae::cmapss::fit_normalizer(split.train_normal);
    auto pool = fae::cmapss::apply_normalizer(split.train_normal, stats);
    pool.provenance = "normal_fraction=" + std::to_string(opt.normal_fraction) +
                      "; window=" + std::to_string(opt.window);
    auto train_set = fae::cmapss::augment_normals(pool, opt.augment);
    auto eval_set = fae::cmapss::apply_normalizer(split.eval_rows, stats);
    eval_set.labels = split.eval_labels;

    const fae::LossKind kind = fae::parse_loss_kind(opt.loss);
    auto result = fae::train::train(train_set, opt.cfg, kind, &eval_set);

    result.model.calib_errors = fae::detect::reconstruction_errors(result.model, pool);
    std::sort(result.model.calib_errors.begin(), result.model.calib_errors.end());

    ensure_dir(opt.out_dir);
    const fs::path out(opt.out_dir);
    fae::ckpt::save_checkpoint(result.model, (out / "model.fae").string());
    {
        std::ofstream hist((out / "history.csv").string(), std::ios::binary);
        if (!hist) throw std::runtime_error("cannot write history.csv");
        fae::train::write_history_csv(hist, result.history);
    }
    const json prov{
        {"data", opt.data},
        {"loss", opt.loss},
        {"normal_fraction", opt.normal_fraction},
        {"anomaly_window", opt.window},
        {"augment", opt.augment},
        {"labeling", labeling_note(opt.window)},
        {"rows_train", train_set.rows()},
        {"rows_eval", eval_set.rows()},
        {"short_units", split.short_units},
    };
    write_text((out / "provenance.json").string(), prov.dump(2) + "\n");
    write_resolved_config(sub, opt.out_dir);
    std::cout << "trained " << opt.loss << " model: " << (out / "model.fae").string() << "\n";
    return 0;
}

int run_detect(const DetectOpts& opt, const CLI::App& sub) {
    const fae::Model model = fae::ckpt::load_checkpoint(opt.model);
    auto records = fae::cmapss::parse_cmapss_file(opt.data);
    if (records.empty()) throw std::runtime_error("no rows in " + opt.data);
    auto ds = fae::cmapss::apply_normalizer(records, model.stats);
    ds.labels = convention_labels(records, opt.window);

    double threshold = 0.0;
    if (opt.calibrate == "train") {
        if (model.calib_errors.empty()) {
            throw std::runtime_error(
                "checkpoint has no cached training errors; use --calibrate scored");
        }
        threshold = fae::detect::calibrate_threshold(model.calib_errors, opt.percentile);
    } else {
        threshold = fae::detect::calibrate_threshold(
            fae::detect::reconstruction_errors(model, ds), opt.percentile);
    }

    const auto report = fae::detect::detect(model, ds, threshold);
    ensure_dir(opt.out_dir);
    const fs::path out(opt.out_dir);
    {
        std::ofstream csv((out / "report.csv").string(), std::ios::binary);
        if (!csv) throw std::runtime_error("cannot write report.csv");
        fae::detect::write_report_csv(csv, report, ds);
    }
    write_text((out / "metrics.json").string(),
               metrics_json(report, opt.percentile, opt.calibrate, opt.window).dump(2) + "\n");
    write_resolved_config(sub, opt.out_dir);
    std::cout << "threshold " << threshold << ", flagged "
              << std::count(report.flags.begin(), report.flags.end(), 1) << " of "
              << report.errors.size() << " rows\n";
    return 0;
}

int run_export_latent(const LatentOpts& opt) {
    const fae::Model model = fae::ckpt::load_checkpoint(opt.model);
    auto records = fae::cmapss::parse_cmapss_file(opt.data);
    if (records.empty()) throw std::runtime_error("no rows in " + opt.data);
    auto ds = fae::cmapss::apply_normalizer(records, model.stats);
    ds.labels = convention_labels(records, opt.window);

    const fae::Array coords = fae::latent_embed(model, ds);
    const fs::path parent = fs::path(opt.out_file).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    std::ofstream csv(opt.out_file, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + opt.out_file);
    csv << "row_index,unit,cycle";
    for (std::size_t d = 0; d < model.cfg.latent_dim; ++d) csv << ",z" << d;
    csv << ",label\n";
    char buf[64];
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        csv << i << ',' << ds.unit[i] << ',' << ds.cycle[i];
        for (std::size_t d = 0; d < model.cfg.latent_dim; ++d) {
            std::snprintf(buf, sizeof(buf), ",%.17g", coords.at(i, d));
            csv << buf;
        }
        csv << ',' << ds.labels[i] << '\n';
    }
    std::cout << "wrote " << opt.out_file << " (" << ds.rows() << " rows)\n";
    return 0;
}

int run_verify() {
    const auto checks = fae::verify::run_all_density_checks();
    fae::verify::print_checks(std::cout, checks);
    if (!fae::verify::all_passed(checks)) {
        std::cerr << "verification failed\n";
        return 1;
    }
    return 0;
}

int run_synth(const SynthOpts& opt) {
    const auto records =
        fae::cmapss::synth_generate(opt.units, opt.lifetime, opt.drift, opt.seed);
    const fs::path parent = fs::path(opt.out_file).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    fae::cmapss::write_cmapss_file(opt.out_file, records);

    const json provenance{
        {"generator", "synth"},
        {"units", opt.units},
        {"lifetime", opt.lifetime},
        {"drift_sigma", opt.drift},
        {"seed", opt.seed},
        {"rows", records.size()},
        {"drifting_sensors", fae::cmapss::synth_drifting_sensors()},
    };
    const std::string sidecar = opt.out_file + ".provenance.json";
    std::ofstream meta(sidecar);
    meta << provenance.dump(2) << "\n";

    std::cout << "wrote " << opt.out_file << " (" << records.size() << " rows)\n";
    std::cout << "wrote " << sidecar << "\n";
    return 0;
}

void add_config_options(CLI::App* sub, fae::FaeConfig& cfg) {
    sub->add_option("--latent", cfg.latent_dim, "Latent dimension")->capture_default_str();
    sub->add_option("--hidden", cfg.hidden_dim, "Hidden layer width")->capture_default_str();
    sub->add_option("--components", cfg.components, "Mixture components in the latent prior")
        ->capture_default_str();
    sub->add_option("--mc-samples", cfg.mc_samples, "Monte-Carlo draws per input")
        ->capture_default_str();
    sub->add_option("--k-stability", cfg.k_stability, "Weight on the stability term")
        ->capture_default_str();
    sub->add_option("--batch", cfg.batch_size, "Minibatch size")->capture_default_str();
    sub->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
    sub->add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
    sub->add_option("--seed", cfg.seed, "Run seed (env FAE_SEED overrides the config value)")
        ->capture_default_str();
    sub->add_flag("--prior-jitter", cfg.prior_jitter,
                  "Add tiny noise to initial mixture means");
    sub->add_flag("--prior-random-weights", cfg.prior_random_weights,
                  "Randomize initial mixture logits instead of equal weights");
    sub->add_flag("--early-stop", cfg.early_stop,
                  "Stop when train loss plateaus (< 1e-6 over 5 epochs)");
    sub->add_option("--grad-clip", cfg.grad_clip, "Global-norm gradient clip (0 = off)")
        ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Score-matching autoencoder anomaly detection for run-to-failure sensor data"};
    app.require_subcommand(0, 1);
    app.set_config("--config", "", "Read options from a previous run's config.ini");

    TrainOpts train_opt;
    DetectOpts detect_opt;
    LatentOpts latent_opt;
    SynthOpts synth_opt;

    CLI::App* train = app.add_subcommand("train", "Fit a model on the normal pool of a file");
    train->configurable();
    train->add_option("--data", train_opt.data, "Run-to-failure data file")->required();
    train->add_option("--loss", train_opt.loss, "Objective: fae or vae")
        ->check(CLI::IsMember({"fae", "vae"}))
        ->capture_default_str();
    train->add_option("--normal-fraction", train_opt.normal_fraction,
                      "Leading fraction of each unit's life used as the normal pool")
        ->capture_default_str();
    train->add_option("--window", train_opt.window, "Anomaly window: last W cycles are anomalous")
        ->capture_default_str();
    train->add_option("--augment", train_opt.augment, "Duplication factor for the normal pool")
        ->capture_default_str();
    train->add_option("--out", train_opt.out_dir, "Output directory")->capture_default_str();
    add_config_options(train, train_opt.cfg);

    CLI::App* detect = app.add_subcommand("detect", "Score a file against a trained model");
    detect->configurable();
    detect->add_option("--model", detect_opt.model, "Checkpoint path")->required();
    detect->add_option("--data", detect_opt.data, "Data file to score")->required();
    detect->add_option("--percentile", detect_opt.percentile, "Threshold percentile")
        ->capture_default_str();
    detect->add_option("--calibrate", detect_opt.calibrate,
                       "Threshold source: train (cached training errors) or scored")
        ->check(CLI::IsMember({"train", "scored"}))
        ->capture_default_str();
    detect->add_option("--window", detect_opt.window, "Labeling window for metrics")
        ->capture_default_str();
    detect->add_option("--out", detect_opt.out_dir, "Output directory")->capture_default_str();

    CLI::App* latent = app.add_subcommand("export-latent",
                                          "Write per-row posterior-mean coordinates");
    latent->configurable();
    latent->add_option("--model", latent_opt.model, "Checkpoint path")->required();
    latent->add_option("--data", latent_opt.data, "Data file to embed")->required();
    latent->add_option("--window", latent_opt.window, "Labeling window")->capture_default_str();
    latent->add_option("--out", latent_opt.out_file, "Output CSV file")->capture_default_str();

    CLI::App* verify = app.add_subcommand(
        "verify", "Run divergence, identity, and score-consistency checks");
    (void)verify;

    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic run-to-failure fixture");
    synth->configurable();
    synth->add_option("--units", synth_opt.units, "Number of units")->capture_default_str();
    synth->add_option("--lifetime", synth_opt.lifetime, "Cycles per unit")->capture_default_str();
    synth->add_option("--drift", synth_opt.drift, "Mean drift at failure, in sigma units")
        ->capture_default_str();
    synth->add_option("--seed", synth_opt.seed,
                      "Generator seed (env FAE_SEED overrides the config value)")
        ->capture_default_str();
    synth->add_option("--out", synth_opt.out_file, "Output data file")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\nRun with --help for usage.\n";
        return 2;
    }

    // the env seed beats both command line and config file, and is written back
    // into the option so the echoed config.ini reproduces this exact run
    if (const char* env_seed = std::getenv("FAE_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env_seed, &end, 10);
        if (end == env_seed || *end != '\0') {
            std::cerr << "FAE_SEED must be an unsigned integer, got '" << env_seed << "'\n";
            return 2;
        }
        train_opt.cfg.seed = v;
        synth_opt.seed = v;
        for (CLI::App* sub : {train, synth}) {
            if (CLI::Option* o = sub->get_option_no_throw("--seed")) {
                o->clear();
                o->add_result(std::to_string(v));
            }
        }
    }

    try {
        if (train->parsed()) return run_train(train_opt, *train);
        if (detect->parsed()) return run_detect(detect_opt, *detect);
        if (latent->parsed()) return run_export_latent(latent_opt);
        if (verify->parsed()) return run_verify();
        if (synth->parsed()) return run_synth(synth_opt);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    std::cerr << app.help();
    return 2;
}
