// msense: generate synthetic multi-sensor data, run cross-validated
// robustness experiments, ablation sweeps and reports.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "msense/checkpoint.hpp"
#include "msense/harness.hpp"

namespace fs = std::filesystem;
using namespace msense;

namespace {

constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    int verbose = 0;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
    cmd->add_option("-c,--config", c.config, "Experiment config (JSON)");
    cmd->add_option("-s,--set", c.overrides, "Override a config key, e.g. train.epochs=50 (repeatable)");
    auto* out = cmd->add_option("-o,--out", c.out, "Output directory");
    if (needs_out) out->description("Output directory (overrides output_dir)");
    cmd->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
    cmd->add_option("--seed", c.seed, "Global seed");
}

ProgressFn progress_for(const Common& c) {
    if (!c.verbose) return {};
    return [](const std::string& msg) { std::cerr << "[msense] " << msg << "\n"; };
}

ExperimentConfig effective_config(const Common& c, bool needs_out = true) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
    for (const auto& o : c.overrides) cfg = apply_override(cfg, o);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (needs_out && cfg.output_dir.empty()) throw UsageError("no output directory: pass --out or set output_dir");
    return cfg;
}

void stamp_config(const ExperimentConfig& cfg, const fs::path& dir, const nlohmann::json& extra = nullptr) {
    nlohmann::json j = experiment_config_to_json(cfg);
    if (!extra.is_null()) j["sweep"] = extra;
    io::write_file(dir / "config.json", j.dump(2) + "\n");
}

int cmd_generate(const std::string& preset, const std::string& config, std::optional<std::size_t> n,
                 std::optional<std::uint64_t> seed, const std::vector<std::string>& overrides, const std::string& out) {
    if (out.empty()) throw UsageError("generate needs --out");
    if (preset.empty() == config.empty()) throw UsageError("generate needs exactly one of --preset or --config");
    nlohmann::json j;
    if (!preset.empty()) {
        j = synth_config_to_json(synth_preset(preset, n.value_or(500), seed.value_or(0)));
    } else {
        try {
            j = nlohmann::json::parse(io::read_file(config));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("generator config is not valid JSON: " + std::string(e.what()));
        }
        if (n) j["n_samples"] = *n;
        if (seed) j["seed"] = *seed;
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
        const std::string key = o.substr(0, eq);
        if (!j.contains(key) || key == "sensors") throw ConfigError("unknown generator key '" + key + "'");
        nlohmann::json v;
        try {
            v = nlohmann::json::parse(o.substr(eq + 1));
        } catch (const nlohmann::json::parse_error&) {
            v = o.substr(eq + 1);
        }
        if (v.is_number() != j[key].is_number() || v.is_string() != j[key].is_string()) {
            throw ConfigError("generator key '" + key + "' has the wrong type");
        }
        j[key] = v;
    }
    const SynthConfig cfg = synth_config_from_json(j);
    const Dataset ds = synth_generate(cfg);
    write_dataset(ds, out);
    io::write_file(fs::path(out) / "generator.json", synth_config_to_json(cfg).dump(2) + "\n");
    std::cout << "wrote " << ds.size() << " samples of '" << cfg.name << "' (" << to_string(cfg.task) << ") to " << out
              << "\n";
    for (const auto& s : ds.manifest.sensors) {
        std::cout << "  " << s.name << ": " << to_string(s.kind) << ", " << s.dim << " features";
        if (s.temporal()) std::cout << " x " << s.timesteps << " steps";
        std::cout << "\n";
    }
    return 0;
}

int cmd_run(const Common& c, bool dry_run) {
    ExperimentConfig cfg = effective_config(c, !dry_run);
    validate_experiment(cfg);
    const Dataset ds = load_experiment_dataset(cfg);
    resolve_scenarios(cfg, ds.manifest);
    if (dry_run) {
        std::cerr << "config valid: " << cfg.methods.size() << " methods, k=" << cfg.k << ", " << ds.size()
                  << " samples\n";
        return 0;
    }
    fs::create_directories(cfg.output_dir);
    stamp_config(cfg, cfg.output_dir);
    const auto report = run_cv_experiment(cfg, ds, progress_for(c));
    std::cout << format_full_sensor_table(report);
    return 0;
}

std::vector<double> parse_ratios(const std::string& text) {
    std::vector<double> out;
    for (auto cell : io::split(text)) {
        if (cell.empty()) continue;
        double v = 0;
        try {
            v = io::parse_number(cell, "--ratios");
        } catch (const DataError& e) {
            throw UsageError(e.what());
        }
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("ratios must lie in [0,1]");
        out.push_back(v);
    }
    return out;
}

int cmd_sweep(const std::string& kind, const Common& c, const std::optional<std::string>& ratios_text) {
    if (kind != "dropout-ratio" && kind != "esensi-grid") {
        throw UsageError("unknown ablation '" + kind + "' (expected dropout-ratio or esensi-grid)");
    }
    ExperimentConfig cfg = effective_config(c);
    std::vector<double> ratios = kDefaultSdRatios;
    if (ratios_text) {
        ratios = parse_ratios(*ratios_text);
        if (ratios.empty()) throw UsageError("--ratios needs at least one value");
    }
    // Method list is chosen by the ablation.
    cfg.methods = {kind == "dropout-ratio" ? "isensd" : "esensi"};
    validate_experiment(cfg);
    const Dataset ds = load_experiment_dataset(cfg);
    fs::create_directories(cfg.output_dir);
    nlohmann::json extra = {{"kind", kind}};
    if (kind == "dropout-ratio") extra["ratios"] = ratios;
    stamp_config(cfg, cfg.output_dir, extra);
    const auto rows = kind == "dropout-ratio" ? sweep_dropout_ratio(cfg, ds, ratios, progress_for(c))
                                              : esensi_config_grid(cfg, ds, progress_for(c));
    io::write_file(fs::path(cfg.output_dir) / (kind + ".csv"), ablation_csv(rows));
    for (const auto& r : rows) {
        std::printf("%-36s %s %.4f ± %.4f   PRS %.4f\n", r.label.c_str(), r.score_kind.c_str(), r.score_mean,
                    r.score_std, r.prs_mean);
    }
    return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
    if (in.empty()) throw UsageError("report needs --in");
    const auto report = read_report(in);
    if (!report.complete) std::cerr << "warning: report is incomplete: " << report.failure << "\n";
    std::cout << format_full_sensor_table(report) << "\n";
    std::printf("%-12s %-16s", "method", "sensor");
    for (double p : report.percents) std::printf("  PRS@%-5s", io::format_number(p * 100).c_str());
    std::printf("\n");
    for (const auto& m : report.methods) {
        for (const auto& s : report.sensors) {
            std::printf("%-12s %-16s", m.c_str(), s.c_str());
            for (double p : report.percents) {
                double v = std::nan("");
                for (const auto& a : report.aggregates)
                    if (a.method == m && a.sensor == s && a.percent == p) v = a.prs_mean;
                std::printf("  %-9.4f", v);
            }
            std::printf("\n");
        }
    }
    if (!out.empty()) write_report(report, out);
    return 0;
}

int cmd_train(const Common& c, const std::string& method, std::size_t fold) {
    ExperimentConfig cfg = effective_config(c);
    cfg.methods = {method};
    validate_experiment(cfg);
    if (fold >= cfg.k) throw UsageError("--fold must be below k=" + std::to_string(cfg.k));
    const Dataset raw = load_experiment_dataset(cfg);
    const auto split = kfold_split(raw.size(), cfg.k, cfg.seed);
    const auto pos = split.training_positions(fold);
    const auto [stats, ds] = zscore_fit_apply(raw, pos);
    const auto spec = resolve_method(method, cfg);
    const FoldSeeds seeds = fold_seeds(cfg.seed, fold);
    ModelBundle model = build_model(ds.manifest, spec.strategy, cfg.encoder, spec.esensi, seeds.init);
    TrainConfig tc = cfg.train_config();
    tc.sensor_dropout = spec.sensor_dropout;
    tc.temporal_dropout = spec.temporal_dropout;
    nn::Rng rng(seeds.train);
    const auto log = train(model, ds, pos, tc, rng);
    const fs::path dir = cfg.output_dir;
    save_checkpoint(model, dir / "model.json");
    nlohmann::json st = {{"mean", stats.mean}, {"stdev", stats.stdev}, {"fold", fold}, {"method", method}};
    io::write_file(dir / "normalization.json", st.dump(2) + "\n");
    stamp_config(cfg, dir);
    for (std::size_t g = 0; g < log.members.size(); ++g) {
        const auto& m = log.members[g];
        std::cerr << "member " << g << ": " << m.epochs_run << " epochs, best epoch " << m.best_epoch + 1 << "\n";
    }
    std::cout << "saved " << (dir / "model.json").string() << "\n";
    return 0;
}

int cmd_evaluate(const Common& c, const std::string& model_dir) {
    if (model_dir.empty()) throw UsageError("evaluate needs --model");
    ExperimentConfig cfg = c.config.empty() ? load_experiment_config(fs::path(model_dir) / "config.json")
                                            : load_experiment_config(c.config);
    for (const auto& o : c.overrides) cfg = apply_override(cfg, o);
    if (c.seed) cfg.seed = *c.seed;
    const auto model = load_checkpoint(fs::path(model_dir) / "model.json");
    const auto st = nlohmann::json::parse(io::read_file(fs::path(model_dir) / "normalization.json"));
    const NormalizationStats stats{st.at("mean").get<std::vector<std::vector<double>>>(),
                                   st.at("stdev").get<std::vector<std::vector<double>>>()};
    const std::size_t fold = st.at("fold").get<std::size_t>();
    const auto spec = resolve_method(st.at("method").get<std::string>(), cfg);
    const Dataset raw = load_experiment_dataset(cfg);
    if (raw.manifest.sensors != model.manifest.sensors) throw ConfigError("dataset does not match the checkpoint");
    const Dataset ds = zscore_apply(stats, raw);
    const auto split = kfold_split(raw.size(), cfg.k, cfg.seed);
    std::optional<Gallery> gallery;
    if (spec.policy.kind == PolicyKind::Exemplar) {
        gallery = build_feature_gallery(model, ds, split.training_positions(fold), spec.policy.exemplar);
    }
    std::vector<const Sample*> batch;
    std::vector<double> y;
    for (auto i : split.folds.at(fold)) {
        batch.push_back(&ds.samples[i]);
        y.push_back(ds.samples[i].target);
    }
    const auto predict_with = [&](const std::vector<MaskVector>& masks) {
        return predict_batch(model, batch, masks, spec.policy, gallery ? &*gallery : nullptr);
    };
    const auto full = predict_with(std::vector<MaskVector>(batch.size(), MaskVector::all_available(model.sensors())));
    std::printf("fold %zu, %zu samples, full-sensor %s %.4f\n", fold, batch.size(),
                score_kind(model.manifest.task).c_str(), predictive_score(y, full));
    const FoldSeeds seeds = fold_seeds(cfg.seed, fold);
    const auto scenarios = resolve_scenarios(cfg, model.manifest);
    for (std::size_t si = 0; si < scenarios.size(); ++si) {
        const auto& sensors = scenarios[si];
        for (double p : cfg.percents) {
            const auto masks = simulate_missingness(model.manifest, batch.size(),
                                                    {sensors, p, seeds.scenario(si)});
            const auto miss = predict_with(masks);
            std::printf("  %-16s p=%-5s score %.4f  PRS %.4f\n", scenario_label(model.manifest, sensors).c_str(),
                        io::format_number(p).c_str(), predictive_score(y, miss), prs(y, miss, full));
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Missing-sensor robustness experiments for multi-sensor models"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    std::string preset, gen_config, gen_out;
    std::optional<std::size_t> gen_n;
    std::optional<std::uint64_t> gen_seed;
    std::vector<std::string> gen_overrides;
    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
    gen->add_option("--preset", preset, "cropharvest-like | lfmc-like | pm25-like | synthetic-3");
    gen->add_option("-c,--config", gen_config, "Generator config (JSON)");
    gen->add_option("--n", gen_n, "Number of samples");
    gen->add_option("--seed", gen_seed, "Generator seed");
    gen->add_option("-s,--set", gen_overrides, "Override a generator key (repeatable)");
    gen->add_option("-o,--out", gen_out, "Output directory");

    Common run_opts;
    bool dry_run = false;
    auto* run = app.add_subcommand("run", "Cross-validated comparison under missing sensors");
    add_common(run, run_opts);
    run->add_flag("--dry-run", dry_run, "Validate the config and exit");

    Common sweep_opts;
    std::string sweep_kind;
    std::optional<std::string> ratios;
    auto* sweep = app.add_subcommand("sweep", "Ablation sweeps");
    sweep->add_option("kind", sweep_kind, "dropout-ratio | esensi-grid")->required();
    add_common(sweep, sweep_opts);
    sweep->add_option("--ratios", ratios, "Comma-separated sensor-dropout ratios");

    std::string report_in, report_out;
    auto* report = app.add_subcommand("report", "Summarize a finished run");
    report->add_option("-i,--in", report_in, "Run output directory")->required();
    report->add_option("-o,--out", report_out, "Rewrite summary and plot data here");

    Common train_opts;
    std::string train_method = "esensi";
    std::size_t train_fold = 0;
    auto* train_cmd = app.add_subcommand("train", "Train one method on one fold and save a checkpoint");
    add_common(train_cmd, train_opts);
    train_cmd->add_option("-m,--method", train_method, "Method name");
    train_cmd->add_option("--fold", train_fold, "Held-out fold index");

    Common eval_opts;
    std::string eval_model;
    auto* eval = app.add_subcommand("evaluate", "Evaluate a saved checkpoint on its held-out fold");
    add_common(eval, eval_opts, false);
    eval->add_option("--model", eval_model, "Directory written by train")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << "run with --help for usage\n";
        return kUsageError;
    }

    try {
        if (*gen) return cmd_generate(preset, gen_config, gen_n, gen_seed, gen_overrides, gen_out);
        if (*run) return cmd_run(run_opts, dry_run);
        if (*sweep) return cmd_sweep(sweep_kind, sweep_opts, ratios);
        if (*report) return cmd_report(report_in, report_out);
        if (*train_cmd) return cmd_train(train_opts, train_method, train_fold);
        if (*eval) return cmd_evaluate(eval_opts, eval_model);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kUsageError;
}
