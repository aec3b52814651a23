#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "msense/dataset.hpp"
#include "msense/error.hpp"
#include "msense/io.hpp"
#include "msense/masking.hpp"
#include "msense/metrics.hpp"
#include "msense/model.hpp"
#include "msense/preprocess.hpp"
#include "msense/synth.hpp"
#include "msense/train.hpp"

namespace msense {

inline constexpr int kReportSchemaVersion = 1;

/// Sensors withheld together in a fraction `percent` of validation samples.
struct MissingnessScenario {
    std::vector<std::size_t> sensors;
    double percent = 0.0;
    std::uint64_t seed = 0;
};

inline std::string scenario_label(const DatasetManifest& m, std::span<const std::size_t> sensors) {
    std::string out;
    for (auto s : sensors) out += (out.empty() ? "" : "+") + m.sensors.at(s).name;
    return out;
}

inline void validate_scenario(const DatasetManifest& m, const MissingnessScenario& sc) {
    if (sc.sensors.empty()) throw ConfigError("scenario names no sensor");
    for (auto s : sc.sensors) {
        if (s >= m.sensors.size()) throw ConfigError("scenario sensor index out of range");
        if (!m.sensors[s].temporal()) {
            throw ConfigError("static sensor '" + m.sensors[s].name + "' cannot be withheld");
        }
    }
    if (!(sc.percent >= 0.0 && sc.percent <= 1.0)) throw ConfigError("scenario percent must lie in [0,1]");
}

/// Availability masks for a validation fold of `fold_size` samples. The
/// affected samples are a prefix of one seeded permutation, so the sets are
/// nested across percentages that share a seed.
inline std::vector<MaskVector> simulate_missingness(const DatasetManifest& m, std::size_t fold_size,
                                                    const MissingnessScenario& sc) {
    validate_scenario(m, sc);
    std::vector<MaskVector> masks(fold_size, MaskVector::all_available(m.sensors.size()));
    std::vector<std::size_t> order(fold_size);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(sc.seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto affected = static_cast<std::size_t>(std::llround(sc.percent * static_cast<double>(fold_size)));
    for (std::size_t i = 0; i < affected; ++i) {
        for (auto s : sc.sensors) masks[order[i]].available[s] = 0;
    }
    return masks;
}

// ---------------------------------------------------------------- config

struct ExperimentConfig {
    // Dataset source: a manifest on disk, or a generator preset.
    std::string manifest;
    std::string data_dir;  // empty: the manifest's directory
    std::string preset;
    std::size_t preset_n = 600;
    std::uint64_t preset_seed = 0;

    std::vector<std::string> methods{"input", "itempd", "feature", "ensemble", "isensd", "isensd-nr", "esensi"};
    std::size_t k = 10;
    std::uint64_t seed = 0;
    std::vector<double> percents{0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::vector<std::string>> scenario_sensors;  // empty: each temporal sensor alone

    EncoderConfig encoder;
    std::size_t epochs = 300;
    std::size_t batch_size = 128;
    std::size_t patience = 10;
    double validation_fraction = 0.1;
    double learning_rate = 1e-3;

    double sd_ratio = 0.2;
    double td_ratio = 0.2;
    EsensiOptions esensi;
    ExemplarOptions exemplar;

    std::size_t threads = 0;  // 0: hardware concurrency
    bool record_wall_time = false;
    std::string output_dir;

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.patience = patience;
        t.validation_fraction = validation_fraction;
        t.adam.learning_rate = learning_rate;
        return t;
    }
};

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    return {
        {"dataset",
         {{"manifest", c.manifest},
          {"data_dir", c.data_dir},
          {"preset", c.preset},
          {"n", c.preset_n},
          {"seed", c.preset_seed}}},
        {"methods", c.methods},
        {"k", c.k},
        {"seed", c.seed},
        {"percents", c.percents},
        {"scenario_sensors", c.scenario_sensors},
        {"encoder",
         {{"embedding_dim", c.encoder.embedding_dim},
          {"layers", c.encoder.layers},
          {"dropout", c.encoder.dropout},
          {"kernel_width", c.encoder.kernel_width}}},
        {"train",
         {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"patience", c.patience},
          {"validation_fraction", c.validation_fraction},
          {"learning_rate", c.learning_rate}}},
        {"sd_ratio", c.sd_ratio},
        {"td_ratio", c.td_ratio},
        {"esensi",
         {{"use_encoding", c.esensi.use_encoding},
          {"use_normalization", c.esensi.use_normalization},
          {"combine", to_string(c.esensi.combine)}}},
        {"exemplar",
         {{"gallery_size", c.exemplar.gallery_size},
          {"use_cca", c.exemplar.use_cca},
          {"cca_components", c.exemplar.cca_components}}},
        {"threads", c.threads},
        {"record_wall_time", c.record_wall_time},
        {"output_dir", c.output_dir},
    };
}

namespace detail {

/// Rejects keys absent from `schema` and values whose JSON type differs
/// (integers are accepted where a float is expected).
inline void check_against(const nlohmann::json& schema, const nlohmann::json& value, const std::string& path) {
    using nlohmann::json;
    const auto kind = [](const json& j) -> std::string {
        if (j.is_boolean()) return "boolean";
        if (j.is_number_unsigned() || j.is_number_integer()) return "integer";
        if (j.is_number_float()) return "number";
        if (j.is_string()) return "string";
        if (j.is_array()) return "array";
        if (j.is_object()) return "object";
        return "null";
    };
    const std::string want = kind(schema), got = kind(value);
    const bool ok = want == got || (want == "number" && got == "integer");
    if (!ok) throw ConfigError("config key '" + path + "' expects " + want + ", got " + got);
    if (want == "integer" && value.is_number_integer() && value.get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + path + "' must be non-negative");
    }
    if (schema.is_object()) {
        for (auto it = value.begin(); it != value.end(); ++it) {
            const std::string sub = path.empty() ? it.key() : path + "." + it.key();
            if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + sub + "'");
            check_against(schema[it.key()], it.value(), sub);
        }
    }
}

}  // namespace detail

/// Strict parse: unknown keys and mistyped values raise ConfigError; absent
/// keys keep their defaults.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    const ExperimentConfig defaults;
    nlohmann::json merged = experiment_config_to_json(defaults);
    detail::check_against(merged, j, "");
    merged.merge_patch(j);
    ExperimentConfig c;
    try {
        const auto& d = merged["dataset"];
        c.manifest = d["manifest"].get<std::string>();
        c.data_dir = d["data_dir"].get<std::string>();
        c.preset = d["preset"].get<std::string>();
        c.preset_n = d["n"].get<std::size_t>();
        c.preset_seed = d["seed"].get<std::uint64_t>();
        c.methods = merged["methods"].get<std::vector<std::string>>();
        c.k = merged["k"].get<std::size_t>();
        c.seed = merged["seed"].get<std::uint64_t>();
        c.percents = merged["percents"].get<std::vector<double>>();
        c.scenario_sensors = merged["scenario_sensors"].get<std::vector<std::vector<std::string>>>();
        const auto& e = merged["encoder"];
        c.encoder.embedding_dim = e["embedding_dim"].get<std::size_t>();
        c.encoder.layers = e["layers"].get<std::size_t>();
        c.encoder.dropout = e["dropout"].get<double>();
        c.encoder.kernel_width = e["kernel_width"].get<std::size_t>();
        const auto& t = merged["train"];
        c.epochs = t["epochs"].get<std::size_t>();
        c.batch_size = t["batch_size"].get<std::size_t>();
        c.patience = t["patience"].get<std::size_t>();
        c.validation_fraction = t["validation_fraction"].get<double>();
        c.learning_rate = t["learning_rate"].get<double>();
        c.sd_ratio = merged["sd_ratio"].get<double>();
        c.td_ratio = merged["td_ratio"].get<double>();
        const auto& es = merged["esensi"];
        c.esensi.use_encoding = es["use_encoding"].get<bool>();
        c.esensi.use_normalization = es["use_normalization"].get<bool>();
        c.esensi.combine = combine_from_string(es["combine"].get<std::string>());
        const auto& ex = merged["exemplar"];
        c.exemplar.gallery_size = ex["gallery_size"].get<std::size_t>();
        c.exemplar.use_cca = ex["use_cca"].get<bool>();
        c.exemplar.cca_components = ex["cca_components"].get<std::size_t>();
        c.threads = merged["threads"].get<std::size_t>();
        c.record_wall_time = merged["record_wall_time"].get<bool>();
        c.output_dir = merged["output_dir"].get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("invalid experiment config: ") + ex.what());
    }
    return c;
}

/// Applies `key=value` with a dotted key path. The value is read as JSON
/// when it parses as such, otherwise as a bare string.
inline ExperimentConfig apply_override(const ExperimentConfig& base, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        value = text;
    }
    nlohmann::json patch = value;
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
    nlohmann::json current = experiment_config_to_json(base);
    detail::check_against(experiment_config_to_json(ExperimentConfig{}), patch, "");
    current.merge_patch(patch);
    return experiment_config_from_json(current);
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    auto c = experiment_config_from_json(j);
    // Relative paths resolve against the config file's directory.
    const auto base = path.parent_path();
    for (std::string* p : {&c.manifest, &c.data_dir, &c.output_dir}) {
        if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
    }
    return c;
}

// ---------------------------------------------------------------- methods

/// How a named comparison method is built, trained and queried.
struct MethodSpec {
    std::string name;
    FusionStrategy strategy = FusionStrategy::Input;
    std::optional<EsensiOptions> esensi;
    std::optional<SensorDropoutConfig> sensor_dropout;
    std::optional<TemporalDropoutConfig> temporal_dropout;
    MissingPolicy policy;
};

inline const std::vector<std::string>& registered_methods() {
    static const std::vector<std::string> names{"input", "itempd", "feature", "ensemble", "isensd", "isensd-nr", "esensi"};
    return names;
}

inline MethodSpec resolve_method(const std::string& name, const ExperimentConfig& c) {
    MethodSpec m;
    m.name = name;
    if (name == "input") {
        m.policy.kind = PolicyKind::MeanImpute;
    } else if (name == "itempd") {
        m.temporal_dropout = TemporalDropoutConfig{c.td_ratio, 0.0};
        m.policy.kind = PolicyKind::TdValueImpute;
        m.policy.td_value = 0.0;
    } else if (name == "feature") {
        m.strategy = FusionStrategy::Feature;
        m.policy.kind = PolicyKind::Exemplar;
        m.policy.exemplar = c.exemplar;
    } else if (name == "ensemble") {
        m.strategy = FusionStrategy::Ensemble;
        m.policy.kind = PolicyKind::Ignore;
    } else if (name == "isensd" || name == "isensd-nr") {
        SensorDropoutConfig sd;
        sd.mode = name == "isensd" ? SensorDropoutMode::Ratio : SensorDropoutMode::Combinations;
        sd.ratio = c.sd_ratio;
        m.sensor_dropout = sd;
        m.policy.kind = PolicyKind::MeanImpute;
    } else if (name == "esensi") {
        m.strategy = FusionStrategy::Esensi;
        m.esensi = c.esensi;
        m.policy.kind = PolicyKind::Ignore;
    } else {
        throw ConfigError("unknown method '" + name + "' (expected one of input, itempd, feature, ensemble, isensd, "
                          "isensd-nr, esensi)");
    }
    return m;
}

inline void validate_experiment(const ExperimentConfig& c) {
    if (c.methods.empty()) throw ConfigError("no methods selected");
    for (const auto& m : c.methods) resolve_method(m, c);
    if (c.k < 2) throw ConfigError("k must be >= 2");
    if (c.percents.empty()) throw ConfigError("percent grid is empty");
    for (double p : c.percents) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("percents must lie in [0,1]");
    }
    if (c.manifest.empty() == c.preset.empty()) throw ConfigError("set exactly one of dataset.manifest or dataset.preset");
    if (!(c.sd_ratio >= 0.0 && c.sd_ratio <= 1.0)) throw ConfigError("sd_ratio must lie in [0,1]");
    if (!(c.td_ratio >= 0.0 && c.td_ratio < 1.0)) throw ConfigError("td_ratio must lie in [0,1)");
    c.encoder.validate();
    c.train_config().validate();
}

inline Dataset load_experiment_dataset(const ExperimentConfig& c) {
    if (!c.preset.empty()) return synth_generate(synth_preset(c.preset, c.preset_n, c.preset_seed));
    const std::filesystem::path manifest(c.manifest);
    const std::filesystem::path dir = c.data_dir.empty() ? manifest.parent_path() : std::filesystem::path(c.data_dir);
    return load_dataset(manifest, dir);
}

/// Resolves scenario sensor names; the default is each temporal sensor alone.
inline std::vector<std::vector<std::size_t>> resolve_scenarios(const ExperimentConfig& c, const DatasetManifest& m) {
    std::vector<std::vector<std::size_t>> out;
    if (c.scenario_sensors.empty()) {
        for (auto s : m.temporal_sensors()) out.push_back({s});
    } else {
        for (const auto& names : c.scenario_sensors) {
            std::vector<std::size_t> idx;
            for (const auto& n : names) idx.push_back(m.sensor_index(n));
            out.push_back(std::move(idx));
        }
    }
    for (const auto& sensors : out) validate_scenario(m, {sensors, 0.0, 0});
    return out;
}

// ---------------------------------------------------------------- results

struct RunResult {
    std::string method;
    std::size_t fold = 0;
    std::string sensor;
    double percent = 0.0;
    std::string score_kind;
    double score = 0.0;
    double rmse_miss = 0.0;
    double rmse_full = 0.0;
    double prs = 1.0;
    double seconds = 0.0;

    bool operator==(const RunResult&) const = default;
};

struct Aggregate {
    std::string method;
    std::string sensor;
    double percent = 0.0;
    std::size_t folds = 0;
    double score_mean = 0.0, score_std = 0.0;
    double prs_mean = 0.0, prs_std = 0.0;
    double rmse_miss_mean = 0.0, rmse_full_mean = 0.0;
};

struct RobustnessReport {
    nlohmann::json config;
    std::string dataset;
    std::string score_kind;
    std::vector<std::string> methods;
    std::vector<std::string> sensors;  // scenario labels
    std::vector<double> percents;
    std::vector<RunResult> results;
    std::vector<Aggregate> aggregates;
    bool complete = true;
    std::string failure;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// splitmix64 finalizer; derives independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Seeds used for one fold: model initialisation, the training stream, and
/// the missingness draw of each scenario.
struct FoldSeeds {
    std::uint64_t init;
    std::uint64_t train;
    std::uint64_t base;
    std::uint64_t scenario(std::size_t index) const { return detail::mix_seed(base, 1000 + index); }
};

inline FoldSeeds fold_seeds(std::uint64_t seed, std::size_t fold) {
    const std::uint64_t base = detail::mix_seed(seed, fold);
    return {detail::mix_seed(base, 1), detail::mix_seed(base, 2), base};
}

/// Fold-mean and fold-standard-deviation per (method, sensor, percent), in
/// the order the cells first appear.
inline std::vector<Aggregate> aggregate_results(const std::vector<RunResult>& results) {
    std::vector<Aggregate> out;
    std::map<std::tuple<std::string, std::string, double>, std::size_t> index;
    std::vector<std::vector<const RunResult*>> cells;
    for (const auto& r : results) {
        auto key = std::make_tuple(r.method, r.sensor, r.percent);
        auto [it, fresh] = index.emplace(key, cells.size());
        if (fresh) {
            cells.emplace_back();
            out.push_back({r.method, r.sensor, r.percent});
        }
        cells[it->second].push_back(&r);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::vector<double> score, prs, miss, full;
        for (const auto* r : cells[i]) {
            score.push_back(r->score);
            prs.push_back(r->prs);
            miss.push_back(r->rmse_miss);
            full.push_back(r->rmse_full);
        }
        out[i].folds = cells[i].size();
        std::tie(out[i].score_mean, out[i].score_std) = detail::mean_std(score);
        std::tie(out[i].prs_mean, out[i].prs_std) = detail::mean_std(prs);
        out[i].rmse_miss_mean = detail::mean_std(miss).first;
        out[i].rmse_full_mean = detail::mean_std(full).first;
    }
    return out;
}

// ---------------------------------------------------------------- runner

namespace detail {

struct FoldJob {
    std::size_t method = 0;
    std::size_t fold = 0;
};

/// Trains one method on one fold and evaluates every scenario on the same
/// validation fold against that fold's full-sensor predictions.
inline std::vector<RunResult> run_fold(const ExperimentConfig& c, const MethodSpec& spec, const Dataset& raw,
                                       const FoldSplit& split, std::size_t fold,
                                       const std::vector<std::vector<std::size_t>>& scenarios) {
    using clock = std::chrono::steady_clock;
    const auto started = clock::now();
    const auto train_pos = split.training_positions(fold);
    const auto [stats, ds] = zscore_fit_apply(raw, train_pos);
    (void)stats;

    const FoldSeeds seeds = fold_seeds(c.seed, fold);
    ModelBundle model = build_model(ds.manifest, spec.strategy, c.encoder, spec.esensi, seeds.init);
    TrainConfig tc = c.train_config();
    tc.sensor_dropout = spec.sensor_dropout;
    tc.temporal_dropout = spec.temporal_dropout;
    nn::Rng rng(seeds.train);
    train(model, ds, train_pos, tc, rng);

    std::optional<Gallery> gallery;
    if (spec.policy.kind == PolicyKind::Exemplar) gallery = build_feature_gallery(model, ds, train_pos, spec.policy.exemplar);

    const auto& val_pos = split.folds[fold];
    std::vector<const Sample*> batch;
    std::vector<double> y;
    for (auto i : val_pos) {
        batch.push_back(&ds.samples[i]);
        y.push_back(ds.samples[i].target);
    }
    const std::size_t n = batch.size();
    const auto predict_with = [&](const std::vector<MaskVector>& masks) {
        return predict_batch(model, batch, masks, spec.policy, gallery ? &*gallery : nullptr, nullptr);
    };
    const Predictions full = predict_with(std::vector<MaskVector>(n, MaskVector::all_available(ds.manifest.sensors.size())));
    const double rmse_full = rmse(y, full);
    const double train_seconds = std::chrono::duration<double>(clock::now() - started).count();

    std::vector<RunResult> out;
    for (std::size_t si = 0; si < scenarios.size(); ++si) {
        const std::uint64_t scenario_seed = seeds.scenario(si);
        for (double p : c.percents) {
            const auto t0 = clock::now();
            const auto masks = simulate_missingness(ds.manifest, n, {scenarios[si], p, scenario_seed});
            const bool untouched = std::all_of(masks.begin(), masks.end(), [](const MaskVector& m) { return m.full(); });
            const Predictions miss = untouched ? full : predict_with(masks);
            RunResult r;
            r.method = spec.name;
            r.fold = fold;
            r.sensor = scenario_label(ds.manifest, scenarios[si]);
            r.percent = p;
            r.score_kind = score_kind(ds.manifest.task);
            r.score = predictive_score(y, miss);
            r.rmse_miss = rmse(y, miss);
            r.rmse_full = rmse_full;
            r.prs = prs(r.rmse_miss, rmse_full);
            if (c.record_wall_time) {
                r.seconds = train_seconds + std::chrono::duration<double>(clock::now() - t0).count();
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

}  // namespace detail

inline void write_report(const RobustnessReport& report, const std::filesystem::path& dir);

/// Full cross-validated comparison. Jobs (method × fold) run on a worker
/// pool; results are merged in (method, fold, scenario, percent) order. On
/// failure the finished jobs are written as an incomplete report (when an
/// output directory is configured) and RunFailedError is raised.
using ProgressFn = std::function<void(const std::string&)>;

inline RobustnessReport run_cv_experiment(const ExperimentConfig& c, const Dataset& raw, const ProgressFn& progress = {}) {
    validate_experiment(c);
    if (raw.size() < c.k) {
        throw ConfigError("dataset has " + std::to_string(raw.size()) + " samples, fewer than k=" + std::to_string(c.k));
    }
    const auto scenarios = resolve_scenarios(c, raw.manifest);
    std::vector<MethodSpec> specs;
    for (const auto& m : c.methods) specs.push_back(resolve_method(m, c));
    const FoldSplit split = kfold_split(raw.size(), c.k, c.seed);

    RobustnessReport report;
    report.config = experiment_config_to_json(c);
    report.dataset = raw.manifest.name;
    report.score_kind = score_kind(raw.manifest.task);
    report.methods = c.methods;
    for (const auto& s : scenarios) report.sensors.push_back(scenario_label(raw.manifest, s));
    report.percents = c.percents;

    std::vector<detail::FoldJob> jobs;
    for (std::size_t m = 0; m < specs.size(); ++m)
        for (std::size_t f = 0; f < c.k; ++f) jobs.push_back({m, f});
    std::vector<std::optional<std::vector<RunResult>>> slots(jobs.size());
    std::vector<std::string> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex log_mutex;

    const auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            if (failed.load()) break;
            try {
                slots[j] = detail::run_fold(c, specs[jobs[j].method], raw, split, jobs[j].fold, scenarios);
                if (progress) {
                    std::lock_guard<std::mutex> lock(log_mutex);
                    progress(specs[jobs[j].method].name + " fold " + std::to_string(jobs[j].fold + 1) + "/" +
                             std::to_string(c.k) + " done");
                }
            } catch (const std::exception& e) {
                errors[j] = specs[jobs[j].method].name + " fold " + std::to_string(jobs[j].fold) + ": " + e.what();
                failed.store(true);
            }
        }
    };
    std::size_t threads = c.threads ? c.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, jobs.size());
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (slots[j]) report.results.insert(report.results.end(), slots[j]->begin(), slots[j]->end());
        if (!errors[j].empty() && report.failure.empty()) report.failure = errors[j];
    }
    report.complete = report.failure.empty();
    report.aggregates = aggregate_results(report.results);
    if (!c.output_dir.empty()) write_report(report, c.output_dir);
    if (!report.complete) throw RunFailedError("experiment aborted: " + report.failure);
    return report;
}

inline RobustnessReport run_cv_experiment(const ExperimentConfig& c, const ProgressFn& progress = {}) {
    validate_experiment(c);
    return run_cv_experiment(c, load_experiment_dataset(c), progress);
}

// ---------------------------------------------------------------- ablations

/// Default sensor-dropout ratio grid for the ratio sweep.
inline const std::vector<double> kDefaultSdRatios{0.2, 0.4, 0.6, 0.8};

enum class AblationFamily { DropoutRatio, EsensiGrid };

struct AblationRow {
    AblationFamily family = AblationFamily::DropoutRatio;
    std::string label;
    std::optional<double> ratio;
    std::optional<EsensiOptions> esensi;  // esensi grid rows; nullopt marks the plain ensemble
    std::string score_kind;
    double score_mean = 0.0, score_std = 0.0;
    double prs_mean = 1.0;  // mean over scenarios with percent > 0
};

namespace detail {

inline AblationRow summarize_ablation(const RobustnessReport& r, const std::string& method, std::string label) {
    AblationRow row;
    row.label = std::move(label);
    row.score_kind = r.score_kind;
    std::vector<double> prs;
    bool have_full = false;
    for (const auto& a : r.aggregates) {
        if (a.method != method) continue;
        if (a.percent == 0.0 && !have_full) {
            row.score_mean = a.score_mean;
            row.score_std = a.score_std;
            have_full = true;
        } else if (a.percent > 0.0) {
            prs.push_back(a.prs_mean);
        }
    }
    if (!prs.empty()) row.prs_mean = mean_std(prs).first;
    return row;
}

inline ExperimentConfig without_output(ExperimentConfig c) {
    c.output_dir.clear();
    return c;
}

}  // namespace detail

/// One cross-validated ISensD run per ratio plus one for the combinations
/// (no-ratio) variant.
inline std::vector<AblationRow> sweep_dropout_ratio(const ExperimentConfig& base, const Dataset& raw,
                                                    const std::vector<double>& ratios, const ProgressFn& progress = {}) {
    if (ratios.empty()) throw ConfigError("dropout-ratio sweep needs at least one ratio");
    std::vector<AblationRow> rows;
    ExperimentConfig c = detail::without_output(base);
    c.methods = {"isensd"};
    for (double r : ratios) {
        c.sd_ratio = r;
        auto row = detail::summarize_ablation(run_cv_experiment(c, raw, progress), "isensd", "isensd r=" + io::format_number(r));
        row.ratio = r;
        rows.push_back(std::move(row));
    }
    c.methods = {"isensd-nr"};
    rows.push_back(detail::summarize_ablation(run_cv_experiment(c, raw, progress), "isensd-nr", "isensd no-ratio"));
    return rows;
}

/// The five shared-head configurations, from the plain ensemble to the
/// concatenation variant, on full-sensor evaluation.
inline std::vector<std::pair<std::string, std::optional<EsensiOptions>>> esensi_grid_rows() {
    return {
        {"ensemble", std::nullopt},
        {"shared", EsensiOptions{false, false, Combine::Addition}},
        {"shared+encoding", EsensiOptions{true, false, Combine::Addition}},
        {"shared+encoding+norm addition", EsensiOptions{true, true, Combine::Addition}},
        {"shared+encoding+norm concatenation", EsensiOptions{true, true, Combine::Concatenation}},
    };
}

inline std::vector<AblationRow> esensi_config_grid(const ExperimentConfig& base, const Dataset& raw,
                                                   const ProgressFn& progress = {}) {
    std::vector<AblationRow> rows;
    ExperimentConfig c = detail::without_output(base);
    c.percents = {0.0};
    for (const auto& [label, opt] : esensi_grid_rows()) {
        const std::string method = opt ? "esensi" : "ensemble";
        c.methods = {method};
        if (opt) c.esensi = *opt;
        auto row = detail::summarize_ablation(run_cv_experiment(c, raw, progress), method, label);
        row.family = AblationFamily::EsensiGrid;
        row.esensi = opt;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------- persistence

inline const char* kResultsHeader = "method,fold,sensor,percent,score_kind,score,rmse_miss,rmse_full,prs,seconds";

inline std::string results_csv(const std::vector<RunResult>& results) {
    std::string out = std::string(kResultsHeader) + "\n";
    for (const auto& r : results) {
        out += r.method + "," + std::to_string(r.fold) + "," + r.sensor + "," + io::format_number(r.percent) + "," +
               r.score_kind + "," + io::format_number(r.score) + "," + io::format_number(r.rmse_miss) + "," +
               io::format_number(r.rmse_full) + "," + io::format_number(r.prs) + "," + io::format_number(r.seconds) +
               "\n";
    }
    return out;
}

inline std::vector<RunResult> read_results_csv(const std::filesystem::path& path) {
    const auto lines = io::read_lines(path);
    if (lines.empty() || lines[0] != kResultsHeader) throw DataError("unexpected header in " + path.string());
    std::vector<RunResult> out;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        const auto cells = io::split(lines[li]);
        const std::string where = path.string() + ":" + std::to_string(li + 1);
        if (cells.size() != 10) throw DataError("shape mismatch: expected 10 columns in " + where);
        RunResult r;
        r.method = std::string(cells[0]);
        r.fold = static_cast<std::size_t>(io::parse_integer(cells[1], where));
        r.sensor = std::string(cells[2]);
        r.percent = io::parse_number(cells[3], where);
        r.score_kind = std::string(cells[4]);
        r.score = io::parse_number(cells[5], where);
        r.rmse_miss = io::parse_number(cells[6], where);
        r.rmse_full = io::parse_number(cells[7], where);
        r.prs = io::parse_number(cells[8], where);
        r.seconds = io::parse_number(cells[9], where);
        out.push_back(std::move(r));
    }
    return out;
}

inline nlohmann::json summary_json(const RobustnessReport& r) {
    nlohmann::json aggs = nlohmann::json::array();
    for (const auto& a : r.aggregates) {
        aggs.push_back({{"method", a.method},
                        {"sensor", a.sensor},
                        {"percent", a.percent},
                        {"folds", a.folds},
                        {"score_mean", a.score_mean},
                        {"score_std", a.score_std},
                        {"prs_mean", a.prs_mean},
                        {"prs_std", a.prs_std},
                        {"rmse_miss_mean", a.rmse_miss_mean},
                        {"rmse_full_mean", a.rmse_full_mean}});
    }
    return {{"schema_version", kReportSchemaVersion},
            {"complete", r.complete},
            {"failure", r.failure},
            {"dataset", r.dataset},
            {"score_kind", r.score_kind},
            {"methods", r.methods},
            {"sensors", r.sensors},
            {"percents", r.percents},
            {"config", r.config},
            {"aggregates", std::move(aggs)}};
}

inline std::string plot_file_name(const std::string& method, const std::string& sensor) {
    std::string s = method + "__" + sensor;
    for (auto& ch : s) {
        if (ch == '+') ch = '_';
    }
    return s + ".csv";
}

/// results.csv, summary.json and plotdata/<method>__<sensor>.csv (PRS and
/// score against the percent grid).
inline void write_report(const RobustnessReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "plotdata", ec);
    if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
    io::write_file(dir / "results.csv", results_csv(report.results));
    io::write_file(dir / "summary.json", summary_json(report).dump(2) + "\n");
    for (const auto& method : report.methods) {
        for (const auto& sensor : report.sensors) {
            std::string text = "percent,prs_mean,prs_std,score_mean,score_std\n";
            bool any = false;
            for (double p : report.percents) {
                for (const auto& a : report.aggregates) {
                    if (a.method != method || a.sensor != sensor || a.percent != p) continue;
                    text += io::format_number(p) + "," + io::format_number(a.prs_mean) + "," +
                            io::format_number(a.prs_std) + "," + io::format_number(a.score_mean) + "," +
                            io::format_number(a.score_std) + "\n";
                    any = true;
                }
            }
            if (any) io::write_file(dir / "plotdata" / plot_file_name(method, sensor), text);
        }
    }
}

/// Rebuilds a report from results.csv and summary.json.
inline RobustnessReport read_report(const std::filesystem::path& dir) {
    RobustnessReport r;
    r.results = read_results_csv(dir / "results.csv");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(dir / "summary.json"));
        if (j.at("schema_version").get<int>() != kReportSchemaVersion) throw DataError("unsupported summary schema");
        r.complete = j.at("complete").get<bool>();
        r.failure = j.at("failure").get<std::string>();
        r.dataset = j.at("dataset").get<std::string>();
        r.score_kind = j.at("score_kind").get<std::string>();
        r.methods = j.at("methods").get<std::vector<std::string>>();
        r.sensors = j.at("sensors").get<std::vector<std::string>>();
        r.percents = j.at("percents").get<std::vector<double>>();
        r.config = j.at("config");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid summary.json in '" + dir.string() + "': " + e.what());
    }
    r.aggregates = aggregate_results(r.results);
    return r;
}

/// Full-sensor score per method, one column per method in the given order.
inline std::string format_full_sensor_table(const RobustnessReport& r) {
    std::ostringstream out;
    const auto cell = [](double mean, double sd) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", mean, sd);
        return std::string(buf);
    };
    std::vector<std::string> cells;
    for (const auto& m : r.methods) {
        std::string v = "-";
        for (const auto& a : r.aggregates) {
            if (a.method == m && a.percent == 0.0) {
                v = cell(a.score_mean, a.score_std);
                break;
            }
        }
        cells.push_back(v);
    }
    std::size_t width = 7;
    for (const auto& m : r.methods) width = std::max(width, m.size());
    for (const auto& v : cells) width = std::max(width, v.size());
    const auto pad = [&](const std::string& s, std::size_t w) {
        // "±" is two bytes but one column.
        std::size_t cols = 0;
        for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80 ? 1 : 0;
        return s + std::string(w > cols ? w - cols : 0, ' ');
    };
    const std::string label = r.dataset + " (" + r.score_kind + ")";
    const std::size_t first = std::max<std::size_t>(label.size(), 10);
    out << pad("dataset", first);
    for (const auto& m : r.methods) out << "  " << pad(m, width);
    out << "\n" << pad(label, first);
    for (const auto& v : cells) out << "  " << pad(v, width);
    out << "\n";
    return out.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "label,ratio,shared,encoding,normalization,combine,score_kind,score_mean,score_std,prs_mean\n";
    const auto flag = [](bool b) { return std::string(b ? "1" : "0"); };
    for (const auto& r : rows) {
        std::string cols = ",,,,";
        if (r.family == AblationFamily::DropoutRatio) {
            cols = (r.ratio ? io::format_number(*r.ratio) : std::string("none")) + ",,,,";
        } else if (r.esensi) {
            cols = "," + flag(true) + "," + flag(r.esensi->use_encoding) + "," + flag(r.esensi->use_normalization) + "," +
                   to_string(r.esensi->combine);
        } else {
            cols = "," + flag(false) + "," + flag(false) + "," + flag(false) + ",";
        }
        out += r.label + "," + cols + "," + r.score_kind + "," + io::format_number(r.score_mean) + "," +
               io::format_number(r.score_std) + "," + io::format_number(r.prs_mean) + "\n";
    }
    return out;
}

}  // namespace msense
