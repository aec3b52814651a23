#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "msense/dataset.hpp"
#include "msense/error.hpp"

namespace msense {

struct SynthSensor {
    std::string name;
    SensorKind kind = SensorKind::Temporal;
    std::size_t dim = 1;
    std::size_t timesteps = 12;
    double noise = 0.5;
};

/// Latent-factor generator settings. Each sample draws a shared latent u;
/// every sensor observes redundancy·u + sqrt(1−redundancy²)·v_s (v_s private)
/// through its own random linear map plus Gaussian noise, and the target is a
/// function of u alone.
struct SynthConfig {
    std::string name = "synthetic";
    TaskKind task = TaskKind::Classification;
    std::size_t n_classes = 3;
    std::vector<SynthSensor> sensors;
    std::size_t n_samples = 100;
    std::size_t latent_dim = 4;
    double redundancy = 0.9;
    double target_noise = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (sensors.empty()) throw ConfigError("generator needs at least one sensor");
        if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
        if (!(redundancy >= 0.0 && redundancy <= 1.0)) throw ConfigError("redundancy must lie in [0,1]");
        if (!(target_noise >= 0.0)) throw ConfigError("target_noise must be >= 0");
        for (const auto& s : sensors) {
            if (s.dim < 1) throw ConfigError("sensor '" + s.name + "' needs dim >= 1");
            if (s.kind == SensorKind::Temporal && s.timesteps < 1) {
                throw ConfigError("sensor '" + s.name + "' needs timesteps >= 1");
            }
            if (!(s.noise >= 0.0)) throw ConfigError("sensor '" + s.name + "' needs noise >= 0");
        }
        manifest().validate();
    }

    DatasetManifest manifest() const {
        DatasetManifest m;
        m.name = name;
        m.task = task;
        m.n_classes = task == TaskKind::Classification ? n_classes : 0;
        for (const auto& s : sensors) {
            m.sensors.push_back(SensorSpec{s.name, s.kind, s.dim, s.kind == SensorKind::Temporal ? s.timesteps : 1, {}});
        }
        m.n_samples = n_samples;
        return m;
    }
};

inline Dataset synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const std::size_t latent = cfg.latent_dim;

    struct SensorMap {
        std::vector<double> weights;  // dim × latent
        std::vector<double> phases;   // latent
    };
    std::vector<SensorMap> maps;
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(latent));
    for (const auto& s : cfg.sensors) {
        SensorMap sm;
        sm.weights.resize(s.dim * latent);
        for (auto& w : sm.weights) w = gauss(rng) * w_scale;
        sm.phases.resize(latent);
        for (auto& p : sm.phases) p = phase(rng);
        maps.push_back(std::move(sm));
    }
    const std::size_t outputs = cfg.task == TaskKind::Classification ? cfg.n_classes : 1;
    std::vector<double> target_map(outputs * latent);
    for (auto& w : target_map) w = gauss(rng);

    Dataset ds;
    ds.manifest = cfg.manifest();
    const double private_weight = std::sqrt(std::max(0.0, 1.0 - cfg.redundancy * cfg.redundancy));
    std::vector<double> u(latent), h(latent);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) {
        Sample smp;
        smp.id = static_cast<std::int64_t>(i);
        for (auto& v : u) v = gauss(rng);
        for (std::size_t s = 0; s < cfg.sensors.size(); ++s) {
            const auto& spec = cfg.sensors[s];
            const auto& sm = maps[s];
            for (std::size_t l = 0; l < latent; ++l) h[l] = cfg.redundancy * u[l] + private_weight * gauss(rng);
            if (spec.kind == SensorKind::Temporal) {
                Tensor b({spec.timesteps, spec.dim});
                for (std::size_t t = 0; t < spec.timesteps; ++t) {
                    const double angle = 2.0 * std::numbers::pi * static_cast<double>(t) /
                                         static_cast<double>(spec.timesteps);
                    for (std::size_t f = 0; f < spec.dim; ++f) {
                        double v = 0.0;
                        for (std::size_t l = 0; l < latent; ++l) {
                            v += sm.weights[f * latent + l] * h[l] * (1.0 + 0.5 * std::sin(angle + sm.phases[l]));
                        }
                        b.at(t, f) = v + spec.noise * gauss(rng);
                    }
                }
                smp.blocks.push_back(std::move(b));
            } else {
                Tensor b({spec.dim});
                for (std::size_t f = 0; f < spec.dim; ++f) {
                    double v = 0.0;
                    for (std::size_t l = 0; l < latent; ++l) v += sm.weights[f * latent + l] * h[l];
                    b[f] = v + spec.noise * gauss(rng);
                }
                smp.blocks.push_back(std::move(b));
            }
        }
        std::vector<double> scores(outputs, 0.0);
        for (std::size_t c = 0; c < outputs; ++c) {
            for (std::size_t l = 0; l < latent; ++l) scores[c] += target_map[c * latent + l] * u[l];
            scores[c] += cfg.target_noise * gauss(rng);
        }
        if (cfg.task == TaskKind::Classification) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < outputs; ++c) {
                if (scores[c] > scores[best]) best = c;
            }
            smp.target = static_cast<double>(best);
        } else {
            smp.target = scores[0];
        }
        ds.samples.push_back(std::move(smp));
    }
    return ds;
}

/// Schema-faithful presets built from the per-sensor feature counts of the
/// crop-type, moisture-content and PM2.5 datasets, plus a compact
/// three-sensor classification set used for desk-scale robustness checks.
inline SynthConfig synth_preset(const std::string& preset, std::size_t n_samples, std::uint64_t seed) {
    SynthConfig c;
    c.name = preset;
    c.n_samples = n_samples;
    c.seed = seed;
    using K = SensorKind;
    if (preset == "cropharvest-like") {
        c.task = TaskKind::Classification;
        c.n_classes = 10;
        c.latent_dim = 6;
        c.sensors = {{"optical", K::Temporal, 11, 12, 0.3},
                     {"radar", K::Temporal, 2, 12, 0.6},
                     {"weather", K::Temporal, 2, 12, 0.9},
                     {"static", K::Static, 2, 1, 0.5}};
    } else if (preset == "lfmc-like") {
        c.task = TaskKind::Regression;
        c.latent_dim = 4;
        c.target_noise = 0.1;
        c.sensors = {{"optical", K::Temporal, 8, 4, 0.3},
                     {"radar", K::Temporal, 3, 4, 0.7},
                     {"static", K::Static, 7, 1, 0.5}};
    } else if (preset == "pm25-like") {
        c.task = TaskKind::Regression;
        c.latent_dim = 4;
        c.target_noise = 0.1;
        c.sensors = {{"conditions", K::Temporal, 3, 24, 0.5},
                     {"dynamics", K::Temporal, 4, 24, 0.4},
                     {"precipitation", K::Temporal, 2, 24, 0.9}};
    } else if (preset == "synthetic-3") {
        c.task = TaskKind::Classification;
        c.n_classes = 3;
        c.latent_dim = 4;
        c.sensors = {{"alpha", K::Temporal, 6, 12, 0.3},
                     {"beta", K::Temporal, 4, 12, 0.9},
                     {"gamma", K::Temporal, 3, 12, 1.3}};
    } else {
        throw ConfigError("unknown preset '" + preset +
                          "' (expected cropharvest-like, lfmc-like, pm25-like or synthetic-3)");
    }
    return c;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
    nlohmann::json sensors = nlohmann::json::array();
    for (const auto& s : c.sensors) {
        sensors.push_back({{"name", s.name}, {"kind", to_string(s.kind)}, {"dim", s.dim},
                           {"timesteps", s.kind == SensorKind::Temporal ? s.timesteps : 1}, {"noise", s.noise}});
    }
    return {{"name", c.name},           {"task", to_string(c.task)},   {"n_classes", c.n_classes},
            {"sensors", sensors},       {"n_samples", c.n_samples},    {"latent_dim", c.latent_dim},
            {"redundancy", c.redundancy}, {"target_noise", c.target_noise}, {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    const auto only = [](const nlohmann::json& obj, std::initializer_list<const char*> keys, const std::string& where) {
        if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
        for (auto it = obj.begin(); it != obj.end(); ++it) {
            bool known = false;
            for (const char* k : keys) known = known || it.key() == k;
            if (!known) throw ConfigError("unknown key '" + it.key() + "' in " + where);
        }
    };
    only(j, {"name", "task", "n_classes", "sensors", "n_samples", "latent_dim", "redundancy", "target_noise", "seed"},
         "generator config");
    try {
        SynthConfig c;
        c.name = j.value("name", c.name);
        const auto task = j.value("task", std::string("classification"));
        if (task == "classification") {
            c.task = TaskKind::Classification;
        } else if (task == "regression") {
            c.task = TaskKind::Regression;
        } else {
            throw ConfigError("unknown task '" + task + "'");
        }
        c.n_classes = j.value("n_classes", c.n_classes);
        c.n_samples = j.value("n_samples", c.n_samples);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.redundancy = j.value("redundancy", c.redundancy);
        c.target_noise = j.value("target_noise", c.target_noise);
        c.seed = j.value("seed", c.seed);
        for (const auto& js : j.at("sensors")) {
            only(js, {"name", "kind", "dim", "timesteps", "noise"}, "generator sensor");
            SynthSensor s;
            s.name = js.at("name").get<std::string>();
            const auto kind = js.value("kind", std::string("temporal"));
            if (kind != "temporal" && kind != "static") throw ConfigError("unknown sensor kind '" + kind + "'");
            s.kind = kind == "temporal" ? SensorKind::Temporal : SensorKind::Static;
            s.dim = js.at("dim").get<std::size_t>();
            s.timesteps = js.value("timesteps", std::size_t{1});
            s.noise = js.value("noise", s.noise);
            c.sensors.push_back(std::move(s));
        }
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid generator config: ") + e.what());
    }
}

}  // namespace msense
