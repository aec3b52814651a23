#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "msense/error.hpp"
#include "msense/io.hpp"
#include "msense/tensor.hpp"

namespace msense {

enum class SensorKind { Temporal, Static };
enum class TaskKind { Classification, Regression };

inline std::string to_string(SensorKind k) { return k == SensorKind::Temporal ? "temporal" : "static"; }
inline std::string to_string(TaskKind k) { return k == TaskKind::Classification ? "classification" : "regression"; }

struct SensorSpec {
    std::string name;
    SensorKind kind = SensorKind::Temporal;
    std::size_t dim = 1;
    std::size_t timesteps = 1;  // 1 for static sensors
    // Columns holding one-hot categorical indicators; excluded from z-scoring.
    std::vector<std::size_t> onehot_features;

    bool temporal() const { return kind == SensorKind::Temporal; }
    Shape block_shape() const { return temporal() ? Shape{timesteps, dim} : Shape{dim}; }
    bool operator==(const SensorSpec&) const = default;
};

struct DatasetManifest {
    std::string name;
    TaskKind task = TaskKind::Classification;
    std::size_t n_classes = 0;  // classification only
    std::vector<SensorSpec> sensors;
    std::size_t n_samples = 0;

    bool classification() const { return task == TaskKind::Classification; }
    std::size_t output_dim() const { return classification() ? n_classes : 1; }

    std::size_t sensor_index(std::string_view sensor) const {
        for (std::size_t i = 0; i < sensors.size(); ++i) {
            if (sensors[i].name == sensor) return i;
        }
        throw ConfigError("unknown sensor '" + std::string(sensor) + "' in dataset '" + name + "'");
    }

    std::vector<std::size_t> temporal_sensors() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < sensors.size(); ++i) {
            if (sensors[i].temporal()) idx.push_back(i);
        }
        return idx;
    }

    std::size_t total_feature_dim() const {
        std::size_t d = 0;
        for (const auto& s : sensors) d += s.dim;
        return d;
    }

    void validate() const {
        if (sensors.empty()) throw ConfigError("manifest '" + name + "' declares no sensors");
        if (classification() && n_classes < 2) throw ConfigError("classification needs at least 2 classes");
        for (std::size_t i = 0; i < sensors.size(); ++i) {
            const auto& s = sensors[i];
            if (s.name.empty()) throw ConfigError("sensor name must be nonempty");
            for (char c : s.name) {
                const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
                if (!ok) throw ConfigError("sensor name '" + s.name + "' must use [A-Za-z0-9_-]");
            }
            if (s.name == "labels") throw ConfigError("sensor name 'labels' is reserved");
            if (s.dim < 1) throw ConfigError("sensor '" + s.name + "' needs dim >= 1");
            if (s.temporal() && s.timesteps < 1) throw ConfigError("sensor '" + s.name + "' needs timesteps >= 1");
            for (auto f : s.onehot_features) {
                if (f >= s.dim) throw ConfigError("one-hot column outside sensor '" + s.name + "'");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (sensors[j].name == s.name) throw ConfigError("duplicate sensor name '" + s.name + "'");
            }
        }
    }

    bool operator==(const DatasetManifest&) const = default;
};

struct Sample {
    std::int64_t id = 0;
    std::vector<Tensor> blocks;  // one per manifest sensor: [T×D] temporal, [D] static
    double target = 0.0;         // class id or real value

    std::size_t label() const { return static_cast<std::size_t>(target); }
    bool operator==(const Sample&) const = default;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json sensors = nlohmann::json::array();
    for (const auto& s : m.sensors) {
        nlohmann::json js = {{"name", s.name}, {"kind", to_string(s.kind)}, {"dim", s.dim}};
        js["timesteps"] = s.temporal() ? s.timesteps : 1;
        if (!s.onehot_features.empty()) js["onehot_features"] = s.onehot_features;
        sensors.push_back(std::move(js));
    }
    nlohmann::json j = {{"name", m.name}, {"task", to_string(m.task)}, {"sensors", sensors},
                        {"n_samples", m.n_samples}};
    if (m.classification()) j["n_classes"] = m.n_classes;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        DatasetManifest m;
        m.name = j.at("name").get<std::string>();
        const auto task = j.at("task").get<std::string>();
        if (task == "classification") {
            m.task = TaskKind::Classification;
            m.n_classes = j.at("n_classes").get<std::size_t>();
        } else if (task == "regression") {
            m.task = TaskKind::Regression;
        } else {
            throw ConfigError("unknown task '" + task + "'");
        }
        for (const auto& js : j.at("sensors")) {
            SensorSpec s;
            s.name = js.at("name").get<std::string>();
            const auto kind = js.at("kind").get<std::string>();
            if (kind == "temporal") {
                s.kind = SensorKind::Temporal;
            } else if (kind == "static") {
                s.kind = SensorKind::Static;
            } else {
                throw ConfigError("unknown sensor kind '" + kind + "'");
            }
            s.dim = js.at("dim").get<std::size_t>();
            s.timesteps = s.temporal() ? js.at("timesteps").get<std::size_t>() : 1;
            if (js.contains("onehot_features")) s.onehot_features = js["onehot_features"].get<std::vector<std::size_t>>();
            m.sensors.push_back(std::move(s));
        }
        m.n_samples = j.at("n_samples").get<std::size_t>();
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid manifest: ") + e.what());
    }
}

/// FNV-1a over the canonical manifest JSON text.
inline std::uint64_t manifest_hash(const DatasetManifest& m) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : manifest_to_json(m).dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string sensor_csv_header(const SensorSpec& s) {
    std::string h = s.temporal() ? "sample_id,t" : "sample_id";
    for (std::size_t f = 0; f < s.dim; ++f) h += ",f" + std::to_string(f);
    return h;
}

/// Writes manifest.json, one CSV per sensor and labels.csv into `dir`.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    DatasetManifest m = ds.manifest;
    m.n_samples = ds.samples.size();
    io::write_file(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
    for (std::size_t s = 0; s < m.sensors.size(); ++s) {
        const auto& spec = m.sensors[s];
        std::string out = sensor_csv_header(spec) + "\n";
        for (const auto& smp : ds.samples) {
            const Tensor& b = smp.blocks[s];
            const std::string id = std::to_string(smp.id);
            if (spec.temporal()) {
                for (std::size_t t = 0; t < spec.timesteps; ++t) {
                    out += id + "," + std::to_string(t);
                    for (std::size_t f = 0; f < spec.dim; ++f) out += "," + io::format_number(b.at(t, f));
                    out += "\n";
                }
            } else {
                out += id;
                for (std::size_t f = 0; f < spec.dim; ++f) out += "," + io::format_number(b[f]);
                out += "\n";
            }
        }
        io::write_file(dir / (spec.name + ".csv"), out);
    }
    std::string labels = "sample_id,target\n";
    for (const auto& smp : ds.samples) labels += std::to_string(smp.id) + "," + io::format_number(smp.target) + "\n";
    io::write_file(dir / "labels.csv", labels);
}

inline DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }
    return manifest_from_json(j);
}

/// Reads a dataset written in the manifest + per-sensor CSV layout and
/// validates every block against the declared shapes.
inline Dataset load_dataset(const std::filesystem::path& manifest_path, const std::filesystem::path& data_dir) {
    Dataset ds;
    ds.manifest = read_manifest(manifest_path);
    const auto& m = ds.manifest;

    const auto label_path = data_dir / "labels.csv";
    const auto label_lines = io::read_lines(label_path);
    if (label_lines.empty() || label_lines[0] != "sample_id,target") {
        throw DataError("labels.csv must start with header 'sample_id,target'");
    }
    std::unordered_map<std::int64_t, std::size_t> position;
    for (std::size_t li = 1; li < label_lines.size(); ++li) {
        const auto cells = io::split(label_lines[li]);
        const std::string where = "labels.csv line " + std::to_string(li + 1);
        if (cells.size() != 2) throw DataError("shape mismatch: expected 2 columns in " + where);
        Sample smp;
        smp.id = io::parse_integer(cells[0], where);
        smp.target = io::parse_number(cells[1], where);
        if (m.classification()) {
            if (smp.target != std::floor(smp.target) || smp.target < 0 ||
                smp.target >= static_cast<double>(m.n_classes)) {
                throw LabelError("class target out of range in " + where);
            }
        } else if (!std::isfinite(smp.target)) {
            throw DataError("non-finite target in " + where);
        }
        if (!position.emplace(smp.id, ds.samples.size()).second) {
            throw ConsistencyError("duplicate sample id " + std::to_string(smp.id) + " in labels.csv");
        }
        for (const auto& spec : m.sensors) smp.blocks.emplace_back(spec.block_shape(), std::nan(""));
        ds.samples.push_back(std::move(smp));
    }
    if (ds.samples.size() != m.n_samples) {
        throw ConsistencyError("manifest declares " + std::to_string(m.n_samples) + " samples, labels.csv has " +
                               std::to_string(ds.samples.size()));
    }

    for (std::size_t s = 0; s < m.sensors.size(); ++s) {
        const auto& spec = m.sensors[s];
        const auto path = data_dir / (spec.name + ".csv");
        if (!std::filesystem::exists(path)) throw DataError("missing sensor file '" + path.string() + "'");
        const auto lines = io::read_lines(path);
        if (lines.empty() || lines[0] != sensor_csv_header(spec)) {
            throw DataError("shape mismatch: '" + path.filename().string() + "' header must be '" +
                            sensor_csv_header(spec) + "'");
        }
        const std::size_t lead = spec.temporal() ? 2 : 1;
        const std::size_t per_sample = spec.temporal() ? spec.timesteps : 1;
        std::vector<std::size_t> seen(ds.samples.size(), 0);
        std::vector<std::vector<bool>> step_seen(ds.samples.size(), std::vector<bool>(per_sample, false));
        for (std::size_t li = 1; li < lines.size(); ++li) {
            const auto cells = io::split(lines[li]);
            const std::string where = path.filename().string() + " line " + std::to_string(li + 1);
            if (cells.size() != lead + spec.dim) {
                throw DataError("shape mismatch: expected " + std::to_string(lead + spec.dim) + " columns, got " +
                                std::to_string(cells.size()) + " in " + where);
            }
            const auto id = io::parse_integer(cells[0], where);
            auto it = position.find(id);
            if (it == position.end()) {
                throw ConsistencyError("sample id " + std::to_string(id) + " in " + where + " has no label");
            }
            std::size_t t = 0;
            if (spec.temporal()) {
                const auto tv = io::parse_integer(cells[1], where);
                if (tv < 0 || static_cast<std::size_t>(tv) >= spec.timesteps) {
                    throw DataError("shape mismatch: time index out of range in " + where);
                }
                t = static_cast<std::size_t>(tv);
            }
            if (step_seen[it->second][t]) throw ConsistencyError("duplicate row for sample in " + where);
            step_seen[it->second][t] = true;
            ++seen[it->second];
            Tensor& b = ds.samples[it->second].blocks[s];
            for (std::size_t f = 0; f < spec.dim; ++f) {
                const double v = io::parse_number(cells[lead + f], where);
                if (!std::isfinite(v)) throw DataError("non-finite feature value in " + where);
                b[t * spec.dim + f] = v;
            }
        }
        for (std::size_t i = 0; i < seen.size(); ++i) {
            if (seen[i] != per_sample) {
                throw ConsistencyError("sample id " + std::to_string(ds.samples[i].id) + " has " +
                                       std::to_string(seen[i]) + " of " + std::to_string(per_sample) +
                                       " rows in '" + path.filename().string() + "'");
            }
        }
    }
    return ds;
}

}  // namespace msense
