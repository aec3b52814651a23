#pragma once

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>

#include "json.hpp"
#include "msense/dataset.hpp"
#include "msense/error.hpp"
#include "msense/io.hpp"
#include "msense/model.hpp"

namespace msense {

inline constexpr int kCheckpointVersion = 1;

/// JSON checkpoint: structure is rebuilt from manifest and configs, then
/// every named parameter array is restored with a shape check.
inline nlohmann::json checkpoint_to_json(const ModelBundle& model) {
    std::ostringstream hash;
    hash << std::hex << manifest_hash(model.manifest);
    nlohmann::json j;
    j["format"] = "msense-checkpoint";
    j["version"] = kCheckpointVersion;
    j["manifest_hash"] = hash.str();
    j["manifest"] = manifest_to_json(model.manifest);
    j["strategy"] = to_string(model.strategy);
    j["encoder"] = {{"embedding_dim", model.encoder.embedding_dim},
                    {"layers", model.encoder.layers},
                    {"dropout", model.encoder.dropout},
                    {"kernel_width", model.encoder.kernel_width}};
    if (model.esensi) {
        j["esensi"] = {{"use_encoding", model.esensi->use_encoding},
                       {"use_normalization", model.esensi->use_normalization},
                       {"combine", to_string(model.esensi->combine)}};
    } else {
        j["esensi"] = nullptr;
    }
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.params) {
        params.push_back({{"name", p.name},
                          {"shape", p.value.shape()},
                          {"values", std::vector<double>(p.value.values().begin(), p.value.values().end())}});
    }
    j["params"] = std::move(params);
    return j;
}

inline ModelBundle checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "msense-checkpoint") throw ConfigError("not a model checkpoint");
        if (j.at("version").get<int>() != kCheckpointVersion) {
            throw ConfigError("unsupported checkpoint version " + std::to_string(j["version"].get<int>()));
        }
        const DatasetManifest manifest = manifest_from_json(j.at("manifest"));
        std::ostringstream hash;
        hash << std::hex << manifest_hash(manifest);
        if (hash.str() != j.at("manifest_hash").get<std::string>()) throw ConfigError("checkpoint manifest hash mismatch");
        EncoderConfig enc;
        const auto& je = j.at("encoder");
        enc.embedding_dim = je.at("embedding_dim").get<std::size_t>();
        enc.layers = je.at("layers").get<std::size_t>();
        enc.dropout = je.at("dropout").get<double>();
        enc.kernel_width = je.at("kernel_width").get<std::size_t>();
        std::optional<EsensiOptions> es;
        if (!j.at("esensi").is_null()) {
            const auto& jo = j["esensi"];
            es = EsensiOptions{jo.at("use_encoding").get<bool>(), jo.at("use_normalization").get<bool>(),
                               combine_from_string(jo.at("combine").get<std::string>())};
        }
        ModelBundle model = build_model(manifest, strategy_from_string(j.at("strategy").get<std::string>()), enc, es);
        const auto& params = j.at("params");
        if (params.size() != model.params.size()) throw ConfigError("checkpoint parameter count mismatch");
        for (const auto& jp : params) {
            auto& p = model.params.get(jp.at("name").get<std::string>());
            const auto shape = jp.at("shape").get<Shape>();
            if (shape != p.value.shape()) throw ConfigError("checkpoint shape mismatch for '" + p.name + "'");
            p.value = Tensor(shape, jp.at("values").get<std::vector<double>>());
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid checkpoint: ") + e.what());
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("invalid checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path) {
    io::write_file(path, checkpoint_to_json(model).dump() + "\n");
}

inline ModelBundle load_checkpoint(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace msense
