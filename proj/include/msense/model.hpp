#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msense/dataset.hpp"
#include "msense/error.hpp"
#include "msense/exemplar.hpp"
#include "msense/masking.hpp"
#include "msense/metrics.hpp"
#include "msense/ops.hpp"
#include "msense/preprocess.hpp"
#include "msense/tape.hpp"

namespace msense {

enum class FusionStrategy { Input, Feature, Ensemble, Esensi };
enum class Combine { Addition, Concatenation };

inline std::string to_string(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::Input: return "input";
        case FusionStrategy::Feature: return "feature";
        case FusionStrategy::Ensemble: return "ensemble";
        case FusionStrategy::Esensi: return "esensi";
    }
    return "?";
}

inline FusionStrategy strategy_from_string(const std::string& s) {
    if (s == "input") return FusionStrategy::Input;
    if (s == "feature") return FusionStrategy::Feature;
    if (s == "ensemble") return FusionStrategy::Ensemble;
    if (s == "esensi") return FusionStrategy::Esensi;
    throw ConfigError("unknown fusion strategy '" + s + "'");
}

inline std::string to_string(Combine c) { return c == Combine::Addition ? "addition" : "concatenation"; }

inline Combine combine_from_string(const std::string& s) {
    if (s == "addition") return Combine::Addition;
    if (s == "concatenation") return Combine::Concatenation;
    throw ConfigError("unknown combine mode '" + s + "'");
}

/// Options of the shared-head ensemble: learnable per-sensor encodings,
/// a layer-norm first layer in the head, and how encodings meet embeddings.
struct EsensiOptions {
    bool use_encoding = true;
    bool use_normalization = false;
    Combine combine = Combine::Addition;

    bool operator==(const EsensiOptions&) const = default;
};

struct EncoderConfig {
    std::size_t embedding_dim = 128;
    std::size_t layers = 2;
    double dropout = 0.2;
    std::size_t kernel_width = 3;

    void validate() const {
        if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
        if (layers < 1) throw ConfigError("encoder layers must be >= 1");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
        if (kernel_width < 1) throw ConfigError("kernel_width must be >= 1");
    }
    bool operator==(const EncoderConfig&) const = default;
};

/// One sensor-dedicated (or input-level) encoder. Layers hold parameter
/// indices into the owning bundle's store.
struct Encoder {
    SensorKind kind = SensorKind::Temporal;
    std::size_t in_dim = 0;
    std::size_t kernel_width = 1;  // temporal only
    std::vector<std::size_t> weights;
    std::vector<std::size_t> biases;
};

struct Head {
    std::size_t in_dim = 0;
    bool layernorm = false;
    std::size_t ln_gain = 0, ln_shift = 0;
    std::vector<std::size_t> weights;
    std::vector<std::size_t> biases;
};

struct ModelBundle {
    DatasetManifest manifest;
    FusionStrategy strategy = FusionStrategy::Input;
    EncoderConfig encoder;
    std::optional<EsensiOptions> esensi;
    nn::ParamStore params;
    std::vector<Encoder> encoders;              // input: 1; otherwise one per sensor
    std::vector<Head> heads;                    // ensemble: one per sensor; otherwise 1
    std::vector<std::size_t> sensor_encodings;  // esensi with encodings: one per sensor
    std::vector<std::vector<std::size_t>> members;  // parameter groups trained independently

    std::size_t output_dim() const { return manifest.output_dim(); }
    std::size_t sensors() const { return manifest.sensors.size(); }
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, double gain, nn::Rng& rng) {
    std::normal_distribution<double> g(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = g(rng);
    return t;
}

inline std::size_t effective_kernel(std::size_t requested, std::size_t steps, std::size_t layers) {
    const std::size_t fit = (steps - 1) / layers + 1;  // keeps at least one output step
    return std::max<std::size_t>(1, std::min(requested, fit));
}

inline Encoder make_encoder(nn::ParamStore& ps, const std::string& prefix, SensorKind kind, std::size_t in_dim,
                            std::size_t steps, const EncoderConfig& cfg, nn::Rng& rng) {
    Encoder e;
    e.kind = kind;
    e.in_dim = in_dim;
    const std::size_t d = cfg.embedding_dim;
    if (kind == SensorKind::Temporal) {
        e.kernel_width = effective_kernel(cfg.kernel_width, steps, cfg.layers);
        std::size_t in = in_dim;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = prefix + ".conv" + std::to_string(l);
            e.weights.push_back(ps.add(p + ".kernel", he_normal({e.kernel_width, in, d}, e.kernel_width * in, 2.0, rng)));
            e.biases.push_back(ps.add(p + ".bias", Tensor({d})));
            in = d;
        }
    } else {
        std::size_t in = in_dim;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = prefix + ".dense" + std::to_string(l);
            e.weights.push_back(ps.add(p + ".weight", he_normal({in, d}, in, 2.0, rng)));
            e.biases.push_back(ps.add(p + ".bias", Tensor({d})));
            in = d;
        }
    }
    return e;
}

inline Head make_head(nn::ParamStore& ps, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                      bool layernorm, const EncoderConfig& cfg, nn::Rng& rng) {
    Head h;
    h.in_dim = in_dim;
    h.layernorm = layernorm;
    if (layernorm) {
        h.ln_gain = ps.add(prefix + ".ln.gain", Tensor({in_dim}, 1.0));
        h.ln_shift = ps.add(prefix + ".ln.shift", Tensor({in_dim}));
    }
    const std::size_t d = cfg.embedding_dim;
    h.weights.push_back(ps.add(prefix + ".dense0.weight", he_normal({in_dim, d}, in_dim, 2.0, rng)));
    h.biases.push_back(ps.add(prefix + ".dense0.bias", Tensor({d})));
    h.weights.push_back(ps.add(prefix + ".dense1.weight", he_normal({d, out_dim}, d, 1.0, rng)));
    h.biases.push_back(ps.add(prefix + ".dense1.bias", Tensor({out_dim})));
    return h;
}

}  // namespace detail

/// Builds the parameter layout for a fusion strategy over a manifest.
inline ModelBundle build_model(const DatasetManifest& manifest, FusionStrategy strategy,
                               const EncoderConfig& encoder = {}, std::optional<EsensiOptions> esensi = std::nullopt,
                               std::uint64_t seed = 0) {
    manifest.validate();
    encoder.validate();
    if (esensi && strategy != FusionStrategy::Esensi) {
        throw ConfigError("esensi options supplied for strategy '" + to_string(strategy) + "'");
    }
    if (strategy == FusionStrategy::Esensi && !esensi) esensi = EsensiOptions{};
    if (esensi && esensi->combine == Combine::Concatenation && !esensi->use_encoding) {
        throw ConfigError("concatenation combine requires sensor encodings");
    }
    ModelBundle mb;
    mb.manifest = manifest;
    mb.strategy = strategy;
    mb.encoder = encoder;
    mb.esensi = esensi;
    nn::Rng rng(seed);
    const std::size_t d = encoder.embedding_dim;
    const std::size_t out = manifest.output_dim();
    auto& ps = mb.params;

    switch (strategy) {
        case FusionStrategy::Input: {
            const std::size_t steps = aligned_timesteps(manifest);
            mb.encoders.push_back(detail::make_encoder(ps, "enc.input", SensorKind::Temporal,
                                                       manifest.total_feature_dim(), steps, encoder, rng));
            mb.heads.push_back(detail::make_head(ps, "head.fusion", d, out, false, encoder, rng));
            break;
        }
        case FusionStrategy::Feature: {
            for (const auto& s : manifest.sensors) {
                mb.encoders.push_back(
                    detail::make_encoder(ps, "enc." + s.name, s.kind, s.dim, s.timesteps, encoder, rng));
            }
            mb.heads.push_back(detail::make_head(ps, "head.fusion", d * manifest.sensors.size(), out, false, encoder, rng));
            break;
        }
        case FusionStrategy::Ensemble: {
            for (const auto& s : manifest.sensors) {
                const std::size_t first = ps.size();
                mb.encoders.push_back(
                    detail::make_encoder(ps, "enc." + s.name, s.kind, s.dim, s.timesteps, encoder, rng));
                mb.heads.push_back(detail::make_head(ps, "head." + s.name, d, out, false, encoder, rng));
                std::vector<std::size_t> group;
                for (std::size_t i = first; i < ps.size(); ++i) group.push_back(i);
                mb.members.push_back(std::move(group));
            }
            break;
        }
        case FusionStrategy::Esensi: {
            for (const auto& s : manifest.sensors) {
                mb.encoders.push_back(
                    detail::make_encoder(ps, "enc." + s.name, s.kind, s.dim, s.timesteps, encoder, rng));
            }
            if (esensi->use_encoding) {
                std::normal_distribution<double> g(0.0, 0.1);
                for (const auto& s : manifest.sensors) {
                    Tensor rho({d});
                    for (auto& v : rho.values()) v = g(rng);
                    mb.sensor_encodings.push_back(ps.add("rho." + s.name, std::move(rho)));
                }
            }
            const std::size_t head_in = esensi->combine == Combine::Concatenation ? 2 * d : d;
            mb.heads.push_back(detail::make_head(ps, "head.shared", head_in, out, esensi->use_normalization, encoder, rng));
            break;
        }
    }
    if (mb.members.empty()) {
        std::vector<std::size_t> all(ps.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        mb.members.push_back(std::move(all));
    }
    return mb;
}

/// Forward-pass context: records parameters on a tape (training) or binds
/// them as constants (inference).
class Forward {
public:
    Forward(nn::Tape& tape, const ModelBundle& model, nn::ParamStore* trainable, bool training, nn::Rng* rng)
        : tape_(tape), model_(model), trainable_(trainable), training_(training), rng_(rng) {
        if (training_ && rng_ == nullptr) throw ParameterError("training forward pass needs a generator");
    }

    nn::Tape& tape() { return tape_; }

    nn::Var param(std::size_t idx) {
        if (trainable_ != nullptr) return tape_.param((*trainable_)[idx]);
        return tape_.constant(model_.params[idx].value);
    }

    nn::Var dropout(nn::Var x) {
        if (!training_) return x;
        return nn::dropout(x, model_.encoder.dropout, true, *rng_);
    }

    /// x: [batch×T×D] for temporal encoders, [batch×D] for static ones.
    nn::Var encode(const Encoder& e, nn::Var x) {
        for (std::size_t l = 0; l < e.weights.size(); ++l) {
            x = e.kind == SensorKind::Temporal ? nn::conv1d(x, param(e.weights[l]), param(e.biases[l]))
                                               : nn::dense(x, param(e.weights[l]), param(e.biases[l]));
            x = dropout(nn::relu(x));
        }
        return e.kind == SensorKind::Temporal ? nn::mean_over_time(x) : x;
    }

    nn::Var head(const Head& h, nn::Var x) {
        if (h.layernorm) x = nn::layernorm(x, param(h.ln_gain), param(h.ln_shift), 1e-5);
        x = dropout(nn::relu(nn::dense(x, param(h.weights[0]), param(h.biases[0]))));
        return nn::dense(x, param(h.weights[1]), param(h.biases[1]));
    }

    /// Raw head output (logits or values) for one sensor of an ensemble or
    /// shared-head model.
    nn::Var sensor_output(std::size_t s, const Tensor& x) {
        nn::Var z = encode(model_.encoders.at(s), tape_.constant(x));
        if (model_.strategy == FusionStrategy::Ensemble) return head(model_.heads.at(s), z);
        if (model_.strategy != FusionStrategy::Esensi) throw ParameterError("per-sensor outputs need ensemble or esensi");
        const auto& opt = *model_.esensi;
        if (opt.use_encoding) {
            nn::Var rho = param(model_.sensor_encodings.at(s));
            z = opt.combine == Combine::Addition ? nn::add_row(z, rho)
                                                 : nn::concat_cols({z, nn::broadcast_rows(rho, x.dim(0))});
        }
        return head(model_.heads.front(), z);
    }

    /// Output of the input-level fusion model on an aligned [batch×T×ΣD] block.
    nn::Var input_output(const Tensor& aligned) {
        return head(model_.heads.front(), encode(model_.encoders.front(), tape_.constant(aligned)));
    }

    nn::Var embedding(std::size_t s, const Tensor& x) { return encode(model_.encoders.at(s), tape_.constant(x)); }

    /// Output of the feature-level fusion model from per-sensor embeddings.
    nn::Var feature_output(const std::vector<nn::Var>& embeddings) {
        return head(model_.heads.front(), nn::concat_cols(embeddings));
    }

private:
    nn::Tape& tape_;
    const ModelBundle& model_;
    nn::ParamStore* trainable_;
    bool training_;
    nn::Rng* rng_;
};

/// Stacks one sensor's blocks into [batch×T×D] or [batch×D]. Unavailable
/// sensors (per `masks`) are written as `fill` values per feature.
inline Tensor sensor_batch(const DatasetManifest& m, std::span<const Sample* const> batch, std::size_t s,
                           std::span<const MaskVector> masks = {}, const std::vector<double>* fill = nullptr) {
    const auto& spec = m.sensors.at(s);
    const std::size_t per = spec.temporal() ? spec.timesteps * spec.dim : spec.dim;
    Shape shape = spec.temporal() ? Shape{batch.size(), spec.timesteps, spec.dim} : Shape{batch.size(), spec.dim};
    Tensor out(shape);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        double* dst = out.data() + i * per;
        if (!masks.empty() && !masks[i][s]) {
            for (std::size_t k = 0; k < per; ++k) dst[k] = fill ? (*fill)[k % spec.dim] : 0.0;
        } else {
            const Tensor& b = batch[i]->blocks.at(s);
            std::copy(b.data(), b.data() + per, dst);
        }
    }
    return out;
}

/// Aligned input-level batch [batch×T×ΣD]; unavailable sensors take `fill`.
inline Tensor aligned_batch(const DatasetManifest& m, std::span<const Sample* const> batch,
                            std::span<const MaskVector> masks, const std::vector<std::vector<double>>& fill) {
    const std::size_t steps = aligned_timesteps(m);
    const std::size_t width = m.total_feature_dim();
    Tensor out({batch.size(), steps, width});
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::span<const std::uint8_t> avail;
        if (!masks.empty()) avail = masks[i].available;
        align_into(*batch[i], m, avail, fill, out.data() + i * steps * width);
    }
    return out;
}

inline std::vector<std::vector<double>> zero_fill(const DatasetManifest& m) {
    std::vector<std::vector<double>> f;
    for (const auto& s : m.sensors) f.emplace_back(s.dim, 0.0);
    return f;
}

/// Converts raw head outputs into probabilities (classification) or values.
inline Predictions to_predictions(const ModelBundle& model, const Tensor& raw) {
    Predictions p;
    p.task = model.manifest.task;
    p.rows = raw.dim(0);
    p.cols = model.output_dim();
    if (p.task == TaskKind::Classification) {
        const Tensor probs = nn::softmax_rows(raw);
        p.values.assign(probs.values().begin(), probs.values().end());
    } else {
        p.values.assign(raw.values().begin(), raw.values().end());
    }
    return p;
}

/// Per-sensor predictions of an ensemble/shared-head model in inference mode.
inline Predictions sensor_predictions(const ModelBundle& model, std::span<const Sample* const> batch, std::size_t s,
                                      std::span<const MaskVector> masks = {},
                                      const std::vector<double>* fill = nullptr) {
    nn::Tape tape(false);
    Forward fw(tape, model, nullptr, false, nullptr);
    return to_predictions(model, fw.sensor_output(s, sensor_batch(model.manifest, batch, s, masks, fill)).value());
}

/// Inference-mode embeddings of one sensor, [batch×d].
inline Tensor sensor_embeddings(const ModelBundle& model, std::span<const Sample* const> batch, std::size_t s) {
    if (model.strategy == FusionStrategy::Input) throw ParameterError("input-level models have no per-sensor encoders");
    nn::Tape tape(false);
    Forward fw(tape, model, nullptr, false, nullptr);
    return fw.embedding(s, sensor_batch(model.manifest, batch, s)).value();
}

/// Gallery of per-sensor embeddings of the given training samples.
inline Gallery build_feature_gallery(const ModelBundle& model, const Dataset& ds, std::span<const std::size_t> positions,
                                     const ExemplarOptions& options = {}) {
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    if (options.gallery_size > 0 && options.gallery_size < pos.size()) pos.resize(options.gallery_size);
    if (pos.empty()) throw DataError("gallery needs at least one training sample");
    std::vector<const Sample*> batch;
    std::vector<std::int64_t> ids;
    for (auto i : pos) {
        batch.push_back(&ds.samples.at(i));
        ids.push_back(ds.samples[i].id);
    }
    std::vector<Tensor> emb;
    for (std::size_t s = 0; s < model.sensors(); ++s) emb.push_back(sensor_embeddings(model, batch, s));
    return build_gallery(std::move(emb), std::move(ids), options);
}

/// Inference with per-sample availability. `stats` supplies mean-impute fill
/// values (normalized space when null); `gallery` backs the exemplar policy.
inline Predictions predict_batch(const ModelBundle& model, std::span<const Sample* const> batch,
                                 std::span<const MaskVector> masks, const MissingPolicy& policy,
                                 const Gallery* gallery = nullptr, const NormalizationStats* stats = nullptr) {
    if (masks.size() != batch.size()) throw DimensionError("predict: one availability mask per sample");
    for (const auto& mk : masks) {
        if (mk.size() != model.sensors()) throw DimensionError("predict: availability length must equal sensor count");
    }
    const auto& m = model.manifest;
    std::vector<std::vector<double>> fill;
    if (policy.kind == PolicyKind::MeanImpute) {
        fill = stats ? stats->mean : zero_fill(m);
    } else {
        fill = zero_fill(m);
        for (auto& f : fill) std::fill(f.begin(), f.end(), policy.td_value);
    }
    const bool imputing = policy.kind == PolicyKind::MeanImpute || policy.kind == PolicyKind::TdValueImpute;

    switch (model.strategy) {
        case FusionStrategy::Input: {
            if (!imputing) throw ConfigError("input-level fusion supports mean-impute or td-value-impute only");
            nn::Tape tape(false);
            Forward fw(tape, model, nullptr, false, nullptr);
            return to_predictions(model, fw.input_output(aligned_batch(m, batch, masks, fill)).value());
        }
        case FusionStrategy::Feature: {
            nn::Tape tape(false);
            Forward fw(tape, model, nullptr, false, nullptr);
            if (imputing) {
                std::vector<nn::Var> zs;
                for (std::size_t s = 0; s < m.sensors.size(); ++s) {
                    zs.push_back(fw.embedding(s, sensor_batch(m, batch, s, masks, &fill[s])));
                }
                return to_predictions(model, fw.feature_output(zs).value());
            }
            if (policy.kind != PolicyKind::Exemplar) throw ConfigError("feature-level fusion does not support 'ignore'");
            if (gallery == nullptr) throw DataError("exemplar policy needs a gallery");
            std::vector<Tensor> emb;
            for (std::size_t s = 0; s < m.sensors.size(); ++s) {
                emb.push_back(fw.embedding(s, sensor_batch(m, batch, s)).value());
            }
            for (std::size_t i = 0; i < batch.size(); ++i) {
                if (masks[i].full()) continue;
                std::vector<std::vector<double>> query(m.sensors.size());
                for (std::size_t s = 0; s < m.sensors.size(); ++s) {
                    const std::size_t d = emb[s].dim(1);
                    if (masks[i][s]) query[s].assign(emb[s].data() + i * d, emb[s].data() + (i + 1) * d);
                }
                auto [filled, match] = exemplar_lookup(std::move(query), masks[i], *gallery);
                for (std::size_t s = 0; s < m.sensors.size(); ++s) {
                    const std::size_t d = emb[s].dim(1);
                    std::copy(filled[s].begin(), filled[s].end(), emb[s].data() + i * d);
                }
            }
            std::vector<nn::Var> zs;
            for (auto& e : emb) zs.push_back(tape.constant(std::move(e)));
            return to_predictions(model, fw.feature_output(zs).value());
        }
        case FusionStrategy::Ensemble:
        case FusionStrategy::Esensi: {
            if (!imputing && policy.kind != PolicyKind::Ignore) {
                throw ConfigError("ensemble models support ignore, mean-impute or td-value-impute");
            }
            Predictions out;
            out.task = m.task;
            out.rows = batch.size();
            out.cols = model.output_dim();
            out.values.assign(out.rows * out.cols, 0.0);
            std::vector<double> counts(batch.size(), 0.0);
            for (std::size_t s = 0; s < m.sensors.size(); ++s) {
                bool used = imputing;
                for (std::size_t i = 0; i < batch.size() && !used; ++i) used = masks[i][s];
                if (!used) continue;
                const Predictions ps = imputing ? sensor_predictions(model, batch, s, masks, &fill[s])
                                                : sensor_predictions(model, batch, s);
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    if (!imputing && !masks[i][s]) continue;
                    counts[i] += 1.0;
                    for (std::size_t c = 0; c < out.cols; ++c) out.at(i, c) += ps.at(i, c);
                }
            }
            for (std::size_t i = 0; i < batch.size(); ++i) {
                if (counts[i] == 0.0) throw NoInformationError("every sensor is unavailable; nothing to aggregate");
                for (std::size_t c = 0; c < out.cols; ++c) out.at(i, c) /= counts[i];
            }
            return out;
        }
    }
    throw ParameterError("unknown strategy");
}

inline Predictions predict(const ModelBundle& model, const Sample& smp, const MaskVector& availability,
                           const MissingPolicy& policy, const Gallery* gallery = nullptr,
                           const NormalizationStats* stats = nullptr) {
    const Sample* ptr = &smp;
    return predict_batch(model, std::span<const Sample* const>(&ptr, 1), std::span<const MaskVector>(&availability, 1),
                         policy, gallery, stats);
}

}  // namespace msense
