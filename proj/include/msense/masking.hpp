#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msense/dataset.hpp"
#include "msense/error.hpp"
#include "msense/preprocess.hpp"
#include "msense/tensor.hpp"

namespace msense {

/// Per-sensor availability flags; 1 keeps the sensor, 0 masks it.
struct MaskVector {
    std::vector<std::uint8_t> available;

    static MaskVector all_available(std::size_t sensors) { return {std::vector<std::uint8_t>(sensors, 1)}; }

    std::size_t size() const { return available.size(); }
    bool operator[](std::size_t s) const { return available[s] != 0; }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto a : available) n += a ? 1 : 0;
        return n;
    }
    bool any() const { return count() > 0; }
    bool full() const { return count() == available.size(); }

    bool operator==(const MaskVector&) const = default;
    auto operator<=>(const MaskVector&) const = default;
};

enum class SensorDropoutMode { Ratio, Combinations };

struct SensorDropoutConfig {
    SensorDropoutMode mode = SensorDropoutMode::Ratio;
    double ratio = 0.2;                  // masking probability per maskable sensor
    std::vector<std::size_t> maskable;   // empty: every temporal sensor
};

struct TemporalDropoutConfig {
    double ratio = 0.2;
    double mask_value = 0.0;
};

inline std::vector<std::size_t> resolve_maskable(const SensorDropoutConfig& cfg, const DatasetManifest& m) {
    if (!cfg.maskable.empty()) {
        for (auto s : cfg.maskable) {
            if (s >= m.sensors.size()) throw ConfigError("maskable sensor index out of range");
            if (!m.sensors[s].temporal()) {
                throw ConfigError("static sensor '" + m.sensors[s].name + "' cannot be masked");
            }
        }
        return cfg.maskable;
    }
    return m.temporal_sensors();
}

/// One Bernoulli draw without the all-masked correction.
inline MaskVector draw_bernoulli_raw(double ratio, std::size_t sensors, std::span<const std::size_t> maskable,
                                     std::mt19937_64& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ParameterError("sensor dropout ratio must lie in [0,1], got " + std::to_string(ratio));
    }
    MaskVector mask = MaskVector::all_available(sensors);
    std::bernoulli_distribution drop(ratio);
    for (auto s : maskable) mask.available[s] = drop(rng) ? 0 : 1;
    return mask;
}

/// Draws one mask per sample; a draw that leaves no sensor is repeated.
inline std::vector<MaskVector> draw_bernoulli_mask(double ratio, std::size_t sensors,
                                                   std::span<const std::size_t> maskable, std::size_t batch,
                                                   std::mt19937_64& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ParameterError("sensor dropout ratio must lie in [0,1], got " + std::to_string(ratio));
    }
    if (ratio == 1.0 && maskable.size() == sensors) {
        throw ParameterError("ratio 1 masks every sensor; no draw can keep a sensor");
    }
    std::vector<MaskVector> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        MaskVector m;
        do {
            m = draw_bernoulli_raw(ratio, sensors, maskable, rng);
        } while (!m.any());
        out.push_back(std::move(m));
    }
    return out;
}

/// Every availability pattern over the maskable sensors except the one that
/// masks all of them: 2^|maskable| − 1 masks, starting with all-available.
inline std::vector<MaskVector> enumerate_missing_combinations(std::size_t sensors,
                                                              std::span<const std::size_t> maskable) {
    if (sensors == 0 || maskable.empty()) throw ParameterError("mask enumeration needs at least one sensor");
    if (maskable.size() > 30) throw ParameterError("too many sensors to enumerate");
    const std::uint64_t full = (std::uint64_t{1} << maskable.size()) - 1;
    std::vector<MaskVector> out;
    out.reserve(full);
    for (std::uint64_t bits = full; bits >= 1; --bits) {
        MaskVector m = MaskVector::all_available(sensors);
        for (std::size_t k = 0; k < maskable.size(); ++k) m.available[maskable[k]] = (bits >> k) & 1U;
        out.push_back(std::move(m));
    }
    return out;
}

inline std::vector<MaskVector> enumerate_missing_combinations(std::size_t sensors) {
    std::vector<std::size_t> all(sensors);
    for (std::size_t s = 0; s < sensors; ++s) all[s] = s;
    return enumerate_missing_combinations(sensors, all);
}

/// Picks one enumerated pattern uniformly at random per sample.
inline std::vector<MaskVector> draw_combination_mask(std::span<const MaskVector> combos, std::size_t batch,
                                                     std::mt19937_64& rng) {
    if (combos.empty()) throw ParameterError("no mask combinations to draw from");
    std::uniform_int_distribution<std::size_t> pick(0, combos.size() - 1);
    std::vector<MaskVector> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) out.push_back(combos[pick(rng)]);
    return out;
}

/// Masked sensors' blocks are overwritten with `value`; the rest are untouched.
inline std::vector<Sample> apply_mask(std::vector<Sample> batch, std::span<const MaskVector> masks,
                                      double value = 0.0) {
    if (masks.size() != batch.size()) throw DimensionError("apply_mask: one mask per sample required");
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (masks[i].size() != batch[i].blocks.size()) throw DimensionError("apply_mask: mask length mismatch");
        for (std::size_t s = 0; s < masks[i].size(); ++s) {
            if (!masks[i][s]) batch[i].blocks[s].fill(value);
        }
    }
    return batch;
}

/// Replaces independently chosen time steps of an aligned [batch×T×F] tensor
/// with the masking value across every feature.
inline Tensor temporal_dropout_mask(Tensor batch, const TemporalDropoutConfig& cfg, std::mt19937_64& rng) {
    if (!(cfg.ratio >= 0.0 && cfg.ratio < 1.0)) {
        throw ParameterError("temporal dropout ratio must lie in [0,1), got " + std::to_string(cfg.ratio));
    }
    if (batch.rank() != 3) throw DimensionError("temporal dropout expects [batch×T×F]");
    if (cfg.ratio == 0.0) return batch;
    const std::size_t n = batch.dim(0), steps = batch.dim(1), feats = batch.dim(2);
    std::bernoulli_distribution drop(cfg.ratio);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < steps; ++t) {
            if (!drop(rng)) continue;
            double* row = batch.data() + (i * steps + t) * feats;
            std::fill(row, row + feats, cfg.mask_value);
        }
    }
    return batch;
}

enum class PolicyKind { MeanImpute, TdValueImpute, Exemplar, Ignore };

inline std::string to_string(PolicyKind p) {
    switch (p) {
        case PolicyKind::MeanImpute: return "mean-impute";
        case PolicyKind::TdValueImpute: return "td-value-impute";
        case PolicyKind::Exemplar: return "exemplar";
        case PolicyKind::Ignore: return "ignore";
    }
    return "?";
}

inline PolicyKind policy_from_string(const std::string& s) {
    if (s == "mean-impute") return PolicyKind::MeanImpute;
    if (s == "td-value-impute") return PolicyKind::TdValueImpute;
    if (s == "exemplar") return PolicyKind::Exemplar;
    if (s == "ignore") return PolicyKind::Ignore;
    throw ConfigError("unknown missing policy '" + s + "'");
}

struct ExemplarOptions {
    std::size_t gallery_size = 0;   // 0: every training sample
    bool use_cca = false;
    std::size_t cca_components = 0; // 0: half the embedding width
};

struct MissingPolicy {
    PolicyKind kind = PolicyKind::MeanImpute;
    ExemplarOptions exemplar;
    double td_value = 0.0;
};

/// Fills unavailable sensors with training means (mean-impute) or with the
/// temporal-dropout masking value (td-value-impute).
inline Sample impute_missing(Sample smp, const MaskVector& availability, const MissingPolicy& policy,
                             const NormalizationStats& stats) {
    if (policy.kind != PolicyKind::MeanImpute && policy.kind != PolicyKind::TdValueImpute) {
        throw ParameterError("impute_missing handles mean-impute and td-value-impute only");
    }
    if (availability.size() != smp.blocks.size()) throw DimensionError("availability length mismatch");
    for (std::size_t s = 0; s < smp.blocks.size(); ++s) {
        if (availability[s]) continue;
        Tensor& b = smp.blocks[s];
        if (policy.kind == PolicyKind::TdValueImpute) {
            b.fill(policy.td_value);
            continue;
        }
        if (s >= stats.mean.size()) throw DataError("normalization stats missing for sensor " + std::to_string(s));
        const auto& mean = stats.mean[s];
        if (mean.empty() || b.size() % mean.size() != 0) throw DataError("normalization stats do not match sensor");
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = mean[k % mean.size()];
    }
    return smp;
}

}  // namespace msense
