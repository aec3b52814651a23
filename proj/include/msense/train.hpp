#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msense/adam.hpp"
#include "msense/dataset.hpp"
#include "msense/error.hpp"
#include "msense/masking.hpp"
#include "msense/model.hpp"
#include "msense/ops.hpp"
#include "msense/preprocess.hpp"

namespace msense {

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 128;
    std::size_t patience = 10;
    double validation_fraction = 0.1;
    nn::AdamConfig adam;
    std::optional<SensorDropoutConfig> sensor_dropout;
    std::optional<TemporalDropoutConfig> temporal_dropout;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
            throw ConfigError("validation_fraction must lie in [0,1)");
        }
        if (sensor_dropout && sensor_dropout->mode == SensorDropoutMode::Ratio &&
            !(sensor_dropout->ratio >= 0.0 && sensor_dropout->ratio <= 1.0)) {
            throw ConfigError("sensor dropout ratio must lie in [0,1]");
        }
        if (temporal_dropout && !(temporal_dropout->ratio >= 0.0 && temporal_dropout->ratio < 1.0)) {
            throw ConfigError("temporal dropout ratio must lie in [0,1)");
        }
    }
};

struct MemberLog {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

struct TrainLog {
    std::vector<MemberLog> members;
};

namespace detail {

inline nn::Var task_loss(const ModelBundle& model, nn::Var raw, std::span<const Sample* const> batch) {
    if (model.manifest.classification()) {
        std::vector<std::size_t> y(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) y[i] = batch[i]->label();
        return nn::softmax_cross_entropy(raw, y);
    }
    std::vector<double> y(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) y[i] = batch[i]->target;
    return nn::mse_loss(raw, y);
}

struct Augmentation {
    const TrainConfig* config = nullptr;
    std::vector<std::size_t> maskable;
    std::vector<MaskVector> combos;
};

/// Loss of one batch. `member` selects an ensemble member; otherwise the
/// whole model's objective is used (per-sensor losses summed for esensi).
inline nn::Var batch_loss(Forward& fw, const ModelBundle& model, std::span<const Sample* const> batch,
                          std::optional<std::size_t> member, const Augmentation* aug, nn::Rng* rng) {
    const auto& m = model.manifest;
    std::vector<MaskVector> masks;
    if (aug != nullptr && aug->config->sensor_dropout) {
        const auto& sd = *aug->config->sensor_dropout;
        masks = sd.mode == SensorDropoutMode::Ratio
                    ? draw_bernoulli_mask(sd.ratio, m.sensors.size(), aug->maskable, batch.size(), *rng)
                    : draw_combination_mask(aug->combos, batch.size(), *rng);
    }
    switch (model.strategy) {
        case FusionStrategy::Input: {
            Tensor x = aligned_batch(m, batch, masks, zero_fill(m));
            if (aug != nullptr && aug->config->temporal_dropout) {
                x = temporal_dropout_mask(std::move(x), *aug->config->temporal_dropout, *rng);
            }
            return task_loss(model, fw.input_output(x), batch);
        }
        case FusionStrategy::Feature: {
            std::vector<nn::Var> zs;
            for (std::size_t s = 0; s < m.sensors.size(); ++s) zs.push_back(fw.embedding(s, sensor_batch(m, batch, s, masks)));
            return task_loss(model, fw.feature_output(zs), batch);
        }
        case FusionStrategy::Ensemble: {
            const std::size_t s = member.value_or(0);
            return task_loss(model, fw.sensor_output(s, sensor_batch(m, batch, s)), batch);
        }
        case FusionStrategy::Esensi: {
            std::optional<nn::Var> total;
            for (std::size_t s = 0; s < m.sensors.size(); ++s) {
                nn::Var l = task_loss(model, fw.sensor_output(s, sensor_batch(m, batch, s)), batch);
                total = total ? nn::add(*total, l) : l;
            }
            return *total;
        }
    }
    throw ParameterError("unknown strategy");
}

inline double eval_loss(const ModelBundle& model, std::span<const Sample* const> batch, std::optional<std::size_t> member) {
    nn::Tape tape(false);
    Forward fw(tape, model, nullptr, false, nullptr);
    return batch_loss(fw, model, batch, member, nullptr, nullptr).value()[0];
}

}  // namespace detail

/// Trains on the given (already normalized) sample positions. Ensemble
/// members are optimized one after another with independent optimizers and
/// early stopping; the other strategies optimize their full objective.
inline TrainLog train(ModelBundle& model, const Dataset& ds, std::span<const std::size_t> positions,
                      const TrainConfig& cfg, nn::Rng& rng) {
    cfg.validate();
    if (ds.manifest.sensors != model.manifest.sensors) throw ConfigError("dataset does not match the model's manifest");
    if (positions.empty()) throw DataError("training needs at least one sample");
    if (cfg.sensor_dropout &&
        (model.strategy == FusionStrategy::Ensemble || model.strategy == FusionStrategy::Esensi)) {
        throw ConfigError("sensor dropout applies to input- or feature-level fusion");
    }
    if (cfg.temporal_dropout && model.strategy != FusionStrategy::Input) {
        throw ConfigError("temporal dropout applies to input-level fusion");
    }

    detail::Augmentation aug;
    aug.config = &cfg;
    if (cfg.sensor_dropout) {
        aug.maskable = resolve_maskable(*cfg.sensor_dropout, ds.manifest);
        if (aug.maskable.empty()) throw ConfigError("sensor dropout needs at least one maskable sensor");
        if (cfg.sensor_dropout->mode == SensorDropoutMode::Combinations) {
            aug.combos = enumerate_missing_combinations(ds.manifest.sensors.size(), aug.maskable);
        }
    }

    std::vector<std::size_t> order(positions.begin(), positions.end());
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t holdout = 0;
    if (cfg.validation_fraction > 0.0 && order.size() >= 2) {
        holdout = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(order.size())));
        holdout = std::clamp<std::size_t>(holdout, 1, order.size() - 1);
    }
    std::vector<const Sample*> val;
    for (std::size_t i = 0; i < holdout; ++i) val.push_back(&ds.samples.at(order[i]));
    std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(holdout), order.end());

    TrainLog log;
    const bool per_member = model.strategy == FusionStrategy::Ensemble;
    for (std::size_t g = 0; g < model.members.size(); ++g) {
        const auto& group = model.members[g];
        const std::optional<std::size_t> member = per_member ? std::optional<std::size_t>(g) : std::nullopt;
        nn::Adam opt(model.params, group, cfg.adam);
        MemberLog mlog;
        double best = std::numeric_limits<double>::infinity();
        std::vector<Tensor> best_values;
        std::size_t since_best = 0;
        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::shuffle(fit.begin(), fit.end(), rng);
            double epoch_loss = 0.0;
            std::size_t batches = 0;
            for (std::size_t start = 0; start < fit.size(); start += cfg.batch_size) {
                const std::size_t stop = std::min(fit.size(), start + cfg.batch_size);
                std::vector<const Sample*> batch;
                for (std::size_t i = start; i < stop; ++i) batch.push_back(&ds.samples[fit[i]]);
                nn::Tape tape;
                Forward fw(tape, model, &model.params, true, &rng);
                nn::Var loss = detail::batch_loss(fw, model, batch, member, &aug, &rng);
                const double lv = loss.value()[0];
                if (!std::isfinite(lv)) {
                    throw TrainingDivergedError("non-finite training loss at epoch " + std::to_string(epoch) +
                                                (member ? " (member " + model.manifest.sensors[*member].name + ")" : ""));
                }
                tape.backward(loss);
                opt.step();
                epoch_loss += lv;
                ++batches;
            }
            mlog.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));
            mlog.epochs_run = epoch + 1;
            if (val.empty()) continue;
            const double vl = detail::eval_loss(model, val, member);
            if (!std::isfinite(vl)) throw TrainingDivergedError("non-finite validation loss at epoch " + std::to_string(epoch));
            mlog.val_loss.push_back(vl);
            if (vl < best) {
                best = vl;
                mlog.best_epoch = epoch;
                since_best = 0;
                best_values.clear();
                for (auto idx : group) best_values.push_back(model.params[idx].value);
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
        if (!best_values.empty()) {
            for (std::size_t k = 0; k < group.size(); ++k) model.params[group[k]].value = best_values[k];
        }
        for (auto idx : group) model.params[idx].has_grad = false;
        log.members.push_back(std::move(mlog));
    }
    return log;
}

/// Trains on every fold except `fold`.
inline TrainLog train(ModelBundle& model, const Dataset& ds, const FoldSplit& folds, std::size_t fold,
                      const TrainConfig& cfg, nn::Rng& rng) {
    const auto positions = folds.training_positions(fold);
    return train(model, ds, positions, cfg, rng);
}

/// Fraction of correctly classified samples in inference mode, all sensors available.
inline double training_accuracy(const ModelBundle& model, const Dataset& ds, std::span<const std::size_t> positions) {
    std::vector<const Sample*> batch;
    for (auto i : positions) batch.push_back(&ds.samples.at(i));
    std::vector<MaskVector> masks(batch.size(), MaskVector::all_available(model.sensors()));
    MissingPolicy policy;
    policy.kind = model.strategy == FusionStrategy::Ensemble || model.strategy == FusionStrategy::Esensi
                      ? PolicyKind::Ignore
                      : PolicyKind::MeanImpute;
    const auto p = predict_batch(model, batch, masks, policy);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) hits += p.argmax(i) == batch[i]->label() ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(batch.size());
}

}  // namespace msense
