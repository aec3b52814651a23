#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "msense/checkpoint.hpp"
#include "msense/model.hpp"
#include "msense/synth.hpp"
#include "msense/train.hpp"

using namespace msense;
using msense::testing::grad_check;

namespace {

DatasetManifest three_sensors(TaskKind task = TaskKind::Classification) {
    return {"m", task, task == TaskKind::Classification ? 3u : 0u,
            {{"a", SensorKind::Temporal, 3, 6, {}}, {"b", SensorKind::Temporal, 2, 6, {}},
             {"c", SensorKind::Static, 2, 1, {}}},
            0};
}

Dataset random_dataset(const DatasetManifest& m, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Dataset ds;
    ds.manifest = m;
    ds.manifest.n_samples = n;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.id = static_cast<std::int64_t>(i);
        for (const auto& spec : m.sensors) {
            Tensor b(spec.block_shape());
            for (auto& v : b.values()) v = g(rng);
            s.blocks.push_back(std::move(b));
        }
        s.target = m.classification() ? static_cast<double>(i % m.n_classes) : g(rng);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

std::vector<const Sample*> pointers(const Dataset& ds) {
    std::vector<const Sample*> out;
    for (const auto& s : ds.samples) out.push_back(&s);
    return out;
}

EncoderConfig small(std::size_t d = 6) { return {d, 2, 0.2, 3}; }

/// Full-objective loss of a model: ensemble members summed.
nn::Var full_loss(nn::Tape& tape, ModelBundle& model, std::span<const Sample* const> batch, bool training,
                  std::uint64_t seed) {
    nn::Rng rng(seed);
    Forward fw(tape, model, &model.params, training, training ? &rng : nullptr);
    if (model.strategy != FusionStrategy::Ensemble) {
        return detail::batch_loss(fw, model, batch, std::nullopt, nullptr, nullptr);
    }
    std::optional<nn::Var> total;
    for (std::size_t s = 0; s < model.sensors(); ++s) {
        nn::Var l = detail::batch_loss(fw, model, batch, s, nullptr, nullptr);
        total = total ? nn::add(*total, l) : l;
    }
    return *total;
}

}  // namespace

TEST(BuildModel, EnsembleStructure) {
    const auto mb = build_model(three_sensors(), FusionStrategy::Ensemble, small());
    EXPECT_EQ(mb.encoders.size(), 3u);
    EXPECT_EQ(mb.heads.size(), 3u);
    EXPECT_EQ(mb.sensor_encodings.size(), 0u);
    EXPECT_EQ(mb.members.size(), 3u);
}

TEST(BuildModel, ConcatenationHeadWidthIsTwiceEmbedding) {
    EsensiOptions opt{true, true, Combine::Concatenation};
    const auto mb = build_model(three_sensors(), FusionStrategy::Esensi, {128, 2, 0.2, 3}, opt);
    ASSERT_EQ(mb.heads.size(), 1u);
    EXPECT_EQ(mb.heads[0].in_dim, 256u);
    EXPECT_EQ(mb.params.get("head.shared.dense0.weight").value.shape(), (Shape{256, 128}));
    EXPECT_EQ(mb.params.get("head.shared.ln.gain").value.shape(), (Shape{256}));
    EXPECT_EQ(mb.sensor_encodings.size(), 3u);
}

TEST(BuildModel, InputEncoderOnCropSchema) {
    const auto m = synth_preset("cropharvest-like", 1, 1).manifest();
    const auto mb = build_model(m, FusionStrategy::Input, small());
    ASSERT_EQ(mb.encoders.size(), 1u);
    EXPECT_EQ(mb.encoders[0].in_dim, 17u);
}

TEST(BuildModel, EsensiOptionsRejectedElsewhere) {
    EXPECT_THROW(build_model(three_sensors(), FusionStrategy::Input, small(), EsensiOptions{}), ConfigError);
    EXPECT_THROW(build_model(three_sensors(), FusionStrategy::Esensi, small(),
                             EsensiOptions{false, false, Combine::Concatenation}),
                 ConfigError);
    EXPECT_THROW(build_model(three_sensors(), FusionStrategy::Ensemble, {0, 2, 0.2, 3}), ConfigError);
}

TEST(BuildModel, SeededInitIsReproducible) {
    EXPECT_EQ(build_model(three_sensors(), FusionStrategy::Feature, small(), std::nullopt, 5).params,
              build_model(three_sensors(), FusionStrategy::Feature, small(), std::nullopt, 5).params);
}

struct ArchCase {
    const char* name;
    FusionStrategy strategy;
    std::optional<EsensiOptions> esensi;
    TaskKind task;
};

class ArchitectureGradient : public ::testing::TestWithParam<ArchCase> {};

TEST_P(ArchitectureGradient, MatchesFiniteDifferences) {
    const auto& c = GetParam();
    for (std::uint64_t seed : {1, 2}) {
        auto model = build_model(three_sensors(c.task), c.strategy, {5, 2, 0.2, 3}, c.esensi, seed);
        // Zero-initialised biases put ReLU inputs exactly on the kink; move to a generic point.
        nn::Rng jitter(seed + 50);
        std::normal_distribution<double> g(0.0, 0.3);
        for (auto& p : model.params)
            for (auto& v : p.value.values()) v += g(jitter);
        const Dataset ds = random_dataset(model.manifest, 4, seed + 10);
        const auto batch = pointers(ds);
        for (bool training : {false, true}) {
            const auto res = grad_check(model.params, [&](nn::Tape& tape) {
                return full_loss(tape, model, batch, training, seed + 100);
            });
            EXPECT_LT(res.max_rel_error, 1e-4) << c.name << " seed " << seed << " training " << training << " worst " << res.worst_param;
            EXPECT_EQ(res.checked, model.params.scalar_count());
        }
    }
}

INSTANTIATE_TEST_SUITE_P(
    AllStrategies, ArchitectureGradient,
    ::testing::Values(ArchCase{"input", FusionStrategy::Input, std::nullopt, TaskKind::Classification},
                      ArchCase{"feature", FusionStrategy::Feature, std::nullopt, TaskKind::Classification},
                      ArchCase{"ensemble", FusionStrategy::Ensemble, std::nullopt, TaskKind::Classification},
                      ArchCase{"shared", FusionStrategy::Esensi, EsensiOptions{false, false, Combine::Addition},
                               TaskKind::Classification},
                      ArchCase{"encoding", FusionStrategy::Esensi, EsensiOptions{true, false, Combine::Addition},
                               TaskKind::Classification},
                      ArchCase{"norm_add", FusionStrategy::Esensi, EsensiOptions{true, true, Combine::Addition},
                               TaskKind::Classification},
                      ArchCase{"norm_concat", FusionStrategy::Esensi,
                               EsensiOptions{true, true, Combine::Concatenation}, TaskKind::Classification},
                      ArchCase{"esensi_regression", FusionStrategy::Esensi,
                               EsensiOptions{true, true, Combine::Addition}, TaskKind::Regression}),
    [](const auto& info) { return std::string(info.param.name); });

namespace {

/// Regression ensemble whose members output the given constants.
ModelBundle constant_ensemble(const std::vector<double>& values, FusionStrategy strategy = FusionStrategy::Ensemble) {
    DatasetManifest m{"k", TaskKind::Regression, 0, {}, 0};
    for (std::size_t s = 0; s < values.size(); ++s) {
        m.sensors.push_back({"s" + std::to_string(s), SensorKind::Temporal, 2, 4, {}});
    }
    auto mb = build_model(m, strategy, small(4), std::nullopt, 3);
    for (std::size_t s = 0; s < values.size(); ++s) {
        mb.params[mb.heads[s].weights[1]].value.fill(0.0);
        mb.params[mb.heads[s].biases[1]].value.fill(values[s]);
    }
    return mb;
}

}  // namespace

TEST(Predict, EnsembleOfConstantHeads) {
    const auto mb = constant_ensemble({0.7, 0.7, 0.7});
    const Dataset ds = random_dataset(mb.manifest, 3, 1);
    MissingPolicy ignore{PolicyKind::Ignore, {}, 0.0};
    for (const auto& s : ds.samples) {
        EXPECT_DOUBLE_EQ(predict(mb, s, MaskVector::all_available(3), ignore).values[0], 0.7);
    }
}

TEST(Predict, IgnoreAveragesAvailableSensors) {
    const auto mb = constant_ensemble({0.2, 0.8, 0.6});
    const Dataset ds = random_dataset(mb.manifest, 1, 2);
    MissingPolicy ignore{PolicyKind::Ignore, {}, 0.0};
    EXPECT_NEAR(predict(mb, ds.samples[0], MaskVector{{1, 0, 1}}, ignore).values[0], 0.4, 1e-15);
    EXPECT_THROW(predict(mb, ds.samples[0], MaskVector{{0, 0, 0}}, ignore), NoInformationError);
}

TEST(Predict, AggregateEqualsMeanOverEveryPattern) {
    for (auto strategy : {FusionStrategy::Ensemble, FusionStrategy::Esensi}) {
        for (std::size_t n = 1; n <= 4; ++n) {
            DatasetManifest m{"p", TaskKind::Classification, 3, {}, 0};
            for (std::size_t s = 0; s < n; ++s) m.sensors.push_back({"s" + std::to_string(s), SensorKind::Temporal, 2, 5, {}});
            const auto mb = build_model(m, strategy, small(4), std::nullopt, n);
            const Dataset ds = random_dataset(m, 5, n + 7);
            const auto batch = pointers(ds);
            std::vector<Predictions> per;
            for (std::size_t s = 0; s < n; ++s) per.push_back(sensor_predictions(mb, batch, s));
            for (const auto& mask : enumerate_missing_combinations(n)) {
                const std::vector<MaskVector> masks(5, mask);
                const auto p = predict_batch(mb, batch, masks, {PolicyKind::Ignore, {}, 0.0});
                for (std::size_t i = 0; i < 5; ++i) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        double sum = 0.0;
                        for (std::size_t s = 0; s < n; ++s)
                            if (mask[s]) sum += per[s].at(i, c);
                        EXPECT_NEAR(p.at(i, c), sum / static_cast<double>(mask.count()), 1e-12);
                    }
                }
            }
        }
    }
}

TEST(Predict, PureInInferenceMode) {
    auto mb = build_model(three_sensors(), FusionStrategy::Feature, small(), std::nullopt, 4);
    const Dataset ds = random_dataset(mb.manifest, 6, 3);
    const auto batch = pointers(ds);
    const std::vector<MaskVector> masks(6, MaskVector{{1, 0, 1}});
    const auto a = predict_batch(mb, batch, masks, {});
    const auto b = predict_batch(mb, batch, masks, {});
    EXPECT_EQ(a.values, b.values);
    for (std::size_t i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) sum += a.at(i, c);
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Predict, FeatureExemplarFillsFromGallery) {
    auto mb = build_model(three_sensors(), FusionStrategy::Feature, small(), std::nullopt, 4);
    const Dataset ds = random_dataset(mb.manifest, 10, 3);
    std::vector<std::size_t> all(10);
    for (std::size_t i = 0; i < 10; ++i) all[i] = i;
    const Gallery g = build_feature_gallery(mb, ds, all);
    MissingPolicy ex{PolicyKind::Exemplar, {}, 0.0};
    // Querying with a gallery member reproduces its full-sensor prediction.
    const auto full = predict(mb, ds.samples[4], MaskVector::all_available(3), ex, &g);
    const auto filled = predict(mb, ds.samples[4], MaskVector{{1, 0, 1}}, ex, &g);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(full.values[c], filled.values[c], 1e-12);
    EXPECT_THROW(predict(mb, ds.samples[4], MaskVector{{1, 0, 1}}, ex), DataError);
}

TEST(Predict, InputRejectsIgnorePolicy) {
    auto mb = build_model(three_sensors(), FusionStrategy::Input, small());
    const Dataset ds = random_dataset(mb.manifest, 1, 3);
    EXPECT_THROW(predict(mb, ds.samples[0], MaskVector{{1, 0, 1}}, {PolicyKind::Ignore, {}, 0.0}), ConfigError);
}

namespace {

/// Two-sensor esensi model whose encoders are identical.
ModelBundle twin_esensi(EsensiOptions opt) {
    DatasetManifest m{"t", TaskKind::Classification, 3,
                      {{"a", SensorKind::Temporal, 2, 5, {}}, {"b", SensorKind::Temporal, 2, 5, {}}}, 0};
    auto mb = build_model(m, FusionStrategy::Esensi, small(), opt, 11);
    for (std::size_t l = 0; l < mb.encoders[0].weights.size(); ++l) {
        mb.params[mb.encoders[1].weights[l]].value = mb.params[mb.encoders[0].weights[l]].value;
        mb.params[mb.encoders[1].biases[l]].value = mb.params[mb.encoders[0].biases[l]].value;
    }
    return mb;
}

Dataset twin_data(const ModelBundle& mb, std::size_t n) {
    Dataset ds = random_dataset(mb.manifest, n, 21);
    for (auto& s : ds.samples) s.blocks[1] = s.blocks[0];
    return ds;
}

}  // namespace

TEST(Esensi, EqualEncodingsAndEmbeddingsGiveEqualPredictions) {
    for (auto combine : {Combine::Addition, Combine::Concatenation}) {
        auto mb = twin_esensi({true, true, combine});
        mb.params[mb.sensor_encodings[1]].value = mb.params[mb.sensor_encodings[0]].value;
        const Dataset ds = twin_data(mb, 4);
        const auto batch = pointers(ds);
        EXPECT_EQ(sensor_predictions(mb, batch, 0).values, sensor_predictions(mb, batch, 1).values);
    }
}

TEST(Esensi, SwappingEncodingsChangesPredictions) {
    for (auto combine : {Combine::Addition, Combine::Concatenation}) {
        auto mb = build_model(three_sensors(), FusionStrategy::Esensi, small(), EsensiOptions{true, false, combine}, 2);
        const Dataset ds = random_dataset(mb.manifest, 4, 5);
        const auto batch = pointers(ds);
        const auto before = sensor_predictions(mb, batch, 0);
        std::swap(mb.params[mb.sensor_encodings[0]].value, mb.params[mb.sensor_encodings[1]].value);
        const auto after = sensor_predictions(mb, batch, 0);
        double diff = 0.0;
        for (std::size_t k = 0; k < before.values.size(); ++k) diff += std::abs(before.values[k] - after.values[k]);
        EXPECT_GT(diff, 1e-9);
    }
}

TEST(Esensi, SharedHeadCouplesSensors) {
    auto mb = build_model(three_sensors(), FusionStrategy::Esensi, small(), EsensiOptions{}, 3);
    const Dataset ds = random_dataset(mb.manifest, 8, 6);
    const auto batch = pointers(ds);
    const auto before_b = sensor_predictions(mb, batch, 1);
    const Tensor head_before = mb.params.get("head.shared.dense1.weight").value;
    const Tensor enc_b_before = mb.params.get("enc.b.conv0.kernel").value;

    // One Adam step on sensor a's loss only.
    std::vector<std::size_t> used;
    {
        nn::Tape tape;
        Forward fw(tape, mb, &mb.params, false, nullptr);
        nn::Var loss = detail::task_loss(mb, fw.sensor_output(0, sensor_batch(mb.manifest, batch, 0)), batch);
        tape.backward(loss);
        for (std::size_t k = 0; k < mb.params.size(); ++k) {
            const auto& n = mb.params[k].name;
            if (n.rfind("enc.a.", 0) == 0 || n.rfind("head.", 0) == 0 || n == "rho.a") used.push_back(k);
        }
    }
    nn::Adam(mb.params, used, {}).step();

    EXPECT_NE(mb.params.get("head.shared.dense1.weight").value, head_before);
    EXPECT_EQ(mb.params.get("enc.b.conv0.kernel").value, enc_b_before);
    EXPECT_NE(sensor_predictions(mb, batch, 1).values, before_b.values);
}

TEST(Ensemble, MemberTrainingLeavesOthersUntouched) {
    auto mb = build_model(three_sensors(), FusionStrategy::Ensemble, small(), std::nullopt, 3);
    const Dataset ds = random_dataset(mb.manifest, 8, 6);
    const auto batch = pointers(ds);
    const auto snapshot = mb.params;
    {
        nn::Tape tape;
        Forward fw(tape, mb, &mb.params, false, nullptr);
        tape.backward(detail::batch_loss(fw, mb, batch, std::size_t{0}, nullptr, nullptr));
    }
    nn::Adam(mb.params, mb.members[0], {}).step();
    for (std::size_t g = 0; g < 3; ++g) {
        for (auto idx : mb.members[g]) {
            if (g == 0) {
                EXPECT_NE(mb.params[idx].value, snapshot[idx].value) << mb.params[idx].name;
            } else {
                EXPECT_EQ(mb.params[idx].value, snapshot[idx].value) << mb.params[idx].name;
            }
        }
    }
}

TEST(Train, ZeroEpochsLeavesParameters) {
    auto mb = build_model(three_sensors(), FusionStrategy::Input, small(), std::nullopt, 1);
    const Dataset ds = random_dataset(mb.manifest, 10, 2);
    const auto before = mb.params;
    TrainConfig cfg;
    cfg.epochs = 0;
    nn::Rng rng(1);
    std::vector<std::size_t> pos{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    train(mb, ds, pos, cfg, rng);
    EXPECT_EQ(mb.params, before);
}

TEST(Train, OverfitsSeparableSet) {
    SynthConfig c;
    c.n_samples = 20;
    c.n_classes = 2;
    c.seed = 8;
    c.sensors = {{"a", SensorKind::Temporal, 3, 6, 0.05}, {"b", SensorKind::Static, 2, 1, 0.05}};
    const Dataset ds = synth_generate(c);
    std::vector<std::size_t> pos(20);
    for (std::size_t i = 0; i < 20; ++i) pos[i] = i;
    for (auto strategy : {FusionStrategy::Input, FusionStrategy::Feature, FusionStrategy::Ensemble, FusionStrategy::Esensi}) {
        auto mb = build_model(ds.manifest, strategy, {16, 2, 0.0, 3}, std::nullopt, 4);
        TrainConfig cfg;
        cfg.epochs = 200;
        cfg.validation_fraction = 0.0;
        cfg.adam.learning_rate = 1e-2;
        nn::Rng rng(9);
        train(mb, ds, pos, cfg, rng);
        EXPECT_GE(training_accuracy(mb, ds, pos), 0.95) << to_string(strategy);
    }
}

TEST(Train, SameSeedBitIdentical) {
    const Dataset ds = random_dataset(three_sensors(), 30, 4);
    std::vector<std::size_t> pos(30);
    for (std::size_t i = 0; i < 30; ++i) pos[i] = i;
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.sensor_dropout = SensorDropoutConfig{};
    auto run = [&] {
        auto mb = build_model(ds.manifest, FusionStrategy::Input, small(), std::nullopt, 2);
        nn::Rng rng(77);
        train(mb, ds, pos, cfg, rng);
        return mb.params;
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, EarlyStoppingRestoresBestEpoch) {
    const Dataset ds = random_dataset(three_sensors(), 40, 4);
    std::vector<std::size_t> pos(40);
    for (std::size_t i = 0; i < 40; ++i) pos[i] = i;
    auto mb = build_model(ds.manifest, FusionStrategy::Ensemble, small(), std::nullopt, 2);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.patience = 3;
    cfg.batch_size = 8;
    nn::Rng rng(5);
    const auto log = train(mb, ds, pos, cfg, rng);
    ASSERT_EQ(log.members.size(), 3u);
    for (const auto& m : log.members) {
        EXPECT_LE(m.epochs_run, 50u);
        EXPECT_EQ(m.val_loss.size(), m.epochs_run);
        for (double v : m.val_loss) EXPECT_GE(v, m.val_loss[m.best_epoch]);
        if (m.epochs_run < 50) {
            EXPECT_EQ(m.epochs_run, m.best_epoch + 1 + cfg.patience);
        }
    }
}

TEST(Train, DivergentLossAborts) {
    const Dataset ds = random_dataset(three_sensors(TaskKind::Regression), 20, 4);
    std::vector<std::size_t> pos(20);
    for (std::size_t i = 0; i < 20; ++i) pos[i] = i;
    auto mb = build_model(ds.manifest, FusionStrategy::Input, small(), std::nullopt, 2);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.adam.learning_rate = 1e200;
    nn::Rng rng(5);
    EXPECT_THROW(train(mb, ds, pos, cfg, rng), TrainingDivergedError);
}

TEST(Train, AugmentationRestrictedToMatchingStrategies) {
    const Dataset ds = random_dataset(three_sensors(), 10, 4);
    std::vector<std::size_t> pos{0, 1, 2, 3, 4};
    auto mb = build_model(ds.manifest, FusionStrategy::Ensemble, small());
    TrainConfig cfg;
    cfg.sensor_dropout = SensorDropoutConfig{};
    nn::Rng rng(1);
    EXPECT_THROW(train(mb, ds, pos, cfg, rng), ConfigError);
    cfg.sensor_dropout.reset();
    cfg.temporal_dropout = TemporalDropoutConfig{};
    EXPECT_THROW(train(mb, ds, pos, cfg, rng), ConfigError);
    cfg.temporal_dropout.reset();
    cfg.batch_size = 0;
    EXPECT_THROW(train(mb, ds, pos, cfg, rng), ConfigError);
}

TEST(Checkpoint, RoundTripPreservesParametersAndPredictions) {
    const auto dir = std::filesystem::temp_directory_path() / "msense_test_ckpt";
    std::filesystem::remove_all(dir);
    for (auto strategy : {FusionStrategy::Input, FusionStrategy::Feature, FusionStrategy::Ensemble, FusionStrategy::Esensi}) {
        std::optional<EsensiOptions> opt;
        if (strategy == FusionStrategy::Esensi) opt = EsensiOptions{true, true, Combine::Concatenation};
        const auto mb = build_model(three_sensors(), strategy, small(), opt, 13);
        const auto path = dir / (to_string(strategy) + ".json");
        save_checkpoint(mb, path);
        const auto back = load_checkpoint(path);
        EXPECT_EQ(back.params, mb.params);
        EXPECT_EQ(back.strategy, mb.strategy);
        EXPECT_EQ(back.esensi, mb.esensi);
        const Dataset ds = random_dataset(mb.manifest, 3, 1);
        const auto batch = pointers(ds);
        const std::vector<MaskVector> masks(3, MaskVector::all_available(3));
        MissingPolicy pol;
        if (strategy == FusionStrategy::Ensemble || strategy == FusionStrategy::Esensi) pol.kind = PolicyKind::Ignore;
        EXPECT_EQ(predict_batch(back, batch, masks, pol).values, predict_batch(mb, batch, masks, pol).values);
    }
}

TEST(Checkpoint, TamperedManifestRejected) {
    const auto mb = build_model(three_sensors(), FusionStrategy::Input, small());
    auto j = checkpoint_to_json(mb);
    j["manifest"]["name"] = "other";
    EXPECT_THROW(checkpoint_from_json(j), ConfigError);
    j = checkpoint_to_json(mb);
    j["version"] = 99;
    EXPECT_THROW(checkpoint_from_json(j), ConfigError);
}
