#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "msense/cca.hpp"
#include "msense/dataset.hpp"
#include "msense/io.hpp"
#include "msense/preprocess.hpp"
#include "msense/synth.hpp"

using namespace msense;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("msense_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

SynthConfig three_sensor(std::size_t n, std::uint64_t seed) {
    SynthConfig c;
    c.n_samples = n;
    c.seed = seed;
    c.sensors = {{"a", SensorKind::Temporal, 3, 5, 0.2},
                 {"b", SensorKind::Temporal, 2, 5, 0.4},
                 {"s", SensorKind::Static, 2, 1, 0.1}};
    return c;
}

}  // namespace

TEST(LoadDataset, RoundTripsGeneratorOutput) {
    const auto dir = scratch("roundtrip");
    const Dataset ds = synth_generate(three_sensor(10, 4));
    write_dataset(ds, dir);
    const Dataset back = load_dataset(dir / "manifest.json", dir);
    EXPECT_EQ(back.size(), 10u);
    EXPECT_EQ(back.manifest, ds.manifest);
    EXPECT_EQ(back.samples, ds.samples);
}

TEST(LoadDataset, WrongColumnCountIsShapeMismatch) {
    const auto dir = scratch("columns");
    write_dataset(synth_generate(three_sensor(4, 1)), dir);
    auto lines = io::read_lines(dir / "s.csv");
    lines[2] += ",7";
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    io::write_file(dir / "s.csv", text);
    try {
        load_dataset(dir / "manifest.json", dir);
        FAIL() << "expected a shape mismatch";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
    }
}

TEST(LoadDataset, LabelsMissingAnIdIsConsistencyError) {
    const auto dir = scratch("labels");
    write_dataset(synth_generate(three_sensor(4, 1)), dir);
    auto lines = io::read_lines(dir / "labels.csv");
    lines.pop_back();
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    io::write_file(dir / "labels.csv", text);
    EXPECT_THROW(load_dataset(dir / "manifest.json", dir), ConsistencyError);
}

TEST(LoadDataset, MissingFileAndBadCells) {
    const auto dir = scratch("missing");
    write_dataset(synth_generate(three_sensor(3, 1)), dir);
    fs::remove(dir / "b.csv");
    EXPECT_THROW(load_dataset(dir / "manifest.json", dir), DataError);

    const auto dir2 = scratch("nonnumeric");
    write_dataset(synth_generate(three_sensor(3, 1)), dir2);
    auto lines = io::read_lines(dir2 / "a.csv");
    lines[1] = "0,0,x,1,2";
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    io::write_file(dir2 / "a.csv", text);
    EXPECT_THROW(load_dataset(dir2 / "manifest.json", dir2), DataError);
}

TEST(Manifest, RejectsInvalidDeclarations) {
    DatasetManifest m{"x", TaskKind::Classification, 1, {{"a", SensorKind::Static, 2, 1, {}}}, 0};
    EXPECT_THROW(m.validate(), ConfigError);
    m.n_classes = 2;
    m.sensors.push_back(m.sensors.front());
    EXPECT_THROW(m.validate(), ConfigError);
    m.sensors.pop_back();
    EXPECT_NO_THROW(m.validate());
    EXPECT_THROW(m.sensor_index("nope"), ConfigError);
}

TEST(ZScore, ConstantColumnNormalizesToZero) {
    Dataset ds;
    ds.manifest = {"c", TaskKind::Regression, 0, {{"s", SensorKind::Static, 2, 1, {}}}, 3};
    for (int i = 0; i < 3; ++i) ds.samples.push_back({i, {Tensor::vector({4.0, static_cast<double>(i)})}, 0.0});
    const std::vector<std::size_t> train{0, 1, 2};
    auto [st, out] = zscore_fit_apply(ds, train);
    EXPECT_EQ(st.stdev[0][0], 1.0);
    for (const auto& s : out.samples) EXPECT_EQ(s.blocks[0][0], 0.0);
}

TEST(ZScore, AnalyticValue) {
    NormalizationStats st{{{10.0}}, {{2.0}}};
    Dataset ds;
    ds.manifest = {"c", TaskKind::Regression, 0, {{"s", SensorKind::Static, 1, 1, {}}}, 1};
    ds.samples.push_back({0, {Tensor::vector({14.0})}, 0.0});
    EXPECT_DOUBLE_EQ(zscore_apply(st, ds).samples[0].blocks[0][0], 2.0);
}

TEST(ZScore, TrainingFoldMeanIsZeroAndNoLeakage) {
    Dataset ds = synth_generate(three_sensor(40, 9));
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < 30; ++i) train.push_back(i);
    auto [st, out] = zscore_fit_apply(ds, train);
    for (std::size_t s = 0; s < 3; ++s) {
        const auto& spec = ds.manifest.sensors[s];
        for (std::size_t f = 0; f < spec.dim; ++f) {
            double sum = 0.0;
            std::size_t n = 0;
            for (auto i : train) {
                const Tensor& b = out.samples[i].blocks[s];
                for (std::size_t k = f; k < b.size(); k += spec.dim, ++n) sum += b[k];
            }
            EXPECT_NEAR(sum / static_cast<double>(n), 0.0, 1e-9);
        }
    }
    // Perturbing a validation row leaves the statistics untouched.
    ds.samples[35].blocks[0].fill(1e6);
    EXPECT_EQ(zscore_fit(ds, train), st);
}

TEST(ZScore, OneHotColumnsPassThrough) {
    Dataset ds;
    ds.manifest = {"c", TaskKind::Regression, 0, {{"s", SensorKind::Static, 3, 1, {1, 2}}}, 2};
    ds.samples.push_back({0, {Tensor::vector({5.0, 1.0, 0.0})}, 0.0});
    ds.samples.push_back({1, {Tensor::vector({7.0, 0.0, 1.0})}, 0.0});
    const std::vector<std::size_t> train{0, 1};
    auto [st, out] = zscore_fit_apply(ds, train);
    EXPECT_EQ(out.samples[0].blocks[0][1], 1.0);
    EXPECT_EQ(out.samples[1].blocks[0][2], 1.0);
    EXPECT_DOUBLE_EQ(out.samples[0].blocks[0][0], -1.0);
}

TEST(ZScore, EmptyTrainingSetRejected) {
    Dataset ds = synth_generate(three_sensor(3, 1));
    EXPECT_THROW(zscore_fit(ds, std::vector<std::size_t>{}), DataError);
}

TEST(OneHot, Encodes) {
    EXPECT_EQ(one_hot_encode(std::vector<std::size_t>{2}, 4), Tensor::matrix({{0, 0, 1, 0}}));
    EXPECT_EQ(one_hot_encode(std::vector<std::size_t>{0, 1}, 2), Tensor::matrix({{1, 0}, {0, 1}}));
    EXPECT_THROW(one_hot_encode(std::vector<std::size_t>{4}, 4), RangeError);
}

TEST(AlignStaticRepeat, StaticBlockRepeatsOverTime) {
    DatasetManifest m{"a", TaskKind::Regression, 0,
                      {{"t", SensorKind::Temporal, 1, 12, {}}, {"s", SensorKind::Static, 2, 1, {}}}, 1};
    Sample smp{0, {Tensor({12, 1}, 0.5), Tensor::vector({3.0, -1.0})}, 0.0};
    const Tensor out = align_static_repeat(smp, m);
    ASSERT_EQ(out.shape(), (Shape{12, 3}));
    for (std::size_t t = 0; t < 12; ++t) {
        EXPECT_EQ(out.at(t, 1), 3.0);
        EXPECT_EQ(out.at(t, 2), -1.0);
    }
}

TEST(AlignStaticRepeat, CropHarvestSchemaWidth) {
    const auto cfg = synth_preset("cropharvest-like", 2, 1);
    const Dataset ds = synth_generate(cfg);
    const Tensor out = align_static_repeat(ds.samples[0], ds.manifest);
    EXPECT_EQ(out.shape(), (Shape{12, 17}));
    EXPECT_EQ(ds.manifest.total_feature_dim(), 17u);
}

TEST(AlignStaticRepeat, MismatchedLengthsRejected) {
    DatasetManifest m{"a", TaskKind::Regression, 0,
                      {{"x", SensorKind::Temporal, 1, 12, {}}, {"y", SensorKind::Temporal, 1, 4, {}}}, 1};
    Sample smp{0, {Tensor({12, 1}), Tensor({4, 1})}, 0.0};
    EXPECT_THROW(align_static_repeat(smp, m), AlignmentError);
}

TEST(KFold, BalancedChunks) {
    const auto split = kfold_split(25, 10, 3);
    std::multiset<std::size_t> sizes;
    for (const auto& f : split.folds) sizes.insert(f.size());
    EXPECT_EQ(sizes.count(3), 5u);
    EXPECT_EQ(sizes.count(2), 5u);
    for (const auto& f : kfold_split(10, 10, 3).folds) EXPECT_EQ(f.size(), 1u);
    EXPECT_EQ(kfold_split(50, 5, 42), kfold_split(50, 5, 42));
    EXPECT_THROW(kfold_split(3, 5, 0), ParameterError);
    EXPECT_THROW(kfold_split(3, 1, 0), ParameterError);
}

TEST(KFold, PartitionProperty) {
    for (std::size_t k : {2, 5, 10}) {
        for (std::size_t n = k; n <= 1000; n += 37) {
            const auto split = kfold_split(n, k, n * 31 + k);
            std::vector<int> hits(n, 0);
            std::size_t lo = n, hi = 0;
            for (const auto& f : split.folds) {
                lo = std::min(lo, f.size());
                hi = std::max(hi, f.size());
                for (auto i : f) hits.at(i)++;
            }
            EXPECT_LE(hi - lo, 1u);
            EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
        }
    }
}

TEST(Synth, NoiselessViewsShareTheLatent) {
    SynthConfig c;
    c.task = TaskKind::Regression;
    c.n_samples = 300;
    c.latent_dim = 3;
    c.redundancy = 1.0;
    c.seed = 17;
    c.sensors = {{"p", SensorKind::Static, 3, 1, 0.0}, {"q", SensorKind::Static, 3, 1, 0.0}};
    const Dataset ds = synth_generate(c);
    Tensor a({300, 3}), b({300, 3});
    for (std::size_t i = 0; i < 300; ++i) {
        for (std::size_t f = 0; f < 3; ++f) {
            a.at(i, f) = ds.samples[i].blocks[0][f];
            b.at(i, f) = ds.samples[i].blocks[1][f];
        }
    }
    const auto res = cca_fit(a, b, 3);
    for (double r : res.correlations) EXPECT_NEAR(r, 1.0, 1e-6);
}

TEST(Synth, EmptyDatasetHasHeaders) {
    const auto dir = scratch("empty");
    write_dataset(synth_generate(three_sensor(0, 1)), dir);
    EXPECT_EQ(io::read_file(dir / "labels.csv"), "sample_id,target\n");
    EXPECT_EQ(io::read_file(dir / "a.csv"), "sample_id,t,f0,f1,f2\n");
    EXPECT_EQ(io::read_file(dir / "s.csv"), "sample_id,f0,f1\n");
    EXPECT_EQ(load_dataset(dir / "manifest.json", dir).size(), 0u);
}

TEST(Synth, SameSeedByteIdenticalFiles) {
    const auto d1 = scratch("det1"), d2 = scratch("det2");
    write_dataset(synth_generate(three_sensor(20, 99)), d1);
    write_dataset(synth_generate(three_sensor(20, 99)), d2);
    for (const char* f : {"manifest.json", "a.csv", "b.csv", "s.csv", "labels.csv"}) {
        EXPECT_EQ(io::read_file(d1 / f), io::read_file(d2 / f)) << f;
    }
}

TEST(Synth, InvalidDimsRejected) {
    auto c = three_sensor(5, 1);
    c.sensors[0].dim = 0;
    EXPECT_THROW(synth_generate(c), ConfigError);
    EXPECT_THROW(synth_preset("unknown", 5, 1), ConfigError);
}

TEST(Synth, PresetsFollowFeatureCounts) {
    const auto crop = synth_preset("cropharvest-like", 5, 1).manifest();
    ASSERT_EQ(crop.sensors.size(), 4u);
    EXPECT_EQ(crop.sensors[0].dim, 11u);
    EXPECT_EQ(crop.sensors[1].dim, 2u);
    EXPECT_EQ(crop.sensors[2].dim, 2u);
    EXPECT_EQ(crop.sensors[3].dim, 2u);
    EXPECT_FALSE(crop.sensors[3].temporal());
    const auto lfmc = synth_preset("lfmc-like", 5, 1).manifest();
    EXPECT_EQ(lfmc.sensors[0].dim, 8u);
    EXPECT_EQ(lfmc.sensors[1].dim, 3u);
    EXPECT_EQ(lfmc.sensors[2].dim, 7u);
    const auto pm = synth_preset("pm25-like", 5, 1).manifest();
    EXPECT_EQ(pm.sensors[0].dim, 3u);
    EXPECT_EQ(pm.sensors[1].dim, 4u);
    EXPECT_EQ(pm.sensors[2].dim, 2u);
}

TEST(Io, NumbersRoundTripExactly) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1e3);
    for (int i = 0; i < 1000; ++i) {
        const double v = g(rng);
        EXPECT_EQ(io::parse_number(io::format_number(v), "test"), v);
    }
}
