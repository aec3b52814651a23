#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "msense/metrics.hpp"

using namespace msense;

namespace {

// Independent oracles: explicit confusion matrix and sums of squares.
double f1_oracle(const std::vector<std::size_t>& y, const std::vector<std::size_t>& p, std::size_t k) {
    std::vector<std::vector<int>> cm(k, std::vector<int>(k, 0));
    for (std::size_t i = 0; i < y.size(); ++i) cm[y[i]][p[i]]++;
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        int tp = cm[c][c], actual = 0, predicted = 0;
        for (std::size_t j = 0; j < k; ++j) {
            actual += cm[c][j];
            predicted += cm[j][c];
        }
        const double precision = predicted ? static_cast<double>(tp) / predicted : 0.0;
        const double recall = actual ? static_cast<double>(tp) / actual : 0.0;
        sum += (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    return sum / static_cast<double>(k);
}

double r2_oracle(const std::vector<double>& y, const std::vector<double>& p) {
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double tot = 0.0, res = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        tot += std::pow(y[i] - mean, 2);
        res += std::pow(y[i] - p[i], 2);
    }
    return 1.0 - res / tot;
}

}  // namespace

TEST(Rmse, KnownValues) {
    const std::vector<double> y{1.0, -2.0, 3.5};
    EXPECT_EQ(rmse(y, y), 0.0);
    EXPECT_NEAR(rmse(std::vector<double>{0, 0}, std::vector<double>{3, 4}), std::sqrt(12.5), 1e-12);
    EXPECT_DOUBLE_EQ(rmse(std::vector<double>{2}, std::vector<double>{5}), 3.0);
    EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), DataError);
}

TEST(Rmse, ZeroIffEqual) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    for (int t = 0; t < 100; ++t) {
        std::vector<double> y(5), p(5);
        for (auto& v : y) v = g(rng);
        p = y;
        EXPECT_EQ(rmse(y, p), 0.0);
        p[t % 5] += 1e-9;
        EXPECT_GT(rmse(y, p), 0.0);
    }
}

TEST(Rmse, ClassificationUsesOneHotDistance) {
    Predictions p{TaskKind::Classification, 2, 2, {1.0, 0.0, 0.5, 0.5}};
    const std::vector<double> y{0, 1};
    // Row 0 exact; row 1 distance² = 0.25 + 0.25.
    EXPECT_NEAR(rmse(y, p), std::sqrt(0.5 / 2.0), 1e-15);
}

TEST(R2, KnownValues) {
    const std::vector<double> y{1, 2, 3};
    EXPECT_EQ(r2(y, y), 1.0);
    EXPECT_EQ(r2(y, std::vector<double>{2, 2, 2}), 0.0);
    EXPECT_DOUBLE_EQ(r2(y, std::vector<double>{1, 2, 2}), 0.5);
    EXPECT_THROW(r2(std::vector<double>{4, 4}, std::vector<double>{4, 4}), DegenerateReferenceError);
}

TEST(F1Macro, KnownValues) {
    const std::vector<std::size_t> y{1, 0, 1, 0};
    EXPECT_EQ(f1_macro(y, y, 2), 1.0);
    EXPECT_NEAR(f1_macro(y, std::vector<std::size_t>{1, 0, 0, 0}, 2), (2.0 / 3.0 + 4.0 / 5.0) / 2.0, 1e-15);
    EXPECT_EQ(f1_macro(y, std::vector<std::size_t>{0, 1, 0, 1}, 2), 0.0);
    EXPECT_THROW(f1_macro(y, std::vector<std::size_t>{0, 2, 0, 1}, 2), LabelError);
}

TEST(F1Macro, AbsentClassCountsAsZero) {
    const std::vector<std::size_t> y{0, 1};
    EXPECT_DOUBLE_EQ(f1_macro(y, y, 3), 2.0 / 3.0);
}

TEST(MetricsProperty, MatchBruteForceOracles) {
    std::mt19937_64 rng(2718);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 30)(rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
        std::uniform_int_distribution<std::size_t> lab(0, k - 1);
        std::vector<std::size_t> y(n), p(n);
        for (auto& v : y) v = lab(rng);
        for (auto& v : p) v = lab(rng);
        EXPECT_NEAR(f1_macro(y, p, k), f1_oracle(y, p, k), 1e-12);

        std::normal_distribution<double> g(0.0, 2.0);
        std::vector<double> yr(n), pr(n);
        for (auto& v : yr) v = g(rng);
        for (auto& v : pr) v = g(rng);
        EXPECT_NEAR(r2(yr, pr), r2_oracle(yr, pr), 1e-12);
    }
}

TEST(Prs, KnownValues) {
    EXPECT_EQ(prs(1.0, 1.0), 1.0);
    EXPECT_NEAR(prs(2.0, 1.0), std::exp(-1.0), 1e-12);
    EXPECT_NEAR(prs(2.0, 1.0), 0.367879, 1e-6);
    EXPECT_EQ(prs(0.5, 1.0), 1.0);
    EXPECT_THROW(prs(1.0, 0.0), DegenerateReferenceError);
}

TEST(Prs, MonotoneAndBounded) {
    double last = 1.0;
    for (double miss = 0.0; miss < 10.0; miss += 0.05) {
        const double v = prs(miss, 1.3);
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_LE(v, last);
        if (miss <= 1.3) EXPECT_EQ(v, 1.0);
        last = v;
    }
}

TEST(Prs, IdenticalPredictionSetsScoreOne) {
    Predictions p{TaskKind::Regression, 3, 1, {0.5, 1.0, 4.0}};
    const std::vector<double> y{1.0, 1.5, 2.0};
    EXPECT_EQ(prs(y, p, p), 1.0);
}
