#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "msense/dataset.hpp"
#include "msense/error.hpp"

namespace msense {

/// Model outputs for a batch: class probabilities [rows×classes] for
/// classification, one value per row for regression.
struct Predictions {
    TaskKind task = TaskKind::Regression;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::vector<double> values;

    double at(std::size_t r, std::size_t c = 0) const { return values[r * cols + c]; }
    double& at(std::size_t r, std::size_t c = 0) { return values[r * cols + c]; }

    std::size_t argmax(std::size_t r) const {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c) {
            if (at(r, c) > at(r, best)) best = c;
        }
        return best;
    }

    std::vector<std::size_t> classes() const {
        std::vector<std::size_t> out(rows);
        for (std::size_t r = 0; r < rows; ++r) out[r] = argmax(r);
        return out;
    }

    bool operator==(const Predictions&) const = default;
};

inline double rmse(std::span<const double> y, std::span<const double> yhat) {
    if (y.empty()) throw DataError("rmse of an empty prediction set");
    if (y.size() != yhat.size()) throw DimensionError("rmse: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return std::sqrt(s / static_cast<double>(y.size()));
}

/// RMSE against targets; for classification the per-row error is the
/// Euclidean distance between the one-hot target and the probability row.
inline double rmse(std::span<const double> y, const Predictions& p) {
    if (y.empty()) throw DataError("rmse of an empty prediction set");
    if (y.size() != p.rows) throw DimensionError("rmse: length mismatch");
    if (p.task == TaskKind::Regression) return rmse(y, std::span<const double>(p.values));
    double s = 0.0;
    for (std::size_t r = 0; r < p.rows; ++r) {
        const auto label = static_cast<std::size_t>(y[r]);
        if (label >= p.cols) throw LabelError("target class outside the probability columns");
        for (std::size_t c = 0; c < p.cols; ++c) {
            const double d = (c == label ? 1.0 : 0.0) - p.at(r, c);
            s += d * d;
        }
    }
    return std::sqrt(s / static_cast<double>(p.rows));
}

inline double r2(std::span<const double> y, std::span<const double> yhat) {
    if (y.empty()) throw DataError("r2 of an empty prediction set");
    if (y.size() != yhat.size()) throw DimensionError("r2: length mismatch");
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_tot += (y[i] - mean) * (y[i] - mean);
        ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    }
    if (ss_tot == 0.0) throw DegenerateReferenceError("r2 undefined: target has zero variance");
    return 1.0 - ss_res / ss_tot;
}

/// Unweighted mean of per-class F1. A class with no predicted and no actual
/// members scores 0 and still counts toward the mean.
inline double f1_macro(std::span<const std::size_t> y, std::span<const std::size_t> yhat, std::size_t classes) {
    if (y.size() != yhat.size()) throw DimensionError("f1_macro: length mismatch");
    if (classes == 0) throw LabelError("f1_macro needs at least one class");
    std::vector<double> tp(classes, 0.0), fp(classes, 0.0), fn(classes, 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] >= classes || yhat[i] >= classes) throw LabelError("f1_macro: label outside [0,K)");
        if (y[i] == yhat[i]) {
            tp[y[i]] += 1.0;
        } else {
            fp[yhat[i]] += 1.0;
            fn[y[i]] += 1.0;
        }
    }
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        const double denom = 2.0 * tp[c] + fp[c] + fn[c];
        total += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    }
    return total / static_cast<double>(classes);
}

/// min(1, exp(1 − rmse_miss / rmse_full)).
inline double prs(double rmse_miss, double rmse_full) {
    if (!(rmse_full > 0.0)) throw DegenerateReferenceError("PRS undefined: full-sensor RMSE is zero");
    return std::min(1.0, std::exp(1.0 - rmse_miss / rmse_full));
}

inline double prs(std::span<const double> y, const Predictions& missing, const Predictions& full) {
    return prs(rmse(y, missing), rmse(y, full));
}

/// Predictive score by task: F1-macro (classification) or R² (regression).
inline double predictive_score(std::span<const double> y, const Predictions& p) {
    if (p.task == TaskKind::Classification) {
        std::vector<std::size_t> labels(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) labels[i] = static_cast<std::size_t>(y[i]);
        const auto cls = p.classes();
        return f1_macro(labels, cls, p.cols);
    }
    return r2(y, p.values);
}

inline std::string score_kind(TaskKind task) { return task == TaskKind::Classification ? "f1" : "r2"; }

}  // namespace msense
