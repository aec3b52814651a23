#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "msense/dataset.hpp"
#include "msense/error.hpp"
#include "msense/tensor.hpp"

namespace msense {

/// Per-sensor, per-feature z-score statistics. Temporal features pool all
/// time steps of the fitting samples.
struct NormalizationStats {
    std::vector<std::vector<double>> mean;
    std::vector<std::vector<double>> stdev;

    /// Stats of data that is already normalized: zero mean, unit scale.
    static NormalizationStats normalized_space(const DatasetManifest& m) {
        NormalizationStats st;
        for (const auto& s : m.sensors) {
            st.mean.emplace_back(s.dim, 0.0);
            st.stdev.emplace_back(s.dim, 1.0);
        }
        return st;
    }

    bool operator==(const NormalizationStats&) const = default;
};

inline NormalizationStats zscore_fit(const Dataset& ds, std::span<const std::size_t> train) {
    if (train.empty()) throw DataError("z-score fit needs at least one training sample");
    const auto& m = ds.manifest;
    NormalizationStats st;
    for (std::size_t s = 0; s < m.sensors.size(); ++s) {
        const auto& spec = m.sensors[s];
        const std::size_t rows_per = spec.temporal() ? spec.timesteps : 1;
        std::vector<double> mean(spec.dim, 0.0), var(spec.dim, 0.0);
        const double n = static_cast<double>(train.size() * rows_per);
        for (auto i : train) {
            const Tensor& b = ds.samples.at(i).blocks[s];
            for (std::size_t r = 0; r < rows_per; ++r)
                for (std::size_t f = 0; f < spec.dim; ++f) mean[f] += b[r * spec.dim + f];
        }
        for (auto& v : mean) v /= n;
        for (auto i : train) {
            const Tensor& b = ds.samples[i].blocks[s];
            for (std::size_t r = 0; r < rows_per; ++r)
                for (std::size_t f = 0; f < spec.dim; ++f) {
                    const double d = b[r * spec.dim + f] - mean[f];
                    var[f] += d * d;
                }
        }
        std::vector<double> sd(spec.dim);
        for (std::size_t f = 0; f < spec.dim; ++f) {
            sd[f] = std::sqrt(var[f] / n);
            if (sd[f] == 0.0) sd[f] = 1.0;
        }
        for (auto f : spec.onehot_features) {
            mean[f] = 0.0;
            sd[f] = 1.0;
        }
        st.mean.push_back(std::move(mean));
        st.stdev.push_back(std::move(sd));
    }
    return st;
}

inline Dataset zscore_apply(const NormalizationStats& st, const Dataset& ds) {
    Dataset out = ds;
    const auto& m = ds.manifest;
    for (auto& smp : out.samples) {
        for (std::size_t s = 0; s < m.sensors.size(); ++s) {
            const std::size_t dim = m.sensors[s].dim;
            Tensor& b = smp.blocks[s];
            for (std::size_t k = 0; k < b.size(); ++k) {
                const std::size_t f = k % dim;
                b[k] = (b[k] - st.mean[s][f]) / st.stdev[s][f];
            }
        }
    }
    return out;
}

/// Fits on the training positions only, then transforms every sample.
inline std::pair<NormalizationStats, Dataset> zscore_fit_apply(const Dataset& ds, std::span<const std::size_t> train) {
    auto st = zscore_fit(ds, train);
    auto normalized = zscore_apply(st, ds);
    return {std::move(st), std::move(normalized)};
}

inline Tensor one_hot_encode(std::span<const std::size_t> ids, std::size_t classes) {
    if (classes == 0) throw RangeError("one-hot encoding needs at least one category");
    if (ids.empty()) throw DimensionError("one-hot encoding of an empty id list");
    Tensor out({ids.size(), classes});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= classes) {
            throw RangeError("category id " + std::to_string(ids[i]) + " outside [0," + std::to_string(classes) + ")");
        }
        out.at(i, ids[i]) = 1.0;
    }
    return out;
}

/// Common time length of the temporal sensors; throws when they disagree.
inline std::size_t aligned_timesteps(const DatasetManifest& m) {
    std::size_t steps = 0;
    for (const auto& s : m.sensors) {
        if (!s.temporal()) continue;
        if (steps == 0) {
            steps = s.timesteps;
        } else if (s.timesteps != steps) {
            throw AlignmentError("temporal sensors disagree on length (" + std::to_string(steps) + " vs " +
                                 std::to_string(s.timesteps) + ")");
        }
    }
    if (steps == 0) throw AlignmentError("input-level alignment needs at least one temporal sensor");
    return steps;
}

/// Writes the aligned [T×ΣD] block of one sample into `out`. Sensors with
/// `available[s] == false` are filled with `fill[s]` per feature instead.
inline void align_into(const Sample& smp, const DatasetManifest& m, std::span<const std::uint8_t> available,
                       const std::vector<std::vector<double>>& fill, double* out) {
    const std::size_t steps = aligned_timesteps(m);
    const std::size_t width = m.total_feature_dim();
    std::size_t off = 0;
    for (std::size_t s = 0; s < m.sensors.size(); ++s) {
        const auto& spec = m.sensors[s];
        const Tensor& b = smp.blocks[s];
        const bool keep = available.empty() || available[s];
        for (std::size_t t = 0; t < steps; ++t) {
            double* row = out + t * width + off;
            for (std::size_t f = 0; f < spec.dim; ++f) {
                if (!keep) {
                    row[f] = fill[s][f];
                } else {
                    row[f] = spec.temporal() ? b[t * spec.dim + f] : b[f];
                }
            }
        }
        off += spec.dim;
    }
}

/// Concatenates temporal blocks along features and repeats each static
/// vector at every time step.
inline Tensor align_static_repeat(const Sample& smp, const DatasetManifest& m) {
    const std::size_t steps = aligned_timesteps(m);
    Tensor out({steps, m.total_feature_dim()});
    align_into(smp, m, {}, {}, out.data());
    return out;
}

/// Positions into the dataset's sample list, one list per fold.
struct FoldSplit {
    std::vector<std::vector<std::size_t>> folds;

    std::size_t k() const { return folds.size(); }

    std::vector<std::size_t> training_positions(std::size_t fold) const {
        if (fold >= folds.size()) throw ParameterError("fold index out of range");
        std::vector<std::size_t> out;
        for (std::size_t f = 0; f < folds.size(); ++f) {
            if (f != fold) out.insert(out.end(), folds[f].begin(), folds[f].end());
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    bool operator==(const FoldSplit&) const = default;
};

/// Seeded shuffle followed by contiguous chunking; the first N mod k folds
/// receive one extra element.
inline FoldSplit kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ParameterError("k-fold split needs k >= 2");
    if (n < k) throw ParameterError("cannot split " + std::to_string(n) + " samples into " + std::to_string(k) + " folds");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    FoldSplit split;
    const std::size_t base = n / k, extra = n % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        split.folds.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
    }
    return split;
}

}  // namespace msense
