#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "msense/error.hpp"
#include "msense/tape.hpp"

namespace msense::nn {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias correction over a fixed subset of a ParamStore.
class Adam {
public:
    Adam(ParamStore& store, AdamConfig config = {}) : Adam(store, all_indices(store), config) {}

    Adam(ParamStore& store, std::vector<std::size_t> indices, AdamConfig config = {})
        : store_(&store), indices_(std::move(indices)), config_(config) {
        if (!(config_.learning_rate > 0.0) || !(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
            !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) || !(config_.epsilon > 0.0)) {
            throw OptimizerError("invalid Adam hyperparameters");
        }
        for (auto i : indices_) {
            first_.emplace_back((*store_)[i].value.shape());
            second_.emplace_back((*store_)[i].value.shape());
        }
    }

    void step() {
        for (auto i : indices_) {
            if (!(*store_)[i].has_grad) {
                throw OptimizerError("parameter '" + (*store_)[i].name + "' has no gradient; run backward first");
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < indices_.size(); ++k) {
            Parameter& p = (*store_)[indices_[k]];
            Tensor& m = first_[k];
            Tensor& v = second_[k];
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const double g = p.grad[j];
                m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
                v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
                const double mhat = m[j] / c1;
                const double vhat = v[j] / c2;
                p.value[j] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
            }
            p.has_grad = false;
        }
    }

    std::uint64_t steps() const { return t_; }
    const AdamConfig& config() const { return config_; }
    const Tensor& first_moment(std::size_t k) const { return first_.at(k); }
    const Tensor& second_moment(std::size_t k) const { return second_.at(k); }

    /// Rebinds to another store with identical layout (used after a model copy).
    void rebind(ParamStore& store) { store_ = &store; }

private:
    static std::vector<std::size_t> all_indices(const ParamStore& store) {
        std::vector<std::size_t> idx(store.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return idx;
    }

    ParamStore* store_;
    std::vector<std::size_t> indices_;
    AdamConfig config_;
    std::vector<Tensor> first_;
    std::vector<Tensor> second_;
    std::uint64_t t_ = 0;
};

}  // namespace msense::nn
