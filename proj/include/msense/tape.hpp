#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msense/error.hpp"
#include "msense/tensor.hpp"

namespace msense::nn {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
};

/// Named trainable tensors with paired gradients. Indices are stable, so
/// layers refer to parameters by index and a store can be copied freely.
class ParamStore {
public:
    std::size_t add(std::string name, Tensor init) {
        if (index_.contains(name)) throw ParameterError("duplicate parameter name '" + name + "'");
        index_.emplace(name, params_.size());
        Tensor grad(init.shape());
        params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad), false});
        return params_.size() - 1;
    }

    Parameter& operator[](std::size_t i) { return params_.at(i); }
    const Parameter& operator[](std::size_t i) const { return params_.at(i); }

    std::size_t index_of(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ParameterError("unknown parameter '" + std::string(name) + "'");
        return it->second;
    }
    bool contains(std::string_view name) const { return index_.contains(std::string(name)); }
    Parameter& get(std::string_view name) { return params_[index_of(name)]; }
    const Parameter& get(std::string_view name) const { return params_[index_of(name)]; }

    std::size_t size() const { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.grad.fill(0.0);
            p.has_grad = false;
        }
    }

    bool operator==(const ParamStore& other) const {
        if (params_.size() != other.params_.size()) return false;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name != other.params_[i].name || params_[i].value != other.params_[i].value) {
                return false;
            }
        }
        return true;
    }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Define-by-run reverse-mode tape. Build one per batch, call backward once.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        std::function<void(Tape&, std::size_t)> backprop;
    };

    explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_grad_; }

    Var constant(Tensor value) {
        check_live();
        nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
        return {this, nodes_.size() - 1};
    }

    Var param(Parameter& p) {
        check_live();
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
        nodes_.push_back(Node{p.value, {}, record_grad_, &p, {}});
        param_nodes_.emplace(&p, nodes_.size() - 1);
        return {this, nodes_.size() - 1};
    }

    /// Records the result of an op. `backprop(tape, id)` reads grad(id) and
    /// accumulates into its inputs via accumulate().
    Var record(Tensor value, std::initializer_list<Var> inputs,
               std::function<void(Tape&, std::size_t)> backprop) {
        check_live();
        bool needs = false;
        if (record_grad_) {
            for (const auto& in : inputs) {
                if (in.tape != this) throw TapeError("op mixes variables from different tapes");
                needs = needs || nodes_[in.id].requires_grad;
            }
        }
        nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backprop) : nullptr});
        return {this, nodes_.size() - 1};
    }

    Var record(Tensor value, const std::vector<Var>& inputs,
               std::function<void(Tape&, std::size_t)> backprop) {
        check_live();
        bool needs = false;
        if (record_grad_) {
            for (const auto& in : inputs) {
                if (in.tape != this) throw TapeError("op mixes variables from different tapes");
                needs = needs || nodes_[in.id].requires_grad;
            }
        }
        nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backprop) : nullptr});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const {
        check_live();
        return nodes_.at(id).value;
    }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Gradient buffer of a node; allocated on first access during backward.
    Tensor& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    /// Returns a writable gradient buffer for an input, or nullptr when the
    /// input does not take part in differentiation.
    Tensor* accumulate(Var v) {
        if (!nodes_[v.id].requires_grad) return nullptr;
        return &grad(v.id);
    }

    /// Propagates d(loss)/d(node) for every recorded node and stores the
    /// results into the parameters' gradient buffers. The tape is consumed.
    void backward(Var loss) {
        if (consumed_) throw TapeError("backward called twice on the same tape; re-run the forward pass");
        if (!record_grad_) throw TapeError("backward on a tape built without gradient recording");
        if (loss.tape != this || loss.id >= nodes_.size()) throw TapeError("backward before forward: loss is not on this tape");
        if (nodes_[loss.id].value.size() != 1) throw TapeError("backward requires a scalar loss");
        if (!nodes_[loss.id].requires_grad) throw TapeError("loss does not depend on any parameter");

        grad(loss.id)[0] = 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backprop) n.backprop(*this, id);
        }
        for (auto& n : nodes_) {
            if (n.param == nullptr) continue;
            if (n.grad.empty()) {
                n.param->grad = Tensor(n.param->value.shape());
            } else {
                n.param->grad = std::move(n.grad);
            }
            n.param->has_grad = true;
        }
        nodes_.clear();
        param_nodes_.clear();
        consumed_ = true;
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    void check_live() const {
        if (consumed_) throw TapeError("tape already consumed by backward");
    }

    bool record_grad_;
    bool consumed_ = false;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const {
    if (tape == nullptr) throw TapeError("unbound variable");
    return tape->value(id);
}

}  // namespace msense::nn
