#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "core.hpp"

namespace vseg {

template <typename T>
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Operations execute eagerly during recording; each op that
// can propagate gradients pushes one backward rule. backward() visits the rules
// in exact reverse recording order, then flushes leaf gradients into the bound
// Parameters. A tape is single-owner: no sharing during recording or backward.
template <typename T>
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var<T> input(Tensor<T> value, bool requires_grad = false) {
        return make_node(std::move(value), requires_grad && grad_enabled_);
    }

    Var<T> constant(Tensor<T> value) { return make_node(std::move(value), false); }

    Var<T> param(Parameter<T>& p) {
        Var<T> v = make_node(p.value, grad_enabled_);
        if (grad_enabled_) hooks_.push_back({v.id, &p});
        return v;
    }

    const Tensor<T>& val(Var<T> v) const { return values_[size_t(v.id)]; }
    const Shape& shape(Var<T> v) const { return values_[size_t(v.id)].shape; }
    bool needs_grad(Var<T> v) const { return needs_[size_t(v.id)] != 0; }

    // Gradient buffer, allocated as zeros on first touch.
    Tensor<T>& grad(Var<T> v) {
        auto& g = grads_[size_t(v.id)];
        if (g.empty() && values_[size_t(v.id)].numel() > 0) g = Tensor<T>(values_[size_t(v.id)].shape, T(0));
        return g;
    }
    bool has_grad(Var<T> v) const { return !grads_[size_t(v.id)].empty(); }

    // Create an op output node. `needs` should be the OR of the inputs' needs_grad.
    Var<T> node(Tensor<T> value, bool needs) { return make_node(std::move(value), needs && grad_enabled_); }

    void record(std::function<void(Tape<T>&)> fn) {
        if (grad_enabled_) rules_.push_back(std::move(fn));
    }

    T scalar(Var<T> v) const {
        const auto& t = val(v);
        if (t.numel() != 1) throw std::invalid_argument("scalar: node is not scalar, shape " + t.shape.str());
        return t.data[0];
    }

    void backward(Var<T> loss) {
        if (!grad_enabled_) throw std::logic_error("backward: tape recorded with gradients disabled");
        if (backward_done_) throw std::logic_error("backward: tape already differentiated; re-record first");
        if (val(loss).numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + val(loss).shape.str());
        backward_done_ = true;
        grad(loss).fill(T(1));
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)(*this);
        for (const auto& h : hooks_) {
            const auto& g = grads_[size_t(h.node)];
            if (g.empty()) continue;
            auto& pg = h.param->grad;
            for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
        }
    }

    bool backward_done() const { return backward_done_; }
    size_t num_nodes() const { return values_.size(); }

private:
    Var<T> make_node(Tensor<T> value, bool needs) {
        values_.push_back(std::move(value));
        grads_.emplace_back();
        needs_.push_back(needs ? 1 : 0);
        return Var<T>{int32_t(values_.size() - 1)};
    }

    struct Hook {
        int32_t node;
        Parameter<T>* param;
    };

    std::vector<Tensor<T>> values_;
    std::vector<Tensor<T>> grads_;
    std::vector<uint8_t> needs_;
    std::vector<std::function<void(Tape<T>&)>> rules_;
    std::vector<Hook> hooks_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

}  // namespace vseg
