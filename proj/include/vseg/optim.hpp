#pragma once

#include "core.hpp"

namespace vseg {

// Cosine-annealing schedule with linear warm-up:
//   l = l_initial * E_cur/E_warmup                        for E_cur < E_warmup
//   l = l_initial * (1 + cos(pi*(E_cur-E_warmup)/(E_max-E_warmup))) / 2
struct ScheduleState {
    int64_t e_cur = 0;
    int64_t e_warmup = 50;
    int64_t e_max = 1000;
    double l_initial = 3e-4;

    void validate() const {
        if (e_cur < 0 || e_cur > e_max || e_warmup >= e_max)
            throw std::invalid_argument("ScheduleState: need 0 <= e_cur <= e_max and e_warmup < e_max");
    }
};

inline double lr_at(const ScheduleState& s) {
    s.validate();
    if (s.e_cur < s.e_warmup) return s.l_initial * double(s.e_cur) / double(s.e_warmup);
    const double t = double(s.e_cur - s.e_warmup) / double(s.e_max - s.e_warmup);
    return s.l_initial * (1.0 + std::cos(3.141592653589793238462643383279502884 * t)) / 2.0;
}

// AdamW with decoupled weight decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
template <typename T>
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void ensure_state(const std::vector<std::pair<std::string, Parameter<T>*>>& params) {
        if (!m_.empty()) return;
        for (const auto& [name, p] : params) {
            m_.emplace_back(p->value.shape, T(0));
            v_.emplace_back(p->value.shape, T(0));
        }
    }

    void step(const std::vector<std::pair<std::string, Parameter<T>*>>& params, double lr, double weight_decay) {
        ensure_state(params);
        if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter set changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, double(t_));
        const double bc2 = 1.0 - std::pow(beta2, double(t_));
        for (size_t k = 0; k < params.size(); ++k) {
            Parameter<T>& p = *params[k].second;
            auto& m = m_[k];
            auto& v = v_[k];
            for (int64_t i = 0; i < p.numel(); ++i) {
                const double g = double(p.grad[i]);
                if (!std::isfinite(g))
                    throw std::runtime_error("AdamW: non-finite gradient in parameter '" + params[k].first + "'");
                const double mi = beta1 * double(m[i]) + (1.0 - beta1) * g;
                const double vi = beta2 * double(v[i]) + (1.0 - beta2) * g * g;
                m[i] = T(mi);
                v[i] = T(vi);
                const double m_hat = mi / bc1;
                const double v_hat = vi / bc2;
                p.value[i] = T(double(p.value[i]) -
                               lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * double(p.value[i])));
            }
        }
    }

    int64_t step_count() const { return t_; }
    std::vector<Tensor<T>>& moment1() { return m_; }
    std::vector<Tensor<T>>& moment2() { return v_; }
    void restore(int64_t t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace vseg
