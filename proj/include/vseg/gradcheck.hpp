#pragma once

#include <cstdio>
#include <functional>
#include <limits>
#include <unordered_set>

#include "core.hpp"

namespace vseg {

template <typename T>
struct GradCheckGroup {
    std::string name;
    T max_rel = T(0);
    int64_t checked = 0;
};

template <typename T>
struct GradCheckReport {
    std::vector<GradCheckGroup<T>> groups;

    T max_rel() const {
        T m = T(0);
        for (const auto& g : groups) m = std::max(m, g.max_rel);
        return m;
    }
    bool pass(T tol) const { return max_rel() < tol; }

    void print(FILE* out = stdout, double tol = 1e-4) const {
        for (const auto& g : groups)
            std::fprintf(out, "%-6s %-28s max_rel %.3e (%lld elems)\n", double(g.max_rel) < tol ? "PASS" : "FAIL",
                         g.name.c_str(), double(g.max_rel), (long long)g.checked);
    }
};

struct FdOptions {
    double eps = 1e-4;  // base step; scaled per element, see eps_scale below
    int64_t samples_per_group = 0;  // 0 = every element
    uint64_t seed = 0x5eedf00d;
    // Uniform step scale: the actual step is eps * step_scale. 1e-5 steps sit
    // in the measured sweet spot between round-off (|loss|*ulp/eps) and the
    // ReLU/floor kinks of deep composites.
    double step_scale = 0.1;
    // Pick the largest-|gradient| elements instead of a uniform sample.
    // Central differences on f64 cannot resolve components much smaller than
    // |loss|*ulp/eps, so deep-composite checks verify the dominant directions.
    bool pick_largest = false;
};

// Central-difference gradient verification. `forward` evaluates the loss from
// the parameters' current values without touching gradients; `accumulate_grads`
// zeroes the checked gradients, then runs one forward+backward pass.
// Non-determinism is detected by comparing two plain forward evaluations.
template <typename T>
GradCheckReport<T> finite_difference_check(const std::function<T()>& forward,
                                           const std::function<void()>& accumulate_grads,
                                           const std::vector<std::pair<std::string, Parameter<T>*>>& groups,
                                           FdOptions opt = {}) {
    const T l1 = forward();
    const T l2 = forward();
    if (!(l1 == l2))
        throw std::runtime_error("finite_difference_check: non-deterministic loss (" + std::to_string(double(l1)) +
                                 " vs " + std::to_string(double(l2)) + ")");

    accumulate_grads();

    GradCheckReport<T> report;
    Rng rng(opt.seed);
    for (const auto& [name, param] : groups) {
        GradCheckGroup<T> g;
        g.name = name;
        const int64_t n = param->numel();
        std::vector<int64_t> indices;
        if (opt.samples_per_group <= 0 || opt.samples_per_group >= n) {
            indices.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) indices[size_t(i)] = i;
        } else if (opt.pick_largest) {
            indices.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) indices[size_t(i)] = i;
            std::partial_sort(indices.begin(), indices.begin() + opt.samples_per_group, indices.end(),
                              [&](int64_t a, int64_t b) { return std::abs(param->grad[a]) > std::abs(param->grad[b]); });
            indices.resize(size_t(opt.samples_per_group));
        } else {
            std::unordered_set<int64_t> seen;
            while ((int64_t)seen.size() < opt.samples_per_group) seen.insert(rng.uniform_int(0, n - 1));
            indices.assign(seen.begin(), seen.end());
        }
        for (int64_t i : indices) {
            const T saved = param->value[i];
            // Evaluate at two step sizes. Smooth curvature shrinks the
            // left/right slope asymmetry ~10x with the step; a ReLU/floor kink
            // inside the larger ball keeps it high, in which case the small
            // step (which the kink has left) is the valid estimate.
            T est[2], asym[2];
            int k = 0;
            for (const T eps : {T(opt.eps) * T(opt.step_scale), T(opt.eps) * T(opt.step_scale) / T(10)}) {
                param->value[i] = saved + eps;
                const T lp = forward();
                param->value[i] = saved - eps;
                const T lm = forward();
                param->value[i] = saved;
                const T left = (l1 - lm) / eps, right = (lp - l1) / eps;
                asym[k] = std::abs(left - right) / std::max({std::abs(left), std::abs(right), T(1e-8)});
                est[k] = (lp - lm) / (T(2) * eps);
                ++k;
            }
            const T numeric = asym[0] > T(20) * std::max(asym[1], T(1e-9)) ? est[1] : est[0];
            const T analytic = param->grad[i];
            const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
            g.max_rel = std::max(g.max_rel, std::abs(analytic - numeric) / denom);
            ++g.checked;
        }
        report.groups.push_back(std::move(g));
    }
    return report;
}

}  // namespace vseg
