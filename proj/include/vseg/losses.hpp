#pragma once

#include "ops.hpp"

namespace vseg {

// Integer label volume [N, D, H, W], values in [0, num_classes).
struct LabelVolume {
    int64_t n = 0, d = 0, h = 0, w = 0;
    int num_classes = 0;
    std::vector<uint16_t> values;

    LabelVolume() = default;
    LabelVolume(int64_t n_, int64_t d_, int64_t h_, int64_t w_, int classes)
        : n(n_), d(d_), h(h_), w(w_), num_classes(classes), values(size_t(n_ * d_ * h_ * w_), 0) {}

    int64_t numel() const { return n * d * h * w; }
    int64_t voxels_per_sample() const { return d * h * w; }
    uint16_t& at(int64_t in, int64_t id, int64_t ih, int64_t iw) {
        return values[size_t(((in * d + id) * h + ih) * w + iw)];
    }
    uint16_t at(int64_t in, int64_t id, int64_t ih, int64_t iw) const {
        return values[size_t(((in * d + id) * h + ih) * w + iw)];
    }
};

// Strided nearest-neighbor subsampling: out[k] = in[factor*k], reduced extent
// ceil(e/factor). Deterministic, constant-preserving.
inline LabelVolume downsample_labels(const LabelVolume& in, int factor) {
    if (factor == 1) return in;
    LabelVolume out(in.n, ceil_div(in.d, factor), ceil_div(in.h, factor), ceil_div(in.w, factor), in.num_classes);
    for (int64_t b = 0; b < in.n; ++b)
        for (int64_t d = 0; d < out.d; ++d)
            for (int64_t h = 0; h < out.h; ++h)
                for (int64_t w = 0; w < out.w; ++w)
                    out.at(b, d, h, w) = in.at(b, d * factor, h * factor, w * factor);
    return out;
}

// w_i = (1/2^{i-1}) / sum_{m=0}^{L} (1/2^m) for L supervision levels. The
// denominator has one more term than there are levels, so at the standard
// five levels the weights total 62/63, not 1.
inline std::vector<double> generalized_supervision_weights(int levels) {
    double denom = 0.0;
    for (int m = 0; m <= levels; ++m) denom += std::pow(0.5, m);
    std::vector<double> w(static_cast<size_t>(levels));
    for (int i = 1; i <= levels; ++i) w[size_t(i - 1)] = std::pow(0.5, i - 1) / denom;
    return w;
}

inline std::vector<double> deep_supervision_weights() { return generalized_supervision_weights(5); }

namespace detail {
template <typename T>
void check_probs_labels(const Tensor<T>& s, const LabelVolume& g) {
    if (s.shape.rank != 5)
        throw std::invalid_argument("loss: probabilities must be rank 5, got " + s.shape.str());
    if (s.shape[0] != g.n || s.shape[2] != g.d || s.shape[3] != g.h || s.shape[4] != g.w)
        throw std::invalid_argument("loss: probs " + s.shape.str() + " do not match labels [" + std::to_string(g.n) +
                                    "," + std::to_string(g.d) + "," + std::to_string(g.h) + "," + std::to_string(g.w) +
                                    "]");
    if (s.shape[1] != g.num_classes) throw std::invalid_argument("loss: class count mismatch");
    if (g.numel() == 0) throw std::invalid_argument("loss: empty volume");
}
}  // namespace detail

// Soft dice loss over all classes (background included):
//   L = 1 - 2*sum(g*s) / (sum(g) + sum(s)),
// with s the class probabilities and g the one-hot labels. Sums run over the
// whole batch.
template <typename T>
Var<T> dice_loss(Tape<T>& tape, Var<T> probs, const LabelVolume& labels) {
    const auto& sv = tape.val(probs);
    detail::check_probs_labels(sv, labels);
    const int64_t N = sv.shape[0], C = sv.shape[1], vox = labels.voxels_per_sample();

    double inter = 0.0, ssum = 0.0;
    for (int64_t i = 0; i < sv.numel(); ++i) ssum += double(sv[i]);
    for (int64_t b = 0; b < N; ++b)
        for (int64_t v = 0; v < vox; ++v) {
            const int64_t cls = labels.values[size_t(b * vox + v)];
            inter += double(sv[(b * C + cls) * vox + v]);
        }
    const double gsum = double(labels.numel());  // one-hot sums to 1 per voxel
    const double denom = gsum + ssum;
    Tensor<T> out(Shape{1});
    out[0] = T(1.0 - 2.0 * inter / denom);
    Var<T> o = tape.node(std::move(out), tape.needs_grad(probs));
    if (tape.needs_grad(o))
        tape.record([probs, o, labels, inter, denom, N, C, vox](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const double g = double(tp.grad(o)[0]);
            auto& gs = tp.grad(probs);
            const double d2 = denom * denom;
            // d/ds_i of (1 - 2*inter/denom): -2*(g_i*denom - inter)/denom^2
            for (int64_t b = 0; b < N; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t v = 0; v < vox; ++v) {
                        const bool hit = labels.values[size_t(b * vox + v)] == c;
                        const double gi = hit ? 1.0 : 0.0;
                        gs[(b * C + c) * vox + v] += T(g * (-2.0) * (gi * denom - inter) / d2);
                    }
        });
    return o;
}

// Cross-entropy over class probabilities, -(1/N) sum_i log s_i(true class),
// with the log clamped at 1e-12. N counts voxels across the batch.
template <typename T>
Var<T> cross_entropy_loss(Tape<T>& tape, Var<T> probs, const LabelVolume& labels) {
    const auto& sv = tape.val(probs);
    detail::check_probs_labels(sv, labels);
    const int64_t N = sv.shape[0], C = sv.shape[1], vox = labels.voxels_per_sample();
    const double clamp = 1e-12;
    const double inv_n = 1.0 / double(N * vox);

    double acc = 0.0;
    for (int64_t b = 0; b < N; ++b)
        for (int64_t v = 0; v < vox; ++v) {
            const int64_t cls = labels.values[size_t(b * vox + v)];
            acc += std::log(std::max(double(sv[(b * C + cls) * vox + v]), clamp));
        }
    Tensor<T> out(Shape{1});
    out[0] = T(-inv_n * acc);
    Var<T> o = tape.node(std::move(out), tape.needs_grad(probs));
    if (tape.needs_grad(o))
        tape.record([probs, o, labels, inv_n, clamp, N, C, vox](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const double g = double(tp.grad(o)[0]);
            const auto& sv = tp.val(probs);
            auto& gs = tp.grad(probs);
            for (int64_t b = 0; b < N; ++b)
                for (int64_t v = 0; v < vox; ++v) {
                    const int64_t cls = labels.values[size_t(b * vox + v)];
                    const int64_t i = (b * C + cls) * vox + v;
                    const double s = double(sv[i]);
                    if (s > clamp) gs[i] += T(-g * inv_n / s);
                }
        });
    return o;
}

// Multi-scale logits with matching downsampled labels and the fixed weight
// series. Level 1 is the topmost (full-resolution) decoder output.
template <typename T>
struct SupervisionPyramid {
    std::vector<Var<T>> logits;
    std::vector<LabelVolume> labels;
    std::vector<double> weights;
};

template <typename T>
SupervisionPyramid<T> make_pyramid(const std::vector<Var<T>>& logits, const LabelVolume& full_labels) {
    SupervisionPyramid<T> p;
    p.logits = logits;
    p.weights = generalized_supervision_weights(int(logits.size()));
    for (size_t i = 0; i < logits.size(); ++i) p.labels.push_back(downsample_labels(full_labels, 1 << i));
    return p;
}

// L_total = sum_i w_i (L_dice,i + L_CE,i).
template <typename T>
Var<T> total_loss(Tape<T>& tape, const SupervisionPyramid<T>& pyramid) {
    if (pyramid.logits.size() != pyramid.labels.size() || pyramid.logits.size() != pyramid.weights.size())
        throw std::invalid_argument("total_loss: level count mismatch (" + std::to_string(pyramid.logits.size()) +
                                    " logits, " + std::to_string(pyramid.labels.size()) + " labels, " +
                                    std::to_string(pyramid.weights.size()) + " weights)");
    std::vector<Var<T>> terms;
    std::vector<T> ws;
    for (size_t i = 0; i < pyramid.logits.size(); ++i) {
        Var<T> probs = softmax_axis(tape, pyramid.logits[i], 1);
        terms.push_back(dice_loss(tape, probs, pyramid.labels[i]));
        terms.push_back(cross_entropy_loss(tape, probs, pyramid.labels[i]));
        ws.push_back(T(pyramid.weights[i]));
        ws.push_back(T(pyramid.weights[i]));
    }
    return weighted_sum_scalars(tape, terms, ws);
}

}  // namespace vseg
