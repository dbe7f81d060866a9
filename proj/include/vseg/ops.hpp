#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "tape.hpp"

namespace vseg {

namespace detail {

// Axis-wise broadcasting: operands share rank and each axis is either equal or 1.
// This covers the channel-vector, spatial-map and scalar cases used by the gates;
// rank promotion and non-unit stretching stay unsupported on purpose.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    if (a.rank != b.rank)
        throw std::invalid_argument("broadcast: rank mismatch " + a.str() + " vs " + b.str());
    Shape out;
    out.rank = a.rank;
    for (int i = 0; i < a.rank; ++i) {
        if (a[i] == b[i] || a[i] == 1 || b[i] == 1)
            out[i] = std::max(a[i], b[i]);
        else
            throw std::invalid_argument("broadcast: incompatible shapes " + a.str() + " vs " + b.str());
    }
    return out;
}

inline std::array<int64_t, Shape::kMaxRank> contiguous_strides(const Shape& s) {
    std::array<int64_t, Shape::kMaxRank> st{};
    int64_t acc = 1;
    for (int i = s.rank - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// Strides of `s` when iterated with the index space of `out` (0 on broadcast axes).
inline std::array<int64_t, Shape::kMaxRank> broadcast_strides(const Shape& s, const Shape& out) {
    auto st = contiguous_strides(s);
    for (int i = 0; i < out.rank; ++i)
        if (s[i] == 1 && out[i] != 1) st[i] = 0;
    return st;
}

template <typename T, typename FwdFn, typename BwdFn>
Var<T> binary_broadcast(Tape<T>& tape, Var<T> a, Var<T> b, FwdFn fwd, BwdFn bwd_pair) {
    const auto& av = tape.val(a);
    const auto& bv = tape.val(b);
    const bool same = av.shape == bv.shape;
    Shape os = same ? av.shape : broadcast_shape(av.shape, bv.shape);
    Tensor<T> out(os);
    if (same) {
        const T* pa = av.ptr();
        const T* pb = bv.ptr();
        T* po = out.ptr();
        const int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        auto sa = broadcast_strides(av.shape, os);
        auto sb = broadcast_strides(bv.shape, os);
        std::array<int64_t, Shape::kMaxRank> idx{};
        const int rank = os.rank;
        const int64_t n = os.numel();
        int64_t ia = 0, ib = 0;
        for (int64_t lin = 0; lin < n; ++lin) {
            out[lin] = fwd(av[ia], bv[ib]);
            for (int d = rank - 1; d >= 0; --d) {
                ia += sa[d];
                ib += sb[d];
                if (++idx[d] < os[d]) break;
                ia -= sa[d] * os[d];
                ib -= sb[d] * os[d];
                idx[d] = 0;
            }
        }
    }
    const bool na = tape.needs_grad(a), nb = tape.needs_grad(b);
    Var<T> o = tape.node(std::move(out), na || nb);
    if (tape.needs_grad(o))
        tape.record([a, b, o, na, nb, bwd_pair](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const auto& av = tp.val(a);
            const auto& bv = tp.val(b);
            const Shape& os = g.shape;
            auto sa = broadcast_strides(av.shape, os);
            auto sb = broadcast_strides(bv.shape, os);
            Tensor<T>* ga = na ? &tp.grad(a) : nullptr;
            Tensor<T>* gb = nb ? &tp.grad(b) : nullptr;
            std::array<int64_t, Shape::kMaxRank> idx{};
            const int rank = os.rank;
            const int64_t n = os.numel();
            int64_t ia = 0, ib = 0;
            for (int64_t lin = 0; lin < n; ++lin) {
                T da, db;
                bwd_pair(av[ia], bv[ib], g[lin], da, db);
                if (ga) (*ga)[ia] += da;
                if (gb) (*gb)[ib] += db;
                for (int d = rank - 1; d >= 0; --d) {
                    ia += sa[d];
                    ib += sb[d];
                    if (++idx[d] < os[d]) break;
                    ia -= sa[d] * os[d];
                    ib -= sb[d] * os[d];
                    idx[d] = 0;
                }
            }
        });
    return o;
}

}  // namespace detail

template <typename T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
    return detail::binary_broadcast(
        tape, a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Var<T> sub(Tape<T>& tape, Var<T> a, Var<T> b) {
    return detail::binary_broadcast(
        tape, a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Var<T> mul(Tape<T>& tape, Var<T> a, Var<T> b) {
    return detail::binary_broadcast(
        tape, a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Var<T> neg(Tape<T>& tape, Var<T> x) {
    const auto& xv = tape.val(x);
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = -xv[i];
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] -= g[i];
        });
    return o;
}

template <typename T>
Var<T> scale(Tape<T>& tape, Var<T> x, T c) {
    const auto& xv = tape.val(x);
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = c * xv[i];
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, c](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += c * g[i];
        });
    return o;
}

template <typename T>
Var<T> add_scalar(Tape<T>& tape, Var<T> x, T c) {
    const auto& xv = tape.val(x);
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] + c;
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        });
    return o;
}

template <typename T>
inline T sigmoid_value(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, Var<T> x) {
    const auto& xv = tape.val(x);
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = sigmoid_value(xv[i]);
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const auto& y = tp.val(o);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    return o;
}

template <typename T>
Var<T> relu(Tape<T>& tape, Var<T> x) {
    const auto& xv = tape.val(x);
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const auto& xv = tp.val(x);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (xv[i] > T(0)) gx[i] += g[i];
        });
    return o;
}

// Numerically stabilized softmax along one axis.
template <typename T>
Var<T> softmax_axis(Tape<T>& tape, Var<T> x, int axis) {
    const auto& xv = tape.val(x);
    if (axis < 0 || axis >= xv.shape.rank)
        throw std::invalid_argument("softmax_axis: axis " + std::to_string(axis) + " out of range for shape " +
                                    xv.shape.str());
    const int64_t len = xv.shape[axis];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < xv.shape.rank; ++i) inner *= xv.shape[i];
    for (int i = 0; i < axis; ++i) outer *= xv.shape[i];

    Tensor<T> out(xv.shape);
    const T* px = xv.ptr();
    T* po = out.ptr();
    for (int64_t a = 0; a < outer; ++a) {
        for (int64_t b = 0; b < inner; ++b) {
            const int64_t base = a * len * inner + b;
            T m = px[base];
            for (int64_t k = 1; k < len; ++k) m = std::max(m, px[base + k * inner]);
            double z = 0.0;
            for (int64_t k = 0; k < len; ++k) {
                const T e = std::exp(px[base + k * inner] - m);
                po[base + k * inner] = e;
                z += double(e);
            }
            const T inv = T(1.0 / z);
            for (int64_t k = 0; k < len; ++k) po[base + k * inner] *= inv;
        }
    }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, len, inner, outer](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const auto& y = tp.val(o);
            auto& gx = tp.grad(x);
            for (int64_t a = 0; a < outer; ++a)
                for (int64_t b = 0; b < inner; ++b) {
                    const int64_t base = a * len * inner + b;
                    double dot = 0.0;
                    for (int64_t k = 0; k < len; ++k) dot += double(g[base + k * inner]) * double(y[base + k * inner]);
                    for (int64_t k = 0; k < len; ++k) {
                        const int64_t i = base + k * inner;
                        gx[i] += y[i] * (g[i] - T(dot));
                    }
                }
        });
    return o;
}

// y = x W^T + b for x [N, Cin], W [Cout, Cin], b [Cout].
template <typename T>
Var<T> linear(Tape<T>& tape, Var<T> x, Var<T> weight, Var<T> bias) {
    const auto& xv = tape.val(x);
    const auto& wv = tape.val(weight);
    if (xv.shape.rank != 2 || wv.shape.rank != 2 || xv.shape[1] != wv.shape[1])
        throw std::invalid_argument("linear: dimension mismatch x " + xv.shape.str() + " W " + wv.shape.str());
    const int64_t n = xv.shape[0], cin = xv.shape[1], cout = wv.shape[0];
    const bool has_bias = bias.valid();
    if (has_bias && tape.val(bias).numel() != cout)
        throw std::invalid_argument("linear: bias length mismatch");

    Tensor<T> out(Shape{n, cout});
    const T* pb = has_bias ? tape.val(bias).ptr() : nullptr;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < cout; ++o) {
            double acc = pb ? double(pb[o]) : 0.0;
            for (int64_t k = 0; k < cin; ++k) acc += double(xv[i * cin + k]) * double(wv[o * cin + k]);
            out[i * cout + o] = T(acc);
        }
    bool needs = tape.needs_grad(x) || tape.needs_grad(weight) || (has_bias && tape.needs_grad(bias));
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([x, weight, bias, o, n, cin, cout, has_bias](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const auto& xv = tp.val(x);
            const auto& wv = tp.val(weight);
            if (tp.needs_grad(x)) {
                auto& gx = tp.grad(x);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t k = 0; k < cin; ++k) {
                        double acc = 0.0;
                        for (int64_t c = 0; c < cout; ++c) acc += double(g[i * cout + c]) * double(wv[c * cin + k]);
                        gx[i * cin + k] += T(acc);
                    }
            }
            if (tp.needs_grad(weight)) {
                auto& gw = tp.grad(weight);
                for (int64_t c = 0; c < cout; ++c)
                    for (int64_t k = 0; k < cin; ++k) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < n; ++i) acc += double(g[i * cout + c]) * double(xv[i * cin + k]);
                        gw[c * cin + k] += T(acc);
                    }
            }
            if (has_bias && tp.needs_grad(bias)) {
                auto& gb = tp.grad(bias);
                for (int64_t c = 0; c < cout; ++c) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < n; ++i) acc += double(g[i * cout + c]);
                    gb[c] += T(acc);
                }
            }
        });
    return o;
}

template <typename T>
Var<T> reduce_sum(Tape<T>& tape, Var<T> x) {
    const auto& xv = tape.val(x);
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) acc += double(xv[i]);
    Tensor<T> out(Shape{1});
    out[0] = T(acc);
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T g = tp.grad(o)[0];
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
        });
    return o;
}

template <typename T>
Var<T> reduce_mean(Tape<T>& tape, Var<T> x) {
    const int64_t n = tape.val(x).numel();
    return scale(tape, reduce_sum(tape, x), T(1) / T(n));
}

// Instance normalization over rank-5 tensors: each (sample, channel) slab is
// standardized, then scaled and shifted per channel. Keeps the multiplicative
// decoder paths at unit scale regardless of depth.
template <typename T>
Var<T> instance_norm3d(Tape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
    const auto& xv = tape.val(x);
    if (xv.shape.rank != 5) throw std::invalid_argument("instance_norm3d: rank-5 input expected");
    const int64_t N = xv.shape[0], C = xv.shape[1];
    const int64_t spatial = xv.shape[2] * xv.shape[3] * xv.shape[4];
    if (tape.val(gamma).numel() != C || tape.val(beta).numel() != C)
        throw std::invalid_argument("instance_norm3d: gamma/beta must have C elements");

    Tensor<T> out(xv.shape);
    auto stats = std::make_shared<std::vector<double>>(size_t(N * C * 2));  // mean, inv_std per slab
    const T* pg = tape.val(gamma).ptr();
    const T* pb = tape.val(beta).ptr();
    for (int64_t s = 0; s < N * C; ++s) {
        const T* xc = xv.ptr() + s * spatial;
        double mean = 0.0;
        for (int64_t i = 0; i < spatial; ++i) mean += double(xc[i]);
        mean /= double(spatial);
        double var = 0.0;
        for (int64_t i = 0; i < spatial; ++i) {
            const double d = double(xc[i]) - mean;
            var += d * d;
        }
        var /= double(spatial);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[size_t(s * 2)] = mean;
        (*stats)[size_t(s * 2 + 1)] = inv;
        const double g = double(pg[s % C]), b = double(pb[s % C]);
        T* yc = out.ptr() + s * spatial;
        for (int64_t i = 0; i < spatial; ++i) yc[i] = T((double(xc[i]) - mean) * inv * g + b);
    }
    bool needs = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([x, gamma, beta, o, stats, N, C, spatial](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const auto& xv = tp.val(x);
            const T* pg = tp.val(gamma).ptr();
            const bool nx = tp.needs_grad(x), ng = tp.needs_grad(gamma), nb = tp.needs_grad(beta);
            Tensor<T>* gx = nx ? &tp.grad(x) : nullptr;
            Tensor<T>* ggam = ng ? &tp.grad(gamma) : nullptr;
            Tensor<T>* gbet = nb ? &tp.grad(beta) : nullptr;
            for (int64_t s = 0; s < N * C; ++s) {
                const double mean = (*stats)[size_t(s * 2)], inv = (*stats)[size_t(s * 2 + 1)];
                const double gam = double(pg[s % C]);
                const T* xc = xv.ptr() + s * spatial;
                const T* gc = g.ptr() + s * spatial;
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t i = 0; i < spatial; ++i) {
                    const double xh = (double(xc[i]) - mean) * inv;
                    sum_g += double(gc[i]);
                    sum_gx += double(gc[i]) * xh;
                }
                if (ng) (*ggam)[s % C] += T(sum_gx);
                if (nb) (*gbet)[s % C] += T(sum_g);
                if (nx) {
                    const double mg = sum_g / double(spatial), mgx = sum_gx / double(spatial);
                    T* gxc = gx->ptr() + s * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        const double xh = (double(xc[i]) - mean) * inv;
                        gxc[i] += T(gam * inv * (double(gc[i]) - mg - xh * mgx));
                    }
                }
            }
        });
    return o;
}

// Metadata-only reshape (same element count, copied buffer).
template <typename T>
Var<T> reshape(Tape<T>& tape, Var<T> x, Shape s) {
    const auto& xv = tape.val(x);
    if (s.numel() != xv.numel())
        throw std::invalid_argument("reshape: numel mismatch " + xv.shape.str() + " -> " + s.str());
    Tensor<T> out(s, xv.data);
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        });
    return o;
}

// Concatenate two rank-5 tensors along the channel axis.
template <typename T>
Var<T> concat_channels(Tape<T>& tape, Var<T> a, Var<T> b) {
    const auto& av = tape.val(a);
    const auto& bv = tape.val(b);
    if (av.shape.rank != 5 || bv.shape.rank != 5)
        throw std::invalid_argument("concat_channels: rank-5 tensors expected");
    for (int i : {0, 2, 3, 4})
        if (av.shape[i] != bv.shape[i])
            throw std::invalid_argument("concat_channels: shape mismatch " + av.shape.str() + " vs " + bv.shape.str());
    const int64_t n = av.shape[0], ca = av.shape[1], cb = bv.shape[1];
    const int64_t spatial = av.shape[2] * av.shape[3] * av.shape[4];
    Tensor<T> out(Shape{n, ca + cb, av.shape[2], av.shape[3], av.shape[4]});
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(out.ptr() + i * (ca + cb) * spatial, av.ptr() + i * ca * spatial, size_t(ca * spatial) * sizeof(T));
        std::memcpy(out.ptr() + (i * (ca + cb) + ca) * spatial, bv.ptr() + i * cb * spatial,
                    size_t(cb * spatial) * sizeof(T));
    }
    const bool na = tape.needs_grad(a), nb = tape.needs_grad(b);
    Var<T> o = tape.node(std::move(out), na || nb);
    if (tape.needs_grad(o))
        tape.record([a, b, o, n, ca, cb, spatial, na, nb](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            if (na) {
                auto& ga = tp.grad(a);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < ca * spatial; ++j) ga[i * ca * spatial + j] += g[i * (ca + cb) * spatial + j];
            }
            if (nb) {
                auto& gb = tp.grad(b);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < cb * spatial; ++j)
                        gb[i * cb * spatial + j] += g[(i * (ca + cb) + ca) * spatial + j];
            }
        });
    return o;
}

// Scalar combination sum_i w_i * x_i of scalar nodes.
template <typename T>
Var<T> weighted_sum_scalars(Tape<T>& tape, const std::vector<Var<T>>& xs, const std::vector<T>& weights) {
    if (xs.size() != weights.size()) throw std::invalid_argument("weighted_sum_scalars: size mismatch");
    double acc = 0.0;
    bool needs = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        acc += double(weights[i]) * double(tape.scalar(xs[i]));
        needs = needs || tape.needs_grad(xs[i]);
    }
    Tensor<T> out(Shape{1});
    out[0] = T(acc);
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([xs, weights, o](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T g = tp.grad(o)[0];
            for (size_t i = 0; i < xs.size(); ++i)
                if (tp.needs_grad(xs[i])) tp.grad(xs[i])[0] += g * weights[i];
        });
    return o;
}

}  // namespace vseg
