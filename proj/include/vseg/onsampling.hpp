#pragma once

#include <memory>

#include "conv.hpp"
#include "resample.hpp"

namespace vseg {

// Offset coordinate neighborhood weighted upsampling. Two learnable branches:
// offsets perturb the sub-pixel sampling grid, a softmax-normalized weight map
// blends the n^3 lattice corners around each final coordinate. Weights are
// shared across channels, so each output channel depends only on its own
// input channel.
struct OnsamplingConfig {
    int scale = 2;         // s, integer upsampling factor
    int neighborhood = 2;  // n per axis, n^3 neighbors; must be even
    int c_in = 0;
    int c_mid = 0;  // 0 -> max(c_in/4, 8)

    int s3() const { return scale * scale * scale; }
    int n3() const { return neighborhood * neighborhood * neighborhood; }
    int offset_channels() const { return 3 * s3(); }
    int weight_channels() const { return s3() * n3(); }
    int resolved_c_mid() const { return c_mid > 0 ? c_mid : std::max(c_in / 4, 8); }

    void validate() const {
        if (scale < 1) throw std::invalid_argument("OnsamplingConfig: scale must be >= 1");
        if (neighborhood < 1 || neighborhood % 2 != 0)
            throw std::invalid_argument("OnsamplingConfig: neighborhood must be positive and even");
        if (c_in < 1) throw std::invalid_argument("OnsamplingConfig: c_in must be set");
    }
};

enum class GridRole { base, offset, final_coords };

template <typename T>
struct CoordinateGrid {
    Var<T> coords;  // [N, 3, sD, sH, sW] in input-grid units, components (d,h,w)
    GridRole role = GridRole::base;
};

// G[k] = (k+0.5)/s - 0.5 per axis: sub-pixels sit at the midpoints of the
// cells the upsampled grid carves out of the input grid.
template <typename T>
Tensor<T> base_grid_tensor(int s, int64_t N, int64_t oD, int64_t oH, int64_t oW) {
    Tensor<T> g(Shape{N, 3, oD, oH, oW});
    const int64_t os = oD * oH * oW;
    auto coord = [&](int64_t k) { return (double(k) + 0.5) / double(s) - 0.5; };
    for (int64_t n = 0; n < N; ++n) {
        T* gd = g.ptr() + (n * 3 + 0) * os;
        T* gh = g.ptr() + (n * 3 + 1) * os;
        T* gw = g.ptr() + (n * 3 + 2) * os;
        int64_t i = 0;
        for (int64_t d = 0; d < oD; ++d)
            for (int64_t h = 0; h < oH; ++h)
                for (int64_t w = 0; w < oW; ++w, ++i) {
                    gd[i] = T(coord(d));
                    gh[i] = T(coord(h));
                    gw[i] = T(coord(w));
                }
    }
    return g;
}

template <typename T>
CoordinateGrid<T> base_grid(Tape<T>& tape, int s, int64_t N, int64_t oD, int64_t oH, int64_t oW) {
    return {tape.constant(base_grid_tensor<T>(s, N, oD, oH, oW)), GridRole::base};
}

template <typename T>
struct OnsamplingParams {
    Parameter<T> offset1_w, offset1_b;    // 3x3x3 conv, c_in -> 3*s^3
    Parameter<T> offset2_w, offset2_b;    // 3x3x3 conv, c_in -> 3*s^3
    Parameter<T> compress_w, compress_b;  // 1x1x1 conv, c_in -> c_mid
    Parameter<T> encode_w, encode_b;      // 3x3x3 conv, c_mid -> s^3*n^3

    static OnsamplingParams init(const OnsamplingConfig& cfg, Rng& rng, const std::string& prefix,
                                 bool zero_init = true) {
        cfg.validate();
        OnsamplingParams p;
        const int cm = cfg.resolved_c_mid();
        auto he = [&](Shape s, int fan_in) { return random_normal<T>(s, rng, std::sqrt(2.0 / double(fan_in))); };
        auto zeros = [](Shape s) { return Tensor<T>(s, T(0)); };
        const Shape off_w{cfg.offset_channels(), cfg.c_in, 3, 3, 3};
        const Shape enc_w{cfg.weight_channels(), cm, 3, 3, 3};
        p.offset1_w = Parameter<T>(prefix + ".offset1.weight",
                                   zero_init ? zeros(off_w) : he(off_w, cfg.c_in * 27));
        p.offset1_b = Parameter<T>(prefix + ".offset1.bias", zeros(Shape{cfg.offset_channels()}));
        p.offset2_w = Parameter<T>(prefix + ".offset2.weight",
                                   zero_init ? zeros(off_w) : he(off_w, cfg.c_in * 27));
        p.offset2_b = Parameter<T>(prefix + ".offset2.bias", zeros(Shape{cfg.offset_channels()}));
        p.compress_w = Parameter<T>(prefix + ".compress.weight", he(Shape{cm, cfg.c_in, 1, 1, 1}, cfg.c_in));
        p.compress_b = Parameter<T>(prefix + ".compress.bias", zeros(Shape{cm}));
        p.encode_w = Parameter<T>(prefix + ".encode.weight",
                                  zero_init ? zeros(enc_w) : he(enc_w, cm * 27));
        p.encode_b = Parameter<T>(prefix + ".encode.bias", zeros(Shape{cfg.weight_channels()}));
        return p;
    }

    std::vector<Parameter<T>*> all() {
        return {&offset1_w, &offset1_b, &offset2_w, &offset2_b, &compress_w, &compress_b, &encode_w, &encode_b};
    }
};

// O = 0.5 * sigmoid(conv1(x)) * conv2(x), pixel-shuffled to [N,3,sD,sH,sW].
// Offsets are in input-grid voxel units.
template <typename T>
CoordinateGrid<T> offset_branch(Tape<T>& tape, Var<T> x, const OnsamplingConfig& cfg, OnsamplingParams<T>& p) {
    const auto spec = Conv3dSpec::cubic(cfg.c_in, cfg.offset_channels(), 3, 1, 1);
    Var<T> c1 = conv3d(tape, x, tape.param(p.offset1_w), tape.param(p.offset1_b), spec);
    Var<T> c2 = conv3d(tape, x, tape.param(p.offset2_w), tape.param(p.offset2_b), spec);
    Var<T> o = mul(tape, scale(tape, sigmoid(tape, c1), T(0.5)), c2);
    return {pixel_shuffle3d(tape, o, cfg.scale), GridRole::offset};
}

// 1x1x1 channel compression, 3x3x3 encoding to s^3*n^3 channels, pixel shuffle
// of the s^3 factor, then softmax over the n^3 axis.
template <typename T>
Var<T> weight_branch(Tape<T>& tape, Var<T> x, const OnsamplingConfig& cfg, OnsamplingParams<T>& p) {
    const int cm = cfg.resolved_c_mid();
    Var<T> mid = conv3d(tape, x, tape.param(p.compress_w), tape.param(p.compress_b),
                        Conv3dSpec::cubic(cfg.c_in, cm, 1, 1, 0));
    Var<T> enc = conv3d(tape, mid, tape.param(p.encode_w), tape.param(p.encode_b),
                        Conv3dSpec::cubic(cm, cfg.weight_channels(), 3, 1, 1));
    Var<T> shuffled = pixel_shuffle3d(tape, enc, cfg.scale);  // [N, n^3, sD, sH, sW]
    return softmax_axis(tape, shuffled, 1);
}

// Raw-value gather of the n^3 lattice corners around each final coordinate,
// border-clamped. The corner indices are integer, so no gradient flows into
// the coordinates; only x receives one.
template <typename T>
Var<T> gather_neighborhood(Tape<T>& tape, Var<T> x, const CoordinateGrid<T>& grid, int n) {
    if (n < 2 || n % 2 != 0) throw std::invalid_argument("gather_neighborhood: n must be even and >= 2");
    const auto& xv = tape.val(x);
    const auto& sv = tape.val(grid.coords);
    if (xv.shape.rank != 5 || sv.shape.rank != 5 || sv.shape[1] != 3)
        throw std::invalid_argument("gather_neighborhood: x rank-5 and coords [N,3,...] expected");
    const int64_t N = xv.shape[0], C = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const int64_t oD = sv.shape[2], oH = sv.shape[3], oW = sv.shape[4];
    const int64_t os = oD * oH * oW, xs = D * H * W;
    const int64_t J = int64_t(n) * n * n;
    const int64_t back = n / 2 - 1;  // n=2 -> corners floor(S)+{0,1}

    // Corner indices depend only on the coordinates; precompute once and share
    // with the backward scatter.
    auto idx = std::make_shared<std::vector<int32_t>>(size_t(N * J * os * 3));
    {
        const T* cd = sv.ptr();
        for (int64_t b = 0; b < N; ++b) {
            const T* pd = cd + (b * 3 + 0) * os;
            const T* ph = cd + (b * 3 + 1) * os;
            const T* pw = cd + (b * 3 + 2) * os;
            for (int64_t i = 0; i < os; ++i) {
                const int64_t bd = int64_t(std::floor(double(pd[i]))) - back;
                const int64_t bh = int64_t(std::floor(double(ph[i]))) - back;
                const int64_t bw = int64_t(std::floor(double(pw[i]))) - back;
                for (int64_t jz = 0; jz < n; ++jz)
                    for (int64_t jy = 0; jy < n; ++jy)
                        for (int64_t jx = 0; jx < n; ++jx) {
                            const int64_t j = (jz * n + jy) * n + jx;
                            int32_t* out = idx->data() + ((b * J + j) * os + i) * 3;
                            out[0] = int32_t(std::clamp<int64_t>(bd + jz, 0, D - 1));
                            out[1] = int32_t(std::clamp<int64_t>(bh + jy, 0, H - 1));
                            out[2] = int32_t(std::clamp<int64_t>(bw + jx, 0, W - 1));
                        }
            }
        }
    }

    Tensor<T> out(Shape{N, C, J, oD, oH, oW});
    const T* px = xv.ptr();
    T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t b = 0; b < N; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* xc = px + (b * C + c) * xs;
            for (int64_t j = 0; j < J; ++j) {
                T* yc = py + ((b * C + c) * J + j) * os;
                const int32_t* pi = idx->data() + (b * J + j) * os * 3;
                for (int64_t i = 0; i < os; ++i) {
                    const int32_t* q = pi + i * 3;
                    yc[i] = xc[(int64_t(q[0]) * H + q[1]) * W + q[2]];
                }
            }
        }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, idx, N, C, J, os, xs, H, W](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            T* gx = tp.grad(x).ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int64_t b = 0; b < N; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    T* gxc = gx + (b * C + c) * xs;
                    for (int64_t j = 0; j < J; ++j) {
                        const T* gc = pg + ((b * C + c) * J + j) * os;
                        const int32_t* pi = idx->data() + (b * J + j) * os * 3;
                        for (int64_t i = 0; i < os; ++i) {
                            const int32_t* q = pi + i * 3;
                            gxc[(int64_t(q[0]) * H + q[1]) * W + q[2]] += gc[i];
                        }
                    }
                }
        });
    return o;
}

// out[n,c,pos] = sum_j weights[n,j,pos] * gathered[n,c,j,pos].
template <typename T>
Var<T> neighborhood_weighted_sum(Tape<T>& tape, Var<T> gathered, Var<T> weights) {
    const auto& gv = tape.val(gathered);
    const auto& wv = tape.val(weights);
    if (gv.shape.rank != 6 || wv.shape.rank != 5)
        throw std::invalid_argument("neighborhood_weighted_sum: gathered rank-6, weights rank-5 expected");
    const int64_t N = gv.shape[0], C = gv.shape[1], J = gv.shape[2];
    const int64_t os = gv.shape[3] * gv.shape[4] * gv.shape[5];
    if (wv.shape[0] != N || wv.shape[1] != J || wv.numel() != N * J * os)
        throw std::invalid_argument("neighborhood_weighted_sum: weights shape " + wv.shape.str() +
                                    " inconsistent with gathered " + gv.shape.str());
    Tensor<T> out(Shape{N, C, gv.shape[3], gv.shape[4], gv.shape[5]});
    const T* pg = gv.ptr();
    const T* pw = wv.ptr();
    T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t b = 0; b < N; ++b)
        for (int64_t c = 0; c < C; ++c) {
            T* yc = py + (b * C + c) * os;
            for (int64_t i = 0; i < os; ++i) yc[i] = T(0);
            for (int64_t j = 0; j < J; ++j) {
                const T* gc = pg + ((b * C + c) * J + j) * os;
                const T* wc = pw + (b * J + j) * os;
                for (int64_t i = 0; i < os; ++i) yc[i] += wc[i] * gc[i];
            }
        }
    const bool ng = tape.needs_grad(gathered), nw = tape.needs_grad(weights);
    Var<T> o = tape.node(std::move(out), ng || nw);
    if (tape.needs_grad(o))
        tape.record([gathered, weights, o, N, C, J, os, ng, nw](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pgo = tp.grad(o).ptr();
            const T* pg = tp.val(gathered).ptr();
            const T* pw = tp.val(weights).ptr();
            if (ng) {
                T* gg = tp.grad(gathered).ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int64_t b = 0; b < N; ++b)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t j = 0; j < J; ++j) {
                            T* gc = gg + ((b * C + c) * J + j) * os;
                            const T* wc = pw + (b * J + j) * os;
                            const T* go = pgo + (b * C + c) * os;
                            for (int64_t i = 0; i < os; ++i) gc[i] += wc[i] * go[i];
                        }
            }
            if (nw) {
                T* gw = tp.grad(weights).ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int64_t b = 0; b < N; ++b)
                    for (int64_t j = 0; j < J; ++j) {
                        T* wc = gw + (b * J + j) * os;
                        for (int64_t c = 0; c < C; ++c) {
                            const T* gc = pg + ((b * C + c) * J + j) * os;
                            const T* go = pgo + (b * C + c) * os;
                            for (int64_t i = 0; i < os; ++i) wc[i] += gc[i] * go[i];
                        }
                    }
            }
        });
    return o;
}

// Full operator: S = G + O (final grid), gather the n^3 corners, blend with
// the softmax weight map. Output is a per-channel convex combination of input
// values, so it stays within each channel's [min, max].
template <typename T>
Var<T> onsample_forward(Tape<T>& tape, Var<T> x, const OnsamplingConfig& cfg, OnsamplingParams<T>& p) {
    cfg.validate();
    const Shape xs = tape.shape(x);
    if (xs[1] != cfg.c_in)
        throw std::invalid_argument("onsample_forward: input channels " + std::to_string(xs[1]) + " != cfg.c_in " +
                                    std::to_string(cfg.c_in));
    const int s = cfg.scale;
    CoordinateGrid<T> offs = offset_branch(tape, x, cfg, p);
    CoordinateGrid<T> grid{
        add(tape, offs.coords, base_grid<T>(tape, s, xs[0], xs[2] * s, xs[3] * s, xs[4] * s).coords),
        GridRole::final_coords};
    Var<T> weights = weight_branch(tape, x, cfg, p);
    Var<T> gathered = gather_neighborhood(tape, x, grid, cfg.neighborhood);
    return neighborhood_weighted_sum(tape, gathered, weights);
}

}  // namespace vseg
