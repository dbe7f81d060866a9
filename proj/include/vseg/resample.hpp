#pragma once

#include "ops.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vseg {

// [N, C*s^3, D, H, W] -> [N, C, sD, sH, sW]. Channel blocks are ordered
// (c, dz, dy, dx) with dx fastest: source channel = ((c*s + dz)*s + dy)*s + dx.
template <typename T>
Var<T> pixel_shuffle3d(Tape<T>& tape, Var<T> x, int s) {
    const auto& xv = tape.val(x);
    if (xv.shape.rank != 5) throw std::invalid_argument("pixel_shuffle3d: rank-5 input expected");
    const int64_t s3 = int64_t(s) * s * s;
    if (xv.shape[1] % s3 != 0)
        throw std::invalid_argument("pixel_shuffle3d: channels " + std::to_string(xv.shape[1]) +
                                    " not divisible by s^3 = " + std::to_string(s3));
    const int64_t N = xv.shape[0], C = xv.shape[1] / s3, D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    Tensor<T> out(Shape{N, C, D * s, H * s, W * s});
    const int64_t oH = H * s, oW = W * s;
    const T* px = xv.ptr();
    T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t dz = 0; dz < s; ++dz)
                for (int64_t dy = 0; dy < s; ++dy)
                    for (int64_t dx = 0; dx < s; ++dx) {
                        const int64_t q = ((c * s + dz) * s + dy) * s + dx;
                        const T* xc = px + ((n * C * s3 + q) * D) * H * W;
                        T* yc = py + (n * C + c) * (D * s) * oH * oW;
                        for (int64_t d = 0; d < D; ++d)
                            for (int64_t h = 0; h < H; ++h) {
                                const T* xrow = xc + (d * H + h) * W;
                                T* yrow = yc + ((d * s + dz) * oH + (h * s + dy)) * oW + dx;
                                for (int64_t w = 0; w < W; ++w) yrow[w * s] = xrow[w];
                            }
                    }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, N, C, D, H, W, s, s3, oH, oW](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            T* gx = tp.grad(x).ptr();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dz = 0; dz < s; ++dz)
                        for (int64_t dy = 0; dy < s; ++dy)
                            for (int64_t dx = 0; dx < s; ++dx) {
                                const int64_t q = ((c * s + dz) * s + dy) * s + dx;
                                T* gxc = gx + ((n * C * s3 + q) * D) * H * W;
                                const T* gc = pg + (n * C + c) * (D * s) * oH * oW;
                                for (int64_t d = 0; d < D; ++d)
                                    for (int64_t h = 0; h < H; ++h) {
                                        T* gxrow = gxc + (d * H + h) * W;
                                        const T* grow = gc + ((d * s + dz) * oH + (h * s + dy)) * oW + dx;
                                        for (int64_t w = 0; w < W; ++w) gxrow[w] += grow[w * s];
                                    }
                            }
        });
    return o;
}

// Exact inverse of pixel_shuffle3d.
template <typename T>
Var<T> pixel_unshuffle3d(Tape<T>& tape, Var<T> x, int s) {
    const auto& xv = tape.val(x);
    if (xv.shape.rank != 5) throw std::invalid_argument("pixel_unshuffle3d: rank-5 input expected");
    if (xv.shape[2] % s != 0 || xv.shape[3] % s != 0 || xv.shape[4] % s != 0)
        throw std::invalid_argument("pixel_unshuffle3d: extents " + xv.shape.str() + " not divisible by " +
                                    std::to_string(s));
    const int64_t s3 = int64_t(s) * s * s;
    const int64_t N = xv.shape[0], C = xv.shape[1], D = xv.shape[2] / s, H = xv.shape[3] / s, W = xv.shape[4] / s;
    const int64_t iH = xv.shape[3], iW = xv.shape[4];
    Tensor<T> out(Shape{N, C * s3, D, H, W});
    const T* px = xv.ptr();
    T* py = out.ptr();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t dz = 0; dz < s; ++dz)
                for (int64_t dy = 0; dy < s; ++dy)
                    for (int64_t dx = 0; dx < s; ++dx) {
                        const int64_t q = ((c * s + dz) * s + dy) * s + dx;
                        T* yc = py + (n * C * s3 + q) * D * H * W;
                        const T* xc = px + (n * C + c) * (D * s) * iH * iW;
                        for (int64_t d = 0; d < D; ++d)
                            for (int64_t h = 0; h < H; ++h) {
                                T* yrow = yc + (d * H + h) * W;
                                const T* xrow = xc + ((d * s + dz) * iH + (h * s + dy)) * iW + dx;
                                for (int64_t w = 0; w < W; ++w) yrow[w] = xrow[w * s];
                            }
                    }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, N, C, D, H, W, s, s3, iH, iW](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            T* gx = tp.grad(x).ptr();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dz = 0; dz < s; ++dz)
                        for (int64_t dy = 0; dy < s; ++dy)
                            for (int64_t dx = 0; dx < s; ++dx) {
                                const int64_t q = ((c * s + dz) * s + dy) * s + dx;
                                const T* gc = pg + (n * C * s3 + q) * D * H * W;
                                T* gxc = gx + (n * C + c) * (D * s) * iH * iW;
                                for (int64_t d = 0; d < D; ++d)
                                    for (int64_t h = 0; h < H; ++h) {
                                        const T* grow = gc + (d * H + h) * W;
                                        T* gxrow = gxc + ((d * s + dz) * iH + (h * s + dy)) * iW + dx;
                                        for (int64_t w = 0; w < W; ++w) gxrow[w * s] += grow[w];
                                    }
                            }
        });
    return o;
}

// conv3d to C*s^3 channels followed by pixel shuffle.
template <typename T>
Var<T> subpixel_upsample(Tape<T>& tape, Var<T> x, int s, Var<T> weight, Var<T> bias, const Conv3dSpec& spec) {
    const int64_t s3 = int64_t(s) * s * s;
    if (spec.out_channels % s3 != 0)
        throw std::invalid_argument("subpixel_upsample: conv out channels must be divisible by s^3");
    return pixel_shuffle3d(tape, conv3d(tape, x, weight, bias, spec), s);
}

namespace detail {

struct LerpAxis {
    int64_t i0, i1;
    double t;  // weight of i1
};

// align-corners=false source coordinate with border clamping
inline LerpAxis lerp_axis(int64_t out_idx, int64_t in_extent, double ratio) {
    const double z = (double(out_idx) + 0.5) * ratio - 0.5;
    const double f = std::floor(z);
    LerpAxis a;
    a.t = z - f;
    a.i0 = std::clamp<int64_t>(int64_t(f), 0, in_extent - 1);
    a.i1 = std::clamp<int64_t>(int64_t(f) + 1, 0, in_extent - 1);
    return a;
}

}  // namespace detail

// Trilinear interpolation to an arbitrary target extent, align-corners=false,
// border clamp. Upsampling by integer s is the (oD,oH,oW) = s*(D,H,W) case.
template <typename T>
Var<T> trilinear_resize(Tape<T>& tape, Var<T> x, int64_t oD, int64_t oH, int64_t oW) {
    const auto& xv = tape.val(x);
    if (xv.shape.rank != 5) throw std::invalid_argument("trilinear_resize: rank-5 input expected");
    const int64_t N = xv.shape[0], C = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const double rd = double(D) / double(oD), rh = double(H) / double(oH), rw = double(W) / double(oW);

    std::vector<detail::LerpAxis> ad(static_cast<size_t>(oD)), ah(static_cast<size_t>(oH)),
        aw(static_cast<size_t>(oW));
    for (int64_t i = 0; i < oD; ++i) ad[size_t(i)] = detail::lerp_axis(i, D, rd);
    for (int64_t i = 0; i < oH; ++i) ah[size_t(i)] = detail::lerp_axis(i, H, rh);
    for (int64_t i = 0; i < oW; ++i) aw[size_t(i)] = detail::lerp_axis(i, W, rw);

    Tensor<T> out(Shape{N, C, oD, oH, oW});
    const int64_t xs = D * H * W, ys = oD * oH * oW;
    const T* px = xv.ptr();
    T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* xc = px + (n * C + c) * xs;
            T* yc = py + (n * C + c) * ys;
            for (int64_t od = 0; od < oD; ++od) {
                const auto& d = ad[size_t(od)];
                for (int64_t oh = 0; oh < oH; ++oh) {
                    const auto& h = ah[size_t(oh)];
                    const T* r00 = xc + (d.i0 * H + h.i0) * W;
                    const T* r01 = xc + (d.i0 * H + h.i1) * W;
                    const T* r10 = xc + (d.i1 * H + h.i0) * W;
                    const T* r11 = xc + (d.i1 * H + h.i1) * W;
                    T* yrow = yc + (od * oH + oh) * oW;
                    for (int64_t ow = 0; ow < oW; ++ow) {
                        const auto& w = aw[size_t(ow)];
                        const double wd0 = 1.0 - d.t, wd1 = d.t, wh0 = 1.0 - h.t, wh1 = h.t, ww0 = 1.0 - w.t,
                                     ww1 = w.t;
                        const double v = wd0 * (wh0 * (ww0 * double(r00[w.i0]) + ww1 * double(r00[w.i1])) +
                                                wh1 * (ww0 * double(r01[w.i0]) + ww1 * double(r01[w.i1]))) +
                                         wd1 * (wh0 * (ww0 * double(r10[w.i0]) + ww1 * double(r10[w.i1])) +
                                                wh1 * (ww0 * double(r11[w.i0]) + ww1 * double(r11[w.i1])));
                        yrow[ow] = T(v);
                    }
                }
            }
        }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, N, C, D, H, W, oD, oH, oW, ad, ah, aw, xs, ys](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            T* gx = tp.grad(x).ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gc = pg + (n * C + c) * ys;
                    T* gxc = gx + (n * C + c) * xs;
                    for (int64_t od = 0; od < oD; ++od) {
                        const auto& d = ad[size_t(od)];
                        for (int64_t oh = 0; oh < oH; ++oh) {
                            const auto& h = ah[size_t(oh)];
                            const T* grow = gc + (od * oH + oh) * oW;
                            for (int64_t ow = 0; ow < oW; ++ow) {
                                const auto& w = aw[size_t(ow)];
                                const double g = double(grow[ow]);
                                const double wd[2] = {1.0 - d.t, d.t};
                                const double wh[2] = {1.0 - h.t, h.t};
                                const double ww[2] = {1.0 - w.t, w.t};
                                const int64_t di[2] = {d.i0, d.i1}, hi[2] = {h.i0, h.i1}, wi[2] = {w.i0, w.i1};
                                for (int a = 0; a < 2; ++a)
                                    for (int b = 0; b < 2; ++b)
                                        for (int e = 0; e < 2; ++e)
                                            gxc[(di[a] * H + hi[b]) * W + wi[e]] += T(g * wd[a] * wh[b] * ww[e]);
                            }
                        }
                    }
                }
        });
    return o;
}

template <typename T>
Var<T> trilinear_upsample(Tape<T>& tape, Var<T> x, int s) {
    if (s < 1) throw std::invalid_argument("trilinear_upsample: scale must be >= 1");
    const Shape sh = tape.shape(x);
    return trilinear_resize(tape, x, sh[2] * s, sh[3] * s, sh[4] * s);
}

// Samples x at real-valued coordinates (input-grid units, border clamp).
// coords layout [N, 3, oD, oH, oW] with components (d, h, w); differentiable
// with respect to both x and coords.
template <typename T>
Var<T> grid_sample_trilinear(Tape<T>& tape, Var<T> x, Var<T> coords) {
    const auto& xv = tape.val(x);
    const auto& cv = tape.val(coords);
    if (xv.shape.rank != 5 || cv.shape.rank != 5 || cv.shape[1] != 3)
        throw std::invalid_argument("grid_sample_trilinear: x rank-5 and coords [N,3,oD,oH,oW] expected");
    if (cv.shape[0] != xv.shape[0]) throw std::invalid_argument("grid_sample_trilinear: batch mismatch");
    const int64_t N = xv.shape[0], C = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const int64_t oD = cv.shape[2], oH = cv.shape[3], oW = cv.shape[4];
    const int64_t xs = D * H * W, os = oD * oH * oW;

    Tensor<T> out(Shape{N, C, oD, oH, oW});
    const T* px = xv.ptr();
    const T* pc = cv.ptr();
    T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n) {
        const T* cd = pc + (n * 3 + 0) * os;
        const T* ch = pc + (n * 3 + 1) * os;
        const T* cw = pc + (n * 3 + 2) * os;
        for (int64_t i = 0; i < os; ++i) {
            const double zd = double(cd[i]), zh = double(ch[i]), zw = double(cw[i]);
            const double fd = std::floor(zd), fh = std::floor(zh), fw = std::floor(zw);
            const double td = zd - fd, th = zh - fh, tw = zw - fw;
            const int64_t d0 = std::clamp<int64_t>(int64_t(fd), 0, D - 1),
                          d1 = std::clamp<int64_t>(int64_t(fd) + 1, 0, D - 1);
            const int64_t h0 = std::clamp<int64_t>(int64_t(fh), 0, H - 1),
                          h1 = std::clamp<int64_t>(int64_t(fh) + 1, 0, H - 1);
            const int64_t w0 = std::clamp<int64_t>(int64_t(fw), 0, W - 1),
                          w1 = std::clamp<int64_t>(int64_t(fw) + 1, 0, W - 1);
            for (int64_t c = 0; c < C; ++c) {
                const T* xc = px + (n * C + c) * xs;
                const double v000 = xc[(d0 * H + h0) * W + w0], v001 = xc[(d0 * H + h0) * W + w1];
                const double v010 = xc[(d0 * H + h1) * W + w0], v011 = xc[(d0 * H + h1) * W + w1];
                const double v100 = xc[(d1 * H + h0) * W + w0], v101 = xc[(d1 * H + h0) * W + w1];
                const double v110 = xc[(d1 * H + h1) * W + w0], v111 = xc[(d1 * H + h1) * W + w1];
                const double v = (1 - td) * ((1 - th) * ((1 - tw) * v000 + tw * v001) + th * ((1 - tw) * v010 + tw * v011)) +
                                 td * ((1 - th) * ((1 - tw) * v100 + tw * v101) + th * ((1 - tw) * v110 + tw * v111));
                py[(n * C + c) * os + i] = T(v);
            }
        }
    }
    bool needs = tape.needs_grad(x) || tape.needs_grad(coords);
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([x, coords, o, N, C, D, H, W, oD, oH, oW, xs, os](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            const T* px = tp.val(x).ptr();
            const T* pc = tp.val(coords).ptr();
            const bool nx = tp.needs_grad(x), nc = tp.needs_grad(coords);
            T* gx = nx ? tp.grad(x).ptr() : nullptr;
            T* gc = nc ? tp.grad(coords).ptr() : nullptr;
            for (int64_t n = 0; n < N; ++n) {
                const T* cd = pc + (n * 3 + 0) * os;
                const T* ch = pc + (n * 3 + 1) * os;
                const T* cw = pc + (n * 3 + 2) * os;
                for (int64_t i = 0; i < os; ++i) {
                    const double zd = double(cd[i]), zh = double(ch[i]), zw = double(cw[i]);
                    const double fd = std::floor(zd), fh = std::floor(zh), fw = std::floor(zw);
                    const double td = zd - fd, th = zh - fh, tw = zw - fw;
                    const int64_t d0 = std::clamp<int64_t>(int64_t(fd), 0, D - 1),
                                  d1 = std::clamp<int64_t>(int64_t(fd) + 1, 0, D - 1);
                    const int64_t h0 = std::clamp<int64_t>(int64_t(fh), 0, H - 1),
                                  h1 = std::clamp<int64_t>(int64_t(fh) + 1, 0, H - 1);
                    const int64_t w0 = std::clamp<int64_t>(int64_t(fw), 0, W - 1),
                                  w1 = std::clamp<int64_t>(int64_t(fw) + 1, 0, W - 1);
                    double dzd = 0.0, dzh = 0.0, dzw = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        const double g = double(pg[(n * C + c) * os + i]);
                        if (g == 0.0 && !nc) continue;
                        const T* xc = px + (n * C + c) * xs;
                        const double v000 = xc[(d0 * H + h0) * W + w0], v001 = xc[(d0 * H + h0) * W + w1];
                        const double v010 = xc[(d0 * H + h1) * W + w0], v011 = xc[(d0 * H + h1) * W + w1];
                        const double v100 = xc[(d1 * H + h0) * W + w0], v101 = xc[(d1 * H + h0) * W + w1];
                        const double v110 = xc[(d1 * H + h1) * W + w0], v111 = xc[(d1 * H + h1) * W + w1];
                        if (nx) {
                            T* gxc = gx + (n * C + c) * xs;
                            gxc[(d0 * H + h0) * W + w0] += T(g * (1 - td) * (1 - th) * (1 - tw));
                            gxc[(d0 * H + h0) * W + w1] += T(g * (1 - td) * (1 - th) * tw);
                            gxc[(d0 * H + h1) * W + w0] += T(g * (1 - td) * th * (1 - tw));
                            gxc[(d0 * H + h1) * W + w1] += T(g * (1 - td) * th * tw);
                            gxc[(d1 * H + h0) * W + w0] += T(g * td * (1 - th) * (1 - tw));
                            gxc[(d1 * H + h0) * W + w1] += T(g * td * (1 - th) * tw);
                            gxc[(d1 * H + h1) * W + w0] += T(g * td * th * (1 - tw));
                            gxc[(d1 * H + h1) * W + w1] += T(g * td * th * tw);
                        }
                        if (nc) {
                            const double c00 = (1 - tw) * v000 + tw * v001, c01 = (1 - tw) * v010 + tw * v011;
                            const double c10 = (1 - tw) * v100 + tw * v101, c11 = (1 - tw) * v110 + tw * v111;
                            dzd += g * ((1 - th) * (c10 - c00) + th * (c11 - c01));
                            dzh += g * ((1 - td) * (c01 - c00) + td * (c11 - c10));
                            dzw += g * ((1 - td) * ((1 - th) * (v001 - v000) + th * (v011 - v010)) +
                                        td * ((1 - th) * (v101 - v100) + th * (v111 - v110)));
                        }
                    }
                    if (nc) {
                        gc[(n * 3 + 0) * os + i] += T(dzd);
                        gc[(n * 3 + 1) * os + i] += T(dzh);
                        gc[(n * 3 + 2) * os + i] += T(dzw);
                    }
                }
            }
        });
    return o;
}

}  // namespace vseg
