#pragma once

#include "ops.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vseg {

struct Conv3dSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kd = 3, kh = 3, kw = 3;
    int stride = 1;
    int pad = 0;
    bool has_bias = true;

    static Conv3dSpec cubic(int cin, int cout, int k, int stride = 1, int pad = 0, bool bias = true) {
        Conv3dSpec s;
        s.in_channels = cin;
        s.out_channels = cout;
        s.kd = s.kh = s.kw = k;
        s.stride = stride;
        s.pad = pad;
        s.has_bias = bias;
        return s;
    }

    int64_t out_extent(int64_t in, int k) const { return (in + 2 * pad - k) / stride + 1; }
};

namespace detail {

struct TapRange {
    int64_t lo, hi;  // output index range for which in = out*s - p + k stays in bounds
};

inline TapRange tap_range(int64_t in_extent, int64_t out_extent, int64_t k, int64_t s, int64_t p) {
    TapRange r;
    r.lo = std::max<int64_t>(0, ceil_div(p - k, s));
    r.hi = std::min(out_extent, floor_div(in_extent - 1 + p - k, s) + 1);
    if (r.hi < r.lo) r.hi = r.lo;
    return r;
}

// 3x3x3 stride-1 pad-1 kernels, the model's dominant convolution shape:
// all nine (kh, kw) contributions of a kd slice are fused into one row pass
// so the inner loops run wide instead of 48-element fragments.

template <typename T>
void conv3x3s1p1_forward(const T* __restrict__ x, const T* __restrict__ w, const T* __restrict__ b, T* __restrict__ y,
                         int64_t N, int64_t Cin, int64_t D, int64_t H, int64_t W, int64_t Cout) {
    const int64_t xs = D * H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co) {
            T* yc = y + (n * Cout + co) * xs;
            const T bias = b ? b[co] : T(0);
            const T* wco = w + co * Cin * 27;
            for (int64_t od = 0; od < D; ++od) {
                const int64_t kd_lo = od == 0 ? 1 : 0, kd_hi = od == D - 1 ? 2 : 3;
                for (int64_t oh = 0; oh < H; ++oh) {
                    T* yrow = yc + (od * H + oh) * W;
                    for (int64_t i = 0; i < W; ++i) yrow[i] = bias;
                    const bool oh_interior = oh > 0 && oh < H - 1;
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xc = x + (n * Cin + ci) * xs;
                        const T* wc = wco + ci * 27;
                        for (int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                            const int64_t id = od - 1 + kd;
                            const T* wk = wc + kd * 9;
                            if (oh_interior) {
                                const T* r0 = xc + (id * H + oh - 1) * W;
                                const T* r1 = r0 + W;
                                const T* r2 = r1 + W;
                                const T w00 = wk[0], w01 = wk[1], w02 = wk[2];
                                const T w10 = wk[3], w11 = wk[4], w12 = wk[5];
                                const T w20 = wk[6], w21 = wk[7], w22 = wk[8];
                                yrow[0] += w01 * r0[0] + w02 * r0[1] + w11 * r1[0] + w12 * r1[1] + w21 * r2[0] +
                                           w22 * r2[1];
#ifdef _OPENMP
#pragma omp simd
#endif
                                for (int64_t ow = 1; ow < W - 1; ++ow)
                                    yrow[ow] += w00 * r0[ow - 1] + w01 * r0[ow] + w02 * r0[ow + 1] +
                                                w10 * r1[ow - 1] + w11 * r1[ow] + w12 * r1[ow + 1] +
                                                w20 * r2[ow - 1] + w21 * r2[ow] + w22 * r2[ow + 1];
                                yrow[W - 1] += w00 * r0[W - 2] + w01 * r0[W - 1] + w10 * r1[W - 2] + w11 * r1[W - 1] +
                                               w20 * r2[W - 2] + w21 * r2[W - 1];
                            } else {
                                const int64_t kh_lo = oh == 0 ? 1 : 0, kh_hi = oh == H - 1 ? 2 : 3;
                                for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                                    const T* r = xc + (id * H + oh - 1 + kh) * W;
                                    const T w0 = wk[kh * 3], w1 = wk[kh * 3 + 1], w2 = wk[kh * 3 + 2];
                                    yrow[0] += w1 * r[0] + w2 * r[1];
#ifdef _OPENMP
#pragma omp simd
#endif
                                    for (int64_t ow = 1; ow < W - 1; ++ow)
                                        yrow[ow] += w0 * r[ow - 1] + w1 * r[ow] + w2 * r[ow + 1];
                                    yrow[W - 1] += w0 * r[W - 2] + w1 * r[W - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
}

template <typename T>
void conv3x3s1p1_backward_input(const T* __restrict__ g, const T* __restrict__ w, T* __restrict__ gx, int64_t N,
                                int64_t Cin, int64_t D, int64_t H, int64_t W, int64_t Cout) {
    const int64_t xs = D * H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < Cin; ++ci) {
            T* gxc = gx + (n * Cin + ci) * xs;
            for (int64_t id = 0; id < D; ++id) {
                // od = id + 1 - kd in range
                const int64_t kd_lo = id == D - 1 ? 1 : 0, kd_hi = id == 0 ? 2 : 3;
                for (int64_t ih = 0; ih < H; ++ih) {
                    T* gxrow = gxc + (id * H + ih) * W;
                    const bool ih_interior = ih > 0 && ih < H - 1;
                    for (int64_t co = 0; co < Cout; ++co) {
                        const T* gc = g + (n * Cout + co) * xs;
                        const T* wc = w + (co * Cin + ci) * 27;
                        for (int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                            const int64_t od = id + 1 - kd;
                            const T* wk = wc + kd * 9;
                            if (ih_interior) {
                                // oh = ih + 1 - kh: kh = 0 -> ih+1, kh = 2 -> ih-1
                                const T* r0 = gc + (od * H + ih + 1) * W;  // kh = 0
                                const T* r1 = gc + (od * H + ih) * W;      // kh = 1
                                const T* r2 = gc + (od * H + ih - 1) * W;  // kh = 2
                                const T w00 = wk[0], w01 = wk[1], w02 = wk[2];
                                const T w10 = wk[3], w11 = wk[4], w12 = wk[5];
                                const T w20 = wk[6], w21 = wk[7], w22 = wk[8];
                                // ow = iw + 1 - kw: kw = 0 -> iw+1, kw = 2 -> iw-1
                                gxrow[0] += w00 * r0[1] + w01 * r0[0] + w10 * r1[1] + w11 * r1[0] + w20 * r2[1] +
                                            w21 * r2[0];
#ifdef _OPENMP
#pragma omp simd
#endif
                                for (int64_t iw = 1; iw < W - 1; ++iw)
                                    gxrow[iw] += w00 * r0[iw + 1] + w01 * r0[iw] + w02 * r0[iw - 1] +
                                                 w10 * r1[iw + 1] + w11 * r1[iw] + w12 * r1[iw - 1] +
                                                 w20 * r2[iw + 1] + w21 * r2[iw] + w22 * r2[iw - 1];
                                gxrow[W - 1] += w01 * r0[W - 1] + w02 * r0[W - 2] + w11 * r1[W - 1] +
                                                w12 * r1[W - 2] + w21 * r2[W - 1] + w22 * r2[W - 2];
                            } else {
                                const int64_t kh_lo = ih == H - 1 ? 1 : 0, kh_hi = ih == 0 ? 2 : 3;
                                for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                                    const T* r = gc + (od * H + ih + 1 - kh) * W;
                                    const T w0 = wk[kh * 3], w1 = wk[kh * 3 + 1], w2 = wk[kh * 3 + 2];
                                    gxrow[0] += w0 * r[1] + w1 * r[0];
#ifdef _OPENMP
#pragma omp simd
#endif
                                    for (int64_t iw = 1; iw < W - 1; ++iw)
                                        gxrow[iw] += w0 * r[iw + 1] + w1 * r[iw] + w2 * r[iw - 1];
                                    gxrow[W - 1] += w1 * r[W - 1] + w2 * r[W - 2];
                                }
                            }
                        }
                    }
                }
            }
        }
}

template <typename T>
void conv3x3s1p1_backward_weight(const T* __restrict__ g, const T* __restrict__ x, T* __restrict__ gw, int64_t N,
                                 int64_t Cin, int64_t D, int64_t H, int64_t W, int64_t Cout) {
    const int64_t xs = D * H * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t co = 0; co < Cout; ++co) {
        std::vector<double> acc(static_cast<size_t>(Cin * 27), 0.0);
        for (int64_t n = 0; n < N; ++n) {
            const T* gc = g + (n * Cout + co) * xs;
            for (int64_t od = 0; od < D; ++od) {
                const int64_t kd_lo = od == 0 ? 1 : 0, kd_hi = od == D - 1 ? 2 : 3;
                for (int64_t oh = 0; oh < H; ++oh) {
                    const T* grow = gc + (od * H + oh) * W;
                    const bool oh_interior = oh > 0 && oh < H - 1;
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xc = x + (n * Cin + ci) * xs;
                        double* accc = acc.data() + ci * 27;
                        for (int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                            const int64_t id = od - 1 + kd;
                            double* a = accc + kd * 9;
                            if (oh_interior) {
                                const T* r0 = xc + (id * H + oh - 1) * W;
                                const T* r1 = r0 + W;
                                const T* r2 = r1 + W;
                                T d00 = 0, d01 = 0, d02 = 0, d10 = 0, d11 = 0, d12 = 0, d20 = 0, d21 = 0, d22 = 0;
#ifdef _OPENMP
#pragma omp simd reduction(+ : d00, d01, d02, d10, d11, d12, d20, d21, d22)
#endif
                                for (int64_t ow = 1; ow < W - 1; ++ow) {
                                    const T gv = grow[ow];
                                    d00 += gv * r0[ow - 1];
                                    d01 += gv * r0[ow];
                                    d02 += gv * r0[ow + 1];
                                    d10 += gv * r1[ow - 1];
                                    d11 += gv * r1[ow];
                                    d12 += gv * r1[ow + 1];
                                    d20 += gv * r2[ow - 1];
                                    d21 += gv * r2[ow];
                                    d22 += gv * r2[ow + 1];
                                }
                                {
                                    const T g0 = grow[0], g1 = grow[W - 1];
                                    d01 += g0 * r0[0];
                                    d02 += g0 * r0[1];
                                    d11 += g0 * r1[0];
                                    d12 += g0 * r1[1];
                                    d21 += g0 * r2[0];
                                    d22 += g0 * r2[1];
                                    d00 += g1 * r0[W - 2];
                                    d01 += g1 * r0[W - 1];
                                    d10 += g1 * r1[W - 2];
                                    d11 += g1 * r1[W - 1];
                                    d20 += g1 * r2[W - 2];
                                    d21 += g1 * r2[W - 1];
                                }
                                a[0] += double(d00);
                                a[1] += double(d01);
                                a[2] += double(d02);
                                a[3] += double(d10);
                                a[4] += double(d11);
                                a[5] += double(d12);
                                a[6] += double(d20);
                                a[7] += double(d21);
                                a[8] += double(d22);
                            } else {
                                const int64_t kh_lo = oh == 0 ? 1 : 0, kh_hi = oh == H - 1 ? 2 : 3;
                                for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                                    const T* r = xc + (id * H + oh - 1 + kh) * W;
                                    T d0 = 0, d1 = 0, d2 = 0;
#ifdef _OPENMP
#pragma omp simd reduction(+ : d0, d1, d2)
#endif
                                    for (int64_t ow = 1; ow < W - 1; ++ow) {
                                        const T gv = grow[ow];
                                        d0 += gv * r[ow - 1];
                                        d1 += gv * r[ow];
                                        d2 += gv * r[ow + 1];
                                    }
                                    d1 += grow[0] * r[0];
                                    d2 += grow[0] * r[1];
                                    d0 += grow[W - 1] * r[W - 2];
                                    d1 += grow[W - 1] * r[W - 1];
                                    a[kh * 3] += double(d0);
                                    a[kh * 3 + 1] += double(d1);
                                    a[kh * 3 + 2] += double(d2);
                                }
                            }
                        }
                    }
                }
            }
        }
        T* gwc = gw + co * Cin * 27;
        for (int64_t i = 0; i < Cin * 27; ++i) gwc[i] += T(acc[size_t(i)]);
    }
}

// stride-1 fast path: output rows stay register/L1 resident while all
// (ci, kd, kh, kw) contributions accumulate into them in one sweep
template <typename T>
void conv3d_forward_s1(const T* __restrict__ x, const T* __restrict__ w, const T* __restrict__ b, T* __restrict__ y, int64_t N, int64_t Cin, int64_t D, int64_t H,
                       int64_t W, int64_t Cout, int64_t KD, int64_t KH, int64_t KW, int64_t p, int64_t oD, int64_t oH,
                       int64_t oW) {
    if (KD == 3 && KH == 3 && KW == 3 && p == 1 && D >= 2 && H >= 2 && W >= 2) {
        conv3x3s1p1_forward(x, w, b, y, N, Cin, D, H, W, Cout);
        return;
    }
    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co) {
            T* yc = y + (n * Cout + co) * ys;
            const T bias = b ? b[co] : T(0);
            const T* wco = w + co * Cin * ws;
            for (int64_t od = 0; od < oD; ++od) {
                const int64_t kd_lo = std::max<int64_t>(0, p - od), kd_hi = std::min<int64_t>(KD, D + p - od);
                for (int64_t oh = 0; oh < oH; ++oh) {
                    const int64_t kh_lo = std::max<int64_t>(0, p - oh), kh_hi = std::min<int64_t>(KH, H + p - oh);
                    T* yrow = yc + (od * oH + oh) * oW;
                    for (int64_t i = 0; i < oW; ++i) yrow[i] = bias;
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xc = x + (n * Cin + ci) * xs;
                        const T* wc = wco + ci * ws;
                        for (int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                            const int64_t id = od - p + kd;
                            for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                                const int64_t ih = oh - p + kh;
                                const T* xrow = xc + (id * H + ih) * W;
                                const T* wk = wc + (kd * KH + kh) * KW;
                                for (int64_t kw = 0; kw < KW; ++kw) {
                                    const T wv = wk[kw];
                                    if (wv == T(0)) continue;
                                    const int64_t lo = std::max<int64_t>(0, p - kw);
                                    const int64_t hi = std::min(oW, W + p - kw);
                                    const T* xp = xrow + kw - p;
#ifdef _OPENMP
#pragma omp simd
#endif
                                    for (int64_t ow = lo; ow < hi; ++ow) yrow[ow] += wv * xp[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
}

template <typename T>
void conv3d_forward_kernel(const T* __restrict__ x, const T* __restrict__ w, const T* __restrict__ b, T* __restrict__ y, int64_t N, int64_t Cin, int64_t D, int64_t H,
                           int64_t W, int64_t Cout, int64_t KD, int64_t KH, int64_t KW, int64_t s, int64_t p,
                           int64_t oD, int64_t oH, int64_t oW) {
    if (s == 1) {
        conv3d_forward_s1(x, w, b, y, N, Cin, D, H, W, Cout, KD, KH, KW, p, oD, oH, oW);
        return;
    }
    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co) {
            T* yc = y + (n * Cout + co) * ys;
            const T bias = b ? b[co] : T(0);
            for (int64_t i = 0; i < ys; ++i) yc[i] = bias;
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* xc = x + (n * Cin + ci) * xs;
                const T* wc = w + (co * Cin + ci) * ws;
                for (int64_t kd = 0; kd < KD; ++kd) {
                    const auto rd = tap_range(D, oD, kd, s, p);
                    for (int64_t kh = 0; kh < KH; ++kh) {
                        const auto rh = tap_range(H, oH, kh, s, p);
                        for (int64_t kw = 0; kw < KW; ++kw) {
                            const T wv = wc[(kd * KH + kh) * KW + kw];
                            if (wv == T(0)) continue;
                            const auto rw = tap_range(W, oW, kw, s, p);
                            for (int64_t od = rd.lo; od < rd.hi; ++od) {
                                const int64_t id = od * s - p + kd;
                                for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
                                    const int64_t ih = oh * s - p + kh;
                                    const T* xrow = xc + (id * H + ih) * W;
                                    T* yrow = yc + (od * oH + oh) * oW;
                                    for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                                        yrow[ow] += wv * xrow[ow * s - p + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
}

// stride-1 fast path: gather form, each dx row owned by exactly one pass, the
// upstream-gradient row window stays cache resident across (ci, taps)
template <typename T>
void conv3d_backward_input_s1(const T* __restrict__ g, const T* __restrict__ w, T* __restrict__ gx, int64_t N, int64_t Cin, int64_t D, int64_t H, int64_t W,
                              int64_t Cout, int64_t KD, int64_t KH, int64_t KW, int64_t p, int64_t oD, int64_t oH,
                              int64_t oW) {
    if (KD == 3 && KH == 3 && KW == 3 && p == 1 && D >= 2 && H >= 2 && W >= 2) {
        conv3x3s1p1_backward_input(g, w, gx, N, Cin, D, H, W, Cout);
        return;
    }
    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t id = 0; id < D; ++id) {
            // od = id + p - kd must lie in [0, oD)
            const int64_t kd_lo = std::max<int64_t>(0, id + p - (oD - 1)), kd_hi = std::min<int64_t>(KD, id + p + 1);
            for (int64_t ih = 0; ih < H; ++ih) {
                const int64_t kh_lo = std::max<int64_t>(0, ih + p - (oH - 1)), kh_hi = std::min<int64_t>(KH, ih + p + 1);
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    T* gxrow = gx + (n * Cin + ci) * xs + (id * H + ih) * W;
                    for (int64_t co = 0; co < Cout; ++co) {
                        const T* gc = g + (n * Cout + co) * ys;
                        const T* wc = w + (co * Cin + ci) * ws;
                        for (int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                            const int64_t od = id + p - kd;
                            for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                                const int64_t oh = ih + p - kh;
                                const T* grow = gc + (od * oH + oh) * oW;
                                const T* wk = wc + (kd * KH + kh) * KW;
                                for (int64_t kw = 0; kw < KW; ++kw) {
                                    const T wv = wk[kw];
                                    if (wv == T(0)) continue;
                                    // iw = ow - p + kw over valid ow
                                    const int64_t lo = std::max<int64_t>(0, kw - p);
                                    const int64_t hi = std::min(W, oW + kw - p);
                                    const T* gp = grow + p - kw;
#ifdef _OPENMP
#pragma omp simd
#endif
                                    for (int64_t iw = lo; iw < hi; ++iw) gxrow[iw] += wv * gp[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
}

template <typename T>
void conv3d_backward_input_kernel(const T* __restrict__ g, const T* __restrict__ w, T* __restrict__ gx, int64_t N, int64_t Cin, int64_t D, int64_t H,
                                  int64_t W, int64_t Cout, int64_t KD, int64_t KH, int64_t KW, int64_t s, int64_t p,
                                  int64_t oD, int64_t oH, int64_t oW) {
    if (s == 1) {
        conv3d_backward_input_s1(g, w, gx, N, Cin, D, H, W, Cout, KD, KH, KW, p, oD, oH, oW);
        return;
    }
    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < Cin; ++ci) {
            T* gxc = gx + (n * Cin + ci) * xs;
            for (int64_t co = 0; co < Cout; ++co) {
                const T* gc = g + (n * Cout + co) * ys;
                const T* wc = w + (co * Cin + ci) * ws;
                for (int64_t kd = 0; kd < KD; ++kd) {
                    const auto rd = tap_range(D, oD, kd, s, p);
                    for (int64_t kh = 0; kh < KH; ++kh) {
                        const auto rh = tap_range(H, oH, kh, s, p);
                        for (int64_t kw = 0; kw < KW; ++kw) {
                            const T wv = wc[(kd * KH + kh) * KW + kw];
                            if (wv == T(0)) continue;
                            const auto rw = tap_range(W, oW, kw, s, p);
                            for (int64_t od = rd.lo; od < rd.hi; ++od) {
                                const int64_t id = od * s - p + kd;
                                for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
                                    const int64_t ih = oh * s - p + kh;
                                    T* gxrow = gxc + (id * H + ih) * W;
                                    const T* grow = gc + (od * oH + oh) * oW;
                                    for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                                        gxrow[ow * s - p + kw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
}

// stride-1 fast path: one sweep over the upstream-gradient rows per (co, ci)
// with all 27 tap dot products accumulated together
template <typename T>
void conv3d_backward_weight_s1(const T* __restrict__ g, const T* __restrict__ x, T* __restrict__ gw, int64_t N, int64_t Cin, int64_t D, int64_t H, int64_t W,
                               int64_t Cout, int64_t KD, int64_t KH, int64_t KW, int64_t p, int64_t oD, int64_t oH,
                               int64_t oW) {
    if (KD == 3 && KH == 3 && KW == 3 && p == 1 && D >= 2 && H >= 2 && W >= 2) {
        conv3x3s1p1_backward_weight(g, x, gw, N, Cin, D, H, W, Cout);
        return;
    }
    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t co = 0; co < Cout; ++co) {
        std::vector<double> acc(static_cast<size_t>(Cin * ws), 0.0);
        std::vector<T> rowacc(static_cast<size_t>(KW));
        for (int64_t n = 0; n < N; ++n) {
            const T* gc = g + (n * Cout + co) * ys;
            for (int64_t od = 0; od < oD; ++od) {
                const int64_t kd_lo = std::max<int64_t>(0, p - od), kd_hi = std::min<int64_t>(KD, D + p - od);
                for (int64_t oh = 0; oh < oH; ++oh) {
                    const int64_t kh_lo = std::max<int64_t>(0, p - oh), kh_hi = std::min<int64_t>(KH, H + p - oh);
                    const T* grow = gc + (od * oH + oh) * oW;
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xc = x + (n * Cin + ci) * xs;
                        double* accc = acc.data() + ci * ws;
                        for (int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                            const int64_t id = od - p + kd;
                            for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                                const int64_t ih = oh - p + kh;
                                const T* xrow = xc + (id * H + ih) * W;
                                for (int64_t kw = 0; kw < KW; ++kw) {
                                    const int64_t lo = std::max<int64_t>(0, p - kw);
                                    const int64_t hi = std::min(oW, W + p - kw);
                                    const T* xp = xrow + kw - p;
                                    T dot = T(0);
#ifdef _OPENMP
#pragma omp simd reduction(+ : dot)
#endif
                                    for (int64_t ow = lo; ow < hi; ++ow) dot += grow[ow] * xp[ow];
                                    rowacc[size_t(kw)] = dot;
                                }
                                double* a = accc + (kd * KH + kh) * KW;
                                for (int64_t kw = 0; kw < KW; ++kw) a[kw] += double(rowacc[size_t(kw)]);
                            }
                        }
                    }
                }
            }
        }
        T* gwc = gw + co * Cin * ws;
        for (int64_t i = 0; i < Cin * ws; ++i) gwc[i] += T(acc[size_t(i)]);
    }
}

template <typename T>
void conv3d_backward_weight_kernel(const T* __restrict__ g, const T* __restrict__ x, T* __restrict__ gw, int64_t N, int64_t Cin, int64_t D, int64_t H,
                                   int64_t W, int64_t Cout, int64_t KD, int64_t KH, int64_t KW, int64_t s, int64_t p,
                                   int64_t oD, int64_t oH, int64_t oW) {
    if (s == 1) {
        conv3d_backward_weight_s1(g, x, gw, N, Cin, D, H, W, Cout, KD, KH, KW, p, oD, oH, oW);
        return;
    }
    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t co = 0; co < Cout; ++co)
        for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t kd = 0; kd < KD; ++kd) {
                const auto rd = tap_range(D, oD, kd, s, p);
                for (int64_t kh = 0; kh < KH; ++kh) {
                    const auto rh = tap_range(H, oH, kh, s, p);
                    for (int64_t kw = 0; kw < KW; ++kw) {
                        const auto rw = tap_range(W, oW, kw, s, p);
                        double acc = 0.0;
                        for (int64_t n = 0; n < N; ++n) {
                            const T* gc = g + (n * Cout + co) * ys;
                            const T* xc = x + (n * Cin + ci) * xs;
                            for (int64_t od = rd.lo; od < rd.hi; ++od) {
                                const int64_t id = od * s - p + kd;
                                for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
                                    const int64_t ih = oh * s - p + kh;
                                    const T* xrow = xc + (id * H + ih) * W;
                                    const T* grow = gc + (od * oH + oh) * oW;
                                    T row = T(0);
                                    if (s == 1) {
                                        const T* xp = xrow + kw - p;
                                        for (int64_t ow = rw.lo; ow < rw.hi; ++ow) row += grow[ow] * xp[ow];
                                    } else {
                                        for (int64_t ow = rw.lo; ow < rw.hi; ++ow)
                                            row += grow[ow] * xrow[ow * s - p + kw];
                                    }
                                    acc += double(row);
                                }
                            }
                        }
                        gw[((co * Cin + ci) * KD + kd) * KH * KW + kh * KW + kw] += T(acc);
                    }
                }
            }
}

}  // namespace detail

// Standard zero-padded 3D convolution, y(p0) = sum_{taps} w * x(p0*s - p + tap).
template <typename T>
Var<T> conv3d(Tape<T>& tape, Var<T> x, Var<T> weight, Var<T> bias, const Conv3dSpec& spec) {
    const auto& xv = tape.val(x);
    const auto& wv = tape.val(weight);
    if (xv.shape.rank != 5) throw std::invalid_argument("conv3d: input must be rank 5, got " + xv.shape.str());
    if (xv.shape[1] != spec.in_channels)
        throw std::invalid_argument("conv3d: input channels " + std::to_string(xv.shape[1]) + " != spec " +
                                    std::to_string(spec.in_channels));
    const Shape expect_w{spec.out_channels, spec.in_channels, spec.kd, spec.kh, spec.kw};
    if (wv.shape != expect_w)
        throw std::invalid_argument("conv3d: weight shape " + wv.shape.str() + " != " + expect_w.str());
    const bool has_bias = bias.valid();
    if (has_bias && tape.val(bias).numel() != spec.out_channels)
        throw std::invalid_argument("conv3d: bias length mismatch");

    const int64_t N = xv.shape[0], Cin = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const int64_t oD = spec.out_extent(D, spec.kd), oH = spec.out_extent(H, spec.kh), oW = spec.out_extent(W, spec.kw);
    if (oD < 1 || oH < 1 || oW < 1)
        throw std::invalid_argument("conv3d: degenerate output extent for input " + xv.shape.str());

    Tensor<T> out(Shape{N, spec.out_channels, oD, oH, oW});
    detail::conv3d_forward_kernel(xv.ptr(), wv.ptr(), has_bias ? tape.val(bias).ptr() : nullptr, out.ptr(), N, Cin, D,
                                  H, W, spec.out_channels, spec.kd, spec.kh, spec.kw, spec.stride, spec.pad, oD, oH,
                                  oW);
    bool needs = tape.needs_grad(x) || tape.needs_grad(weight) || (has_bias && tape.needs_grad(bias));
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([x, weight, bias, o, spec, has_bias, N, Cin, D, H, W, oD, oH, oW](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            if (tp.needs_grad(x))
                detail::conv3d_backward_input_kernel(g.ptr(), tp.val(weight).ptr(), tp.grad(x).ptr(), N, Cin, D, H, W,
                                                     spec.out_channels, spec.kd, spec.kh, spec.kw, spec.stride,
                                                     spec.pad, oD, oH, oW);
            if (tp.needs_grad(weight))
                detail::conv3d_backward_weight_kernel(g.ptr(), tp.val(x).ptr(), tp.grad(weight).ptr(), N, Cin, D, H, W,
                                                      spec.out_channels, spec.kd, spec.kh, spec.kw, spec.stride,
                                                      spec.pad, oD, oH, oW);
            if (has_bias && tp.needs_grad(bias)) {
                auto& gb = tp.grad(bias);
                const int64_t ys = oD * oH * oW;
                for (int64_t co = 0; co < spec.out_channels; ++co) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gc = g.ptr() + (n * spec.out_channels + co) * ys;
                        for (int64_t i = 0; i < ys; ++i) acc += double(gc[i]);
                    }
                    gb[co] += T(acc);
                }
            }
        });
    return o;
}

// Transposed convolution (adjoint of a strided conv3d). Weight layout is
// [Cin, Cout, kd, kh, kw]; output extent per axis is (in-1)*stride - 2*pad + k.
template <typename T>
Var<T> conv_transpose3d(Tape<T>& tape, Var<T> x, Var<T> weight, Var<T> bias, int stride, int pad) {
    const auto& xv = tape.val(x);
    const auto& wv = tape.val(weight);
    if (xv.shape.rank != 5 || wv.shape.rank != 5)
        throw std::invalid_argument("conv_transpose3d: rank-5 input and weight expected");
    if (xv.shape[1] != wv.shape[0])
        throw std::invalid_argument("conv_transpose3d: input channels " + std::to_string(xv.shape[1]) +
                                    " != weight Cin " + std::to_string(wv.shape[0]));
    const int64_t N = xv.shape[0], Cin = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const int64_t Cout = wv.shape[1], KD = wv.shape[2], KH = wv.shape[3], KW = wv.shape[4];
    const int64_t s = stride, p = pad;
    const int64_t oD = (D - 1) * s - 2 * p + KD, oH = (H - 1) * s - 2 * p + KH, oW = (W - 1) * s - 2 * p + KW;
    if (oD < 1 || oH < 1 || oW < 1) throw std::invalid_argument("conv_transpose3d: degenerate output extent");
    const bool has_bias = bias.valid();
    if (has_bias && tape.val(bias).numel() != Cout) throw std::invalid_argument("conv_transpose3d: bias mismatch");

    const int64_t xs = D * H * W, ys = oD * oH * oW, ws = KD * KH * KW;
    Tensor<T> out(Shape{N, Cout, oD, oH, oW});
    {
        const T* px = xv.ptr();
        const T* pw = wv.ptr();
        const T* pb = has_bias ? tape.val(bias).ptr() : nullptr;
        T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                T* yc = py + (n * Cout + co) * ys;
                const T bv = pb ? pb[co] : T(0);
                for (int64_t i = 0; i < ys; ++i) yc[i] = bv;
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    const T* xc = px + (n * Cin + ci) * xs;
                    const T* wc = pw + (ci * Cout + co) * ws;
                    for (int64_t kd = 0; kd < KD; ++kd) {
                        const auto rd = detail::tap_range(oD, D, kd, s, p);
                        for (int64_t kh = 0; kh < KH; ++kh) {
                            const auto rh = detail::tap_range(oH, H, kh, s, p);
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const T wvv = wc[(kd * KH + kh) * KW + kw];
                                if (wvv == T(0)) continue;
                                const auto rw = detail::tap_range(oW, W, kw, s, p);
                                for (int64_t id = rd.lo; id < rd.hi; ++id) {
                                    const int64_t od = id * s - p + kd;
                                    for (int64_t ih = rh.lo; ih < rh.hi; ++ih) {
                                        const int64_t oh = ih * s - p + kh;
                                        const T* xrow = xc + (id * H + ih) * W;
                                        T* yrow = yc + (od * oH + oh) * oW;
                                        for (int64_t iw = rw.lo; iw < rw.hi; ++iw)
                                            yrow[iw * s - p + kw] += wvv * xrow[iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
    }
    bool needs = tape.needs_grad(x) || tape.needs_grad(weight) || (has_bias && tape.needs_grad(bias));
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([x, weight, bias, o, N, Cin, Cout, D, H, W, KD, KH, KW, s, p, oD, oH, oW, xs, ys, ws,
                     has_bias](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            const T* pg = g.ptr();
            if (tp.needs_grad(x)) {
                // dx is a strided conv of dy with the same weights
                T* gx = tp.grad(x).ptr();
                const T* pw = tp.val(weight).ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        T* gxc = gx + (n * Cin + ci) * xs;
                        for (int64_t co = 0; co < Cout; ++co) {
                            const T* gc = pg + (n * Cout + co) * ys;
                            const T* wc = pw + (ci * Cout + co) * ws;
                            for (int64_t kd = 0; kd < KD; ++kd) {
                                const auto rd = detail::tap_range(oD, D, kd, s, p);
                                for (int64_t kh = 0; kh < KH; ++kh) {
                                    const auto rh = detail::tap_range(oH, H, kh, s, p);
                                    for (int64_t kw = 0; kw < KW; ++kw) {
                                        const T wvv = wc[(kd * KH + kh) * KW + kw];
                                        if (wvv == T(0)) continue;
                                        const auto rw = detail::tap_range(oW, W, kw, s, p);
                                        for (int64_t id = rd.lo; id < rd.hi; ++id) {
                                            const int64_t od = id * s - p + kd;
                                            for (int64_t ih = rh.lo; ih < rh.hi; ++ih) {
                                                const int64_t oh = ih * s - p + kh;
                                                T* gxrow = gxc + (id * H + ih) * W;
                                                const T* grow = gc + (od * oH + oh) * oW;
                                                for (int64_t iw = rw.lo; iw < rw.hi; ++iw)
                                                    gxrow[iw] += wvv * grow[iw * s - p + kw];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
            }
            if (tp.needs_grad(weight)) {
                T* gw = tp.grad(weight).ptr();
                const T* px = tp.val(x).ptr();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t co = 0; co < Cout; ++co)
                        for (int64_t kd = 0; kd < KD; ++kd) {
                            const auto rd = detail::tap_range(oD, D, kd, s, p);
                            for (int64_t kh = 0; kh < KH; ++kh) {
                                const auto rh = detail::tap_range(oH, H, kh, s, p);
                                for (int64_t kw = 0; kw < KW; ++kw) {
                                    const auto rw = detail::tap_range(oW, W, kw, s, p);
                                    double acc = 0.0;
                                    for (int64_t n = 0; n < N; ++n) {
                                        const T* xc = px + (n * Cin + ci) * xs;
                                        const T* gc = pg + (n * Cout + co) * ys;
                                        for (int64_t id = rd.lo; id < rd.hi; ++id) {
                                            const int64_t od = id * s - p + kd;
                                            for (int64_t ih = rh.lo; ih < rh.hi; ++ih) {
                                                const int64_t oh = ih * s - p + kh;
                                                const T* xrow = xc + (id * H + ih) * W;
                                                const T* grow = gc + (od * oH + oh) * oW;
                                                T row = T(0);
                                                for (int64_t iw = rw.lo; iw < rw.hi; ++iw)
                                                    row += xrow[iw] * grow[iw * s - p + kw];
                                                acc += double(row);
                                            }
                                        }
                                    }
                                    gw[((ci * Cout + co) * KD + kd) * KH * KW + kh * KW + kw] += T(acc);
                                }
                            }
                        }
            }
            if (has_bias && tp.needs_grad(bias)) {
                auto& gb = tp.grad(bias);
                for (int64_t co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gc = pg + (n * Cout + co) * ys;
                        for (int64_t i = 0; i < ys; ++i) acc += double(gc[i]);
                    }
                    gb[co] += T(acc);
                }
            }
        });
    return o;
}

// Per-output-voxel count of kernel footprints covering it; uneven counts are
// the checkerboard precondition for mismatched kernel/stride pairs.
template <typename T>
Tensor<T> conv_transpose3d_overlap_counts(int64_t D, int64_t H, int64_t W, int k, int stride, int pad) {
    auto axis_counts = [&](int64_t in, int64_t out) {
        std::vector<int64_t> c(size_t(out), 0);
        for (int64_t i = 0; i < in; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
                const int64_t o = i * stride - pad + kk;
                if (o >= 0 && o < out) ++c[size_t(o)];
            }
        return c;
    };
    const int64_t oD = (D - 1) * stride - 2 * pad + k;
    const int64_t oH = (H - 1) * stride - 2 * pad + k;
    const int64_t oW = (W - 1) * stride - 2 * pad + k;
    auto cd = axis_counts(D, oD), ch = axis_counts(H, oH), cw = axis_counts(W, oW);
    Tensor<T> m(Shape{oD, oH, oW});
    for (int64_t d = 0; d < oD; ++d)
        for (int64_t h = 0; h < oH; ++h)
            for (int64_t w = 0; w < oW; ++w) m[(d * oH + h) * oW + w] = T(cd[size_t(d)] * ch[size_t(h)] * cw[size_t(w)]);
    return m;
}

// Average pooling without padding. Ceil mode clips the trailing window and
// divides by the number of voxels actually covered.
template <typename T>
Var<T> avg_pool3d(Tape<T>& tape, Var<T> x, int kernel, int stride, bool ceil_mode = false) {
    const auto& xv = tape.val(x);
    if (xv.shape.rank != 5) throw std::invalid_argument("avg_pool3d: rank-5 input expected");
    const int64_t N = xv.shape[0], C = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    if (D < kernel || H < kernel || W < kernel)
        throw std::invalid_argument("avg_pool3d: window " + std::to_string(kernel) + " exceeds extent " +
                                    xv.shape.str());
    auto out_extent = [&](int64_t e) {
        return ceil_mode ? ceil_div(e - kernel, stride) + 1 : (e - kernel) / stride + 1;
    };
    const int64_t oD = out_extent(D), oH = out_extent(H), oW = out_extent(W);
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
                const int64_t d0 = od * stride, d1 = std::min<int64_t>(d0 + kernel, D);
                for (int64_t oh = 0; oh < oH; ++oh) {
                    const int64_t h0 = oh * stride, h1 = std::min<int64_t>(h0 + kernel, H);
                    for (int64_t ow = 0; ow < oW; ++ow) {
                        const int64_t w0 = ow * stride, w1 = std::min<int64_t>(w0 + kernel, W);
                        double acc = 0.0;
                        for (int64_t d = d0; d < d1; ++d)
                            for (int64_t h = h0; h < h1; ++h)
                                for (int64_t w = w0; w < w1; ++w) acc += double(xc[(d * H + h) * W + w]);
                        const int64_t count = (d1 - d0) * (h1 - h0) * (w1 - w0);
                        yc[(od * oH + oh) * oW + ow] = T(acc / double(count));
                    }
                }
            }
        }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, N, C, D, H, W, oD, oH, oW, kernel, stride, xs, ys](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            T* gx = tp.grad(x).ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    T* gxc = gx + (n * C + c) * xs;
                    const T* gc = pg + (n * C + c) * ys;
                    for (int64_t od = 0; od < oD; ++od) {
                        const int64_t d0 = od * stride, d1 = std::min<int64_t>(d0 + kernel, D);
                        for (int64_t oh = 0; oh < oH; ++oh) {
                            const int64_t h0 = oh * stride, h1 = std::min<int64_t>(h0 + kernel, H);
                            for (int64_t ow = 0; ow < oW; ++ow) {
                                const int64_t w0 = ow * stride, w1 = std::min<int64_t>(w0 + kernel, W);
                                const int64_t count = (d1 - d0) * (h1 - h0) * (w1 - w0);
                                const T gv = gc[(od * oH + oh) * oW + ow] / T(count);
                                for (int64_t d = d0; d < d1; ++d)
                                    for (int64_t h = h0; h < h1; ++h)
                                        for (int64_t w = w0; w < w1; ++w) gxc[(d * H + h) * W + w] += gv;
                            }
                        }
                    }
                }
        });
    return o;
}

// Global average pooling [N,C,D,H,W] -> [N,C].
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, Var<T> x) {
    const auto& xv = tape.val(x);
    if (xv.shape.rank != 5) throw std::invalid_argument("global_avg_pool: rank-5 input expected");
    const int64_t N = xv.shape[0], C = xv.shape[1];
    const int64_t spatial = xv.shape[2] * xv.shape[3] * xv.shape[4];
    Tensor<T> out(Shape{N, C});
    for (int64_t i = 0; i < N * C; ++i) {
        const T* xc = xv.ptr() + i * spatial;
        double acc = 0.0;
        for (int64_t j = 0; j < spatial; ++j) acc += double(xc[j]);
        out[i] = T(acc / double(spatial));
    }
    Var<T> o = tape.node(std::move(out), tape.needs_grad(x));
    if (tape.needs_grad(o))
        tape.record([x, o, N, C, spatial](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const auto& g = tp.grad(o);
            auto& gx = tp.grad(x);
            for (int64_t i = 0; i < N * C; ++i) {
                const T gv = g[i] / T(spatial);
                T* gxc = gx.ptr() + i * spatial;
                for (int64_t j = 0; j < spatial; ++j) gxc[j] += gv;
            }
        });
    return o;
}

}  // namespace vseg
