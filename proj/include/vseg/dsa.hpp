#pragma once

#include "conv.hpp"
#include "resample.hpp"

namespace vseg {

namespace detail {

// zero-padded trilinear sampling helpers (corners outside the volume
// contribute nothing, matching conv3d's zero padding)
struct ZpCorner {
    int64_t d0, h0, w0;  // floor corner, possibly out of range
    double td, th, tw;
    bool d0_in, d1_in, h0_in, h1_in, w0_in, w1_in;
};

// Per-tap gather plan: flat corner indices (0 when the corner falls outside,
// with zero weight) plus interpolation weights and their coordinate
// derivatives, shared across the channel loop.
struct TapPlan {
    int64_t idx[8];
    double w[8];             // trilinear corner weights
    double dwd[8], dwh[8], dww[8];  // d(weight)/d(coordinate)
};

inline TapPlan make_tap_plan(double zd, double zh, double zw, int64_t D, int64_t H, int64_t W) {
    TapPlan t;
    const double fd = std::floor(zd), fh = std::floor(zh), fw = std::floor(zw);
    const double td = zd - fd, th = zh - fh, tw = zw - fw;
    const int64_t d0 = int64_t(fd), h0 = int64_t(fh), w0 = int64_t(fw);
    const double wd[2] = {1.0 - td, td}, wh[2] = {1.0 - th, th}, ww[2] = {1.0 - tw, tw};
    const double sd[2] = {-1.0, 1.0};
    int k = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx, ++k) {
                const int64_t d = d0 + dz, h = h0 + dy, w = w0 + dx;
                const bool in = d >= 0 && d < D && h >= 0 && h < H && w >= 0 && w < W;
                t.idx[k] = in ? (d * H + h) * W + w : 0;
                t.w[k] = in ? wd[dz] * wh[dy] * ww[dx] : 0.0;
                t.dwd[k] = in ? sd[dz] * wh[dy] * ww[dx] : 0.0;
                t.dwh[k] = in ? wd[dz] * sd[dy] * ww[dx] : 0.0;
                t.dww[k] = in ? wd[dz] * wh[dy] * sd[dx] : 0.0;
            }
    return t;
}

template <typename T>
inline double tap_sample(const T* __restrict__ xc, const TapPlan& t) {
    double acc = 0.0;
    for (int j = 0; j < 8; ++j) acc += t.w[j] * double(xc[t.idx[j]]);
    return acc;
}

inline ZpCorner zp_corner(double zd, double zh, double zw, int64_t D, int64_t H, int64_t W) {
    ZpCorner c;
    const double fd = std::floor(zd), fh = std::floor(zh), fw = std::floor(zw);
    c.td = zd - fd;
    c.th = zh - fh;
    c.tw = zw - fw;
    c.d0 = int64_t(fd);
    c.h0 = int64_t(fh);
    c.w0 = int64_t(fw);
    c.d0_in = c.d0 >= 0 && c.d0 < D;
    c.d1_in = c.d0 + 1 >= 0 && c.d0 + 1 < D;
    c.h0_in = c.h0 >= 0 && c.h0 < H;
    c.h1_in = c.h0 + 1 >= 0 && c.h0 + 1 < H;
    c.w0_in = c.w0 >= 0 && c.w0 < W;
    c.w1_in = c.w0 + 1 >= 0 && c.w0 + 1 < W;
    return c;
}

template <typename T>
double zp_value(const T* xc, const ZpCorner& c, int64_t H, int64_t W, int dz, int dy, int dx) {
    const bool in = (dz ? c.d1_in : c.d0_in) && (dy ? c.h1_in : c.h0_in) && (dx ? c.w1_in : c.w0_in);
    if (!in) return 0.0;
    return double(xc[((c.d0 + dz) * H + (c.h0 + dy)) * W + (c.w0 + dx)]);
}

template <typename T>
double zp_sample(const T* xc, const ZpCorner& c, int64_t H, int64_t W) {
    const double v000 = zp_value(xc, c, H, W, 0, 0, 0), v001 = zp_value(xc, c, H, W, 0, 0, 1);
    const double v010 = zp_value(xc, c, H, W, 0, 1, 0), v011 = zp_value(xc, c, H, W, 0, 1, 1);
    const double v100 = zp_value(xc, c, H, W, 1, 0, 0), v101 = zp_value(xc, c, H, W, 1, 0, 1);
    const double v110 = zp_value(xc, c, H, W, 1, 1, 0), v111 = zp_value(xc, c, H, W, 1, 1, 1);
    return (1 - c.td) * ((1 - c.th) * ((1 - c.tw) * v000 + c.tw * v001) + c.th * ((1 - c.tw) * v010 + c.tw * v011)) +
           c.td * ((1 - c.th) * ((1 - c.tw) * v100 + c.tw * v101) + c.th * ((1 - c.tw) * v110 + c.tw * v111));
}

template <typename T>
void zp_scatter(T* gxc, const ZpCorner& c, int64_t H, int64_t W, double gv) {
    const double wd[2] = {1 - c.td, c.td}, wh[2] = {1 - c.th, c.th}, ww[2] = {1 - c.tw, c.tw};
    const bool din[2] = {c.d0_in, c.d1_in}, hin[2] = {c.h0_in, c.h1_in}, win[2] = {c.w0_in, c.w1_in};
    for (int dz = 0; dz < 2; ++dz) {
        if (!din[dz]) continue;
        for (int dy = 0; dy < 2; ++dy) {
            if (!hin[dy]) continue;
            for (int dx = 0; dx < 2; ++dx) {
                if (!win[dx]) continue;
                gxc[((c.d0 + dz) * H + (c.h0 + dy)) * W + (c.w0 + dx)] += T(gv * wd[dz] * wh[dy] * ww[dx]);
            }
        }
    }
}

// partial derivatives of zp_sample with respect to the three coordinates
template <typename T>
void zp_coord_grad(const T* xc, const ZpCorner& c, int64_t H, int64_t W, double& pd, double& ph, double& pw) {
    const double v000 = zp_value(xc, c, H, W, 0, 0, 0), v001 = zp_value(xc, c, H, W, 0, 0, 1);
    const double v010 = zp_value(xc, c, H, W, 0, 1, 0), v011 = zp_value(xc, c, H, W, 0, 1, 1);
    const double v100 = zp_value(xc, c, H, W, 1, 0, 0), v101 = zp_value(xc, c, H, W, 1, 0, 1);
    const double v110 = zp_value(xc, c, H, W, 1, 1, 0), v111 = zp_value(xc, c, H, W, 1, 1, 1);
    const double c00 = (1 - c.tw) * v000 + c.tw * v001, c01 = (1 - c.tw) * v010 + c.tw * v011;
    const double c10 = (1 - c.tw) * v100 + c.tw * v101, c11 = (1 - c.tw) * v110 + c.tw * v111;
    pd = (1 - c.th) * (c10 - c00) + c.th * (c11 - c01);
    ph = (1 - c.td) * (c01 - c00) + c.td * (c11 - c10);
    pw = (1 - c.td) * ((1 - c.th) * (v001 - v000) + c.th * (v011 - v010)) +
         c.td * ((1 - c.th) * (v101 - v100) + c.th * (v111 - v110));
}

}  // namespace detail

// Deformable 3D convolution: each kernel tap samples the input at a learned
// fractional displacement from its regular-grid position,
//   y(p0) = sum_taps w(tap) * x(p0*s - p + tap + delta(tap, p0)),
// with trilinear sampling. Corners outside the volume contribute zero, the
// same padding rule as conv3d, so a zero offset field reproduces conv3d
// exactly and arbitrarily large offsets never read out of bounds. Offsets
// layout is [N, 3*k^3, oD, oH, oW], channels (3t+0, 3t+1, 3t+2) =
// (dd, dh, dw) of tap t, taps ordered (td, th, tw) row-major.
template <typename T>
Var<T> deform_conv3d(Tape<T>& tape, Var<T> x, Var<T> weight, Var<T> offsets, const Conv3dSpec& spec) {
    const auto& xv = tape.val(x);
    const auto& wv = tape.val(weight);
    const auto& ov = tape.val(offsets);
    if (xv.shape.rank != 5) throw std::invalid_argument("deform_conv3d: rank-5 input expected");
    if (xv.shape[1] != spec.in_channels)
        throw std::invalid_argument("deform_conv3d: input channels " + std::to_string(xv.shape[1]) + " != spec " +
                                    std::to_string(spec.in_channels));
    if (spec.kd != spec.kh || spec.kd != spec.kw)
        throw std::invalid_argument("deform_conv3d: cubic kernels only");
    const int64_t K = spec.kd, K3 = K * K * K;
    const Shape expect_w{spec.out_channels, spec.in_channels, K, K, K};
    if (wv.shape != expect_w)
        throw std::invalid_argument("deform_conv3d: weight shape " + wv.shape.str() + " != " + expect_w.str());
    const int64_t N = xv.shape[0], Cin = xv.shape[1], D = xv.shape[2], H = xv.shape[3], W = xv.shape[4];
    const int64_t oD = spec.out_extent(D, int(K)), oH = spec.out_extent(H, int(K)), oW = spec.out_extent(W, int(K));
    if (oD < 1 || oH < 1 || oW < 1) throw std::invalid_argument("deform_conv3d: degenerate output extent");
    const Shape expect_o{N, 3 * K3, oD, oH, oW};
    if (ov.shape != expect_o)
        throw std::invalid_argument("deform_conv3d: offsets shape " + ov.shape.str() + " != " + expect_o.str());

    const int64_t Cout = spec.out_channels, s = spec.stride, p = spec.pad;
    const int64_t xs = D * H * W, os = oD * oH * oW, ws = Cin * K3;

    Tensor<T> out(Shape{N, Cout, oD, oH, oW});
    {
        const T* px = xv.ptr();
        const T* pw = wv.ptr();
        const T* po = ov.ptr();
        T* py = out.ptr();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
        for (int64_t n = 0; n < N; ++n)
            for (int64_t od = 0; od < oD; ++od) {
                std::vector<detail::TapPlan> plans(static_cast<size_t>(K3));
                std::vector<double> vals(static_cast<size_t>(Cin * K3));
                for (int64_t oh = 0; oh < oH; ++oh)
                    for (int64_t ow = 0; ow < oW; ++ow) {
                        const int64_t pos = (od * oH + oh) * oW + ow;
                        for (int64_t t = 0; t < K3; ++t) {
                            const int64_t td = t / (K * K), th = (t / K) % K, tw = t % K;
                            const double zd = double(od * s - p + td) + double(po[(n * 3 * K3 + 3 * t + 0) * os + pos]);
                            const double zh = double(oh * s - p + th) + double(po[(n * 3 * K3 + 3 * t + 1) * os + pos]);
                            const double zw = double(ow * s - p + tw) + double(po[(n * 3 * K3 + 3 * t + 2) * os + pos]);
                            plans[size_t(t)] = detail::make_tap_plan(zd, zh, zw, D, H, W);
                        }
                        for (int64_t ci = 0; ci < Cin; ++ci) {
                            const T* xc = px + (n * Cin + ci) * xs;
                            for (int64_t t = 0; t < K3; ++t)
                                vals[size_t(ci * K3 + t)] = detail::tap_sample(xc, plans[size_t(t)]);
                        }
                        for (int64_t co = 0; co < Cout; ++co) {
                            const T* wc = pw + co * ws;
                            double acc = 0.0;
                            for (int64_t i = 0; i < ws; ++i) acc += double(wc[i]) * vals[size_t(i)];
                            py[(n * Cout + co) * os + pos] = T(acc);
                        }
                    }
            }
    }
    bool needs = tape.needs_grad(x) || tape.needs_grad(weight) || tape.needs_grad(offsets);
    Var<T> o = tape.node(std::move(out), needs);
    if (tape.needs_grad(o))
        tape.record([x, weight, offsets, o, N, Cin, Cout, D, H, W, K, K3, s, p, oD, oH, oW, xs, os,
                     ws](Tape<T>& tp) {
            if (!tp.has_grad(o)) return;
            const T* pg = tp.grad(o).ptr();
            const T* px = tp.val(x).ptr();
            const T* pw = tp.val(weight).ptr();
            const T* po = tp.val(offsets).ptr();
            const bool nx = tp.needs_grad(x), nw = tp.needs_grad(weight), no = tp.needs_grad(offsets);
            T* gx = nx ? tp.grad(x).ptr() : nullptr;
            T* go = no ? tp.grad(offsets).ptr() : nullptr;
            // fixed chunking over (sample, depth range): per-chunk partials
            // keep the scattered dx and the shared dw race-free with a
            // thread-count-independent combine order
            const int64_t kChunksPerSample = std::min<int64_t>(4, oD);
            const int64_t chunks = N * kChunksPerSample;
            std::vector<std::vector<double>> dw_partial(static_cast<size_t>(chunks));
            std::vector<std::vector<T>> dx_partial(static_cast<size_t>(chunks));
            if (nw)
                for (auto& v : dw_partial) v.assign(size_t(Cout * ws), 0.0);
            if (nx)
                for (auto& v : dx_partial) v.assign(size_t(Cin * xs), T(0));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t chunk = 0; chunk < chunks; ++chunk) {
                const int64_t n = chunk / kChunksPerSample;
                const int64_t slice = chunk % kChunksPerSample;
                const int64_t od_lo = slice * oD / kChunksPerSample;
                const int64_t od_hi = (slice + 1) * oD / kChunksPerSample;
                std::vector<detail::TapPlan> plans(static_cast<size_t>(K3));
                std::vector<double> vals(static_cast<size_t>(Cin * K3));
                std::vector<double> dldv(static_cast<size_t>(Cin * K3));
                double* dw = nw ? dw_partial[size_t(chunk)].data() : nullptr;
                T* dxc = nx ? dx_partial[size_t(chunk)].data() : nullptr;
                for (int64_t od = od_lo; od < od_hi; ++od)
                    for (int64_t oh = 0; oh < oH; ++oh)
                        for (int64_t ow = 0; ow < oW; ++ow) {
                            const int64_t pos = (od * oH + oh) * oW + ow;
                            for (int64_t t = 0; t < K3; ++t) {
                                const int64_t td = t / (K * K), th = (t / K) % K, tw = t % K;
                                const double zd =
                                    double(od * s - p + td) + double(po[(n * 3 * K3 + 3 * t + 0) * os + pos]);
                                const double zh =
                                    double(oh * s - p + th) + double(po[(n * 3 * K3 + 3 * t + 1) * os + pos]);
                                const double zw =
                                    double(ow * s - p + tw) + double(po[(n * 3 * K3 + 3 * t + 2) * os + pos]);
                                plans[size_t(t)] = detail::make_tap_plan(zd, zh, zw, D, H, W);
                            }
                            if (nw || no)
                                for (int64_t ci = 0; ci < Cin; ++ci) {
                                    const T* xc = px + (n * Cin + ci) * xs;
                                    for (int64_t t = 0; t < K3; ++t)
                                        vals[size_t(ci * K3 + t)] = detail::tap_sample(xc, plans[size_t(t)]);
                                }
                            std::fill(dldv.begin(), dldv.end(), 0.0);
                            for (int64_t co = 0; co < Cout; ++co) {
                                const double g = double(pg[(n * Cout + co) * os + pos]);
                                if (g == 0.0) continue;
                                const T* wc = pw + co * ws;
                                for (int64_t i = 0; i < ws; ++i) dldv[size_t(i)] += g * double(wc[i]);
                                if (nw) {
                                    double* dwc = dw + co * ws;
                                    for (int64_t i = 0; i < ws; ++i) dwc[i] += g * vals[size_t(i)];
                                }
                            }
                            if (!nx && !no) continue;
                            for (int64_t t = 0; t < K3; ++t) {
                                const detail::TapPlan& c = plans[size_t(t)];
                                double dzd = 0.0, dzh = 0.0, dzw = 0.0;
                                for (int64_t ci = 0; ci < Cin; ++ci) {
                                    const double gv = dldv[size_t(ci * K3 + t)];
                                    if (gv == 0.0) continue;
                                    const T* xc = px + (n * Cin + ci) * xs;
                                    if (nx) {
                                        T* gxc = dxc + ci * xs;
                                        for (int j = 0; j < 8; ++j) gxc[c.idx[j]] += T(gv * c.w[j]);
                                    }
                                    if (no)
                                        for (int j = 0; j < 8; ++j) {
                                            const double v = double(xc[c.idx[j]]);
                                            dzd += gv * c.dwd[j] * v;
                                            dzh += gv * c.dwh[j] * v;
                                            dzw += gv * c.dww[j] * v;
                                        }
                                }
                                if (no) {
                                    go[(n * 3 * K3 + 3 * t + 0) * os + pos] += T(dzd);
                                    go[(n * 3 * K3 + 3 * t + 1) * os + pos] += T(dzh);
                                    go[(n * 3 * K3 + 3 * t + 2) * os + pos] += T(dzw);
                                }
                            }
                        }
            }
            if (nw) {
                auto& gw = tp.grad(weight);
                for (int64_t chunk = 0; chunk < chunks; ++chunk) {
                    const double* dw = dw_partial[size_t(chunk)].data();
                    for (int64_t i = 0; i < Cout * ws; ++i) gw[i] += T(dw[i]);
                }
            }
            if (nx)
                for (int64_t chunk = 0; chunk < chunks; ++chunk) {
                    const int64_t n = chunk / kChunksPerSample;
                    const T* dxc = dx_partial[size_t(chunk)].data();
                    T* gxn = gx + n * Cin * xs;
                    for (int64_t i = 0; i < Cin * xs; ++i) gxn[i] += dxc[i];
                }
        });
    return o;
}

// Deformable kernel bundle: convolution weights plus the offset-predicting
// conv. Zero-initialized predictor means the operator starts as a plain conv3d.
template <typename T>
struct DeformConv3dParams {
    Conv3dSpec spec;         // main conv (no bias)
    Conv3dSpec offset_spec;  // predictor conv, Cin -> 3*k^3
    Parameter<T> weight;
    Parameter<T> offset_w, offset_b;

    static DeformConv3dParams init(int cin, int cout, int k, Rng& rng, const std::string& prefix) {
        DeformConv3dParams p;
        p.spec = Conv3dSpec::cubic(cin, cout, k, 1, k / 2, false);
        const int oc = 3 * k * k * k;
        p.offset_spec = Conv3dSpec::cubic(cin, oc, k, 1, k / 2);
        p.weight = Parameter<T>(prefix + ".weight",
                                random_normal<T>(Shape{cout, cin, k, k, k}, rng, std::sqrt(2.0 / double(cin * k * k * k))));
        p.offset_w = Parameter<T>(prefix + ".offset.weight", Tensor<T>(Shape{oc, cin, k, k, k}, T(0)));
        p.offset_b = Parameter<T>(prefix + ".offset.bias", Tensor<T>(Shape{oc}, T(0)));
        return p;
    }

    std::vector<Parameter<T>*> all() { return {&weight, &offset_w, &offset_b}; }
};

template <typename T>
Var<T> deform_conv3d_predicted(Tape<T>& tape, Var<T> x, DeformConv3dParams<T>& p) {
    Var<T> offsets = conv3d(tape, x, tape.param(p.offset_w), tape.param(p.offset_b), p.offset_spec);
    return deform_conv3d(tape, x, tape.param(p.weight), offsets, p.spec);
}

// Deformable Squeeze-and-Attention decoder block.
//   chi_res  = DefConv(relu(Conv(chi_in)))
//   chi_attn = Upsample(Conv2(relu(Conv1(AvgPool(chi_in)))))
//   out      = chi_attn * chi_res + chi_attn        (prose form, default)
// The pooling is the "incomplete" kind: kernel-2 stride-2 ceil mode, restored
// to the exact input extent by trilinear resize. No sigmoid on chi_attn.
template <typename T>
struct DsaParams {
    int in_channels = 0;   // 2C (gated skip concat upsampled decoder feature)
    int out_channels = 0;  // C
    Parameter<T> fuse_w, fuse_b;    // 3x3x3, 2C -> C
    Parameter<T> fuse_ng, fuse_nb;  // instance norm after the fuse conv
    DeformConv3dParams<T> deform;   // 3x3x3, C -> C
    Parameter<T> attn1_w, attn1_b;  // 3x3x3, 2C -> C
    Parameter<T> attn1_ng, attn1_nb;
    Parameter<T> attn2_w, attn2_b;  // 3x3x3, C -> C
    bool literal_eq10_gate = false;  // gate the fused input features instead of chi_res

    static DsaParams init(int in_ch, int out_ch, Rng& rng, const std::string& prefix, bool literal = false) {
        DsaParams p;
        p.in_channels = in_ch;
        p.out_channels = out_ch;
        p.literal_eq10_gate = literal;
        auto he = [&](Shape s, int fan_in) { return random_normal<T>(s, rng, std::sqrt(2.0 / double(fan_in))); };
        p.fuse_w = Parameter<T>(prefix + ".fuse.weight", he(Shape{out_ch, in_ch, 3, 3, 3}, in_ch * 27));
        p.fuse_b = Parameter<T>(prefix + ".fuse.bias", Tensor<T>(Shape{out_ch}));
        p.fuse_ng = Parameter<T>(prefix + ".fuse.norm.gamma", Tensor<T>(Shape{out_ch}, T(1)));
        p.fuse_nb = Parameter<T>(prefix + ".fuse.norm.beta", Tensor<T>(Shape{out_ch}));
        p.deform = DeformConv3dParams<T>::init(out_ch, out_ch, 3, rng, prefix + ".deform");
        p.attn1_w = Parameter<T>(prefix + ".attn1.weight", he(Shape{out_ch, in_ch, 3, 3, 3}, in_ch * 27));
        p.attn1_b = Parameter<T>(prefix + ".attn1.bias", Tensor<T>(Shape{out_ch}));
        p.attn1_ng = Parameter<T>(prefix + ".attn1.norm.gamma", Tensor<T>(Shape{out_ch}, T(1)));
        p.attn1_nb = Parameter<T>(prefix + ".attn1.norm.beta", Tensor<T>(Shape{out_ch}));
        p.attn2_w = Parameter<T>(prefix + ".attn2.weight", he(Shape{out_ch, out_ch, 3, 3, 3}, out_ch * 27));
        p.attn2_b = Parameter<T>(prefix + ".attn2.bias", Tensor<T>(Shape{out_ch}));
        return p;
    }

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> v{&fuse_w,  &fuse_b,  &fuse_ng,  &fuse_nb,  &attn1_w,
                                     &attn1_b, &attn1_ng, &attn1_nb, &attn2_w, &attn2_b};
        for (auto* q : deform.all()) v.push_back(q);
        return v;
    }
};

template <typename T>
Var<T> dsa_forward(Tape<T>& tape, Var<T> chi_in, DsaParams<T>& p) {
    const Shape s = tape.shape(chi_in);
    if (s[1] != p.in_channels)
        throw std::invalid_argument("dsa_forward: input channels " + std::to_string(s[1]) + " != " +
                                    std::to_string(p.in_channels));
    Var<T> fused = relu(tape, instance_norm3d(tape,
                                              conv3d(tape, chi_in, tape.param(p.fuse_w), tape.param(p.fuse_b),
                                                     Conv3dSpec::cubic(p.in_channels, p.out_channels, 3, 1, 1)),
                                              tape.param(p.fuse_ng), tape.param(p.fuse_nb)));
    Var<T> chi_res = deform_conv3d_predicted(tape, fused, p.deform);

    Var<T> pooled = avg_pool3d(tape, chi_in, 2, 2, /*ceil_mode=*/true);
    Var<T> a1 = relu(tape, instance_norm3d(tape,
                                           conv3d(tape, pooled, tape.param(p.attn1_w), tape.param(p.attn1_b),
                                                  Conv3dSpec::cubic(p.in_channels, p.out_channels, 3, 1, 1)),
                                           tape.param(p.attn1_ng), tape.param(p.attn1_nb)));
    Var<T> a2 = conv3d(tape, a1, tape.param(p.attn2_w), tape.param(p.attn2_b),
                       Conv3dSpec::cubic(p.out_channels, p.out_channels, 3, 1, 1));
    Var<T> chi_attn = trilinear_resize(tape, a2, s[2], s[3], s[4]);

    Var<T> gated = p.literal_eq10_gate ? mul(tape, chi_attn, fused) : mul(tape, chi_attn, chi_res);
    return add(tape, gated, chi_attn);
}

}  // namespace vseg
