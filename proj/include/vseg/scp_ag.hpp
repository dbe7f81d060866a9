#pragma once

#include "conv.hpp"

namespace vseg {

// Spatial-channel parallel attention gate. Encoder features chi are reweighted
// under decoder guidance lambda by the product of a one-channel spatial map
// W_S and a per-channel map W_C, both sigmoid-gated:
//   W_S  = sigmoid(conv_psi(relu(conv_chi(chi) + conv_lam(lambda))))
//   W_C  = sigmoid(linear_chi(avg(chi)) + linear_lam(avg(lambda)))
//   out  = chi * W_S * W_C
template <typename T>
struct ScpAgParams {
    int channels = 0;
    int f_int = 0;  // spatial-branch intermediate channels, C/2 floored at 4
    Parameter<T> conv_chi_w, conv_chi_b;  // 1x1x1, C -> f_int
    Parameter<T> conv_lam_w, conv_lam_b;  // 1x1x1, C -> f_int
    Parameter<T> conv_psi_w, conv_psi_b;  // 1x1x1, f_int -> 1
    Parameter<T> linear_chi_w, linear_chi_b;  // C -> C
    Parameter<T> linear_lam_w, linear_lam_b;  // C -> C

    static ScpAgParams init(int channels, Rng& rng, const std::string& prefix) {
        ScpAgParams p;
        p.channels = channels;
        p.f_int = std::max(channels / 2, 4);
        auto he = [&](Shape s, int fan_in) { return random_normal<T>(s, rng, std::sqrt(2.0 / double(fan_in))); };
        p.conv_chi_w = Parameter<T>(prefix + ".conv_chi.weight", he(Shape{p.f_int, channels, 1, 1, 1}, channels));
        p.conv_chi_b = Parameter<T>(prefix + ".conv_chi.bias", Tensor<T>(Shape{p.f_int}));
        p.conv_lam_w = Parameter<T>(prefix + ".conv_lam.weight", he(Shape{p.f_int, channels, 1, 1, 1}, channels));
        p.conv_lam_b = Parameter<T>(prefix + ".conv_lam.bias", Tensor<T>(Shape{p.f_int}));
        p.conv_psi_w = Parameter<T>(prefix + ".conv_psi.weight", he(Shape{1, p.f_int, 1, 1, 1}, p.f_int));
        p.conv_psi_b = Parameter<T>(prefix + ".conv_psi.bias", Tensor<T>(Shape{1}));
        p.linear_chi_w = Parameter<T>(prefix + ".linear_chi.weight", he(Shape{channels, channels}, channels));
        p.linear_chi_b = Parameter<T>(prefix + ".linear_chi.bias", Tensor<T>(Shape{channels}));
        p.linear_lam_w = Parameter<T>(prefix + ".linear_lam.weight", he(Shape{channels, channels}, channels));
        p.linear_lam_b = Parameter<T>(prefix + ".linear_lam.bias", Tensor<T>(Shape{channels}));
        return p;
    }

    std::vector<Parameter<T>*> all() {
        return {&conv_chi_w, &conv_chi_b, &conv_lam_w, &conv_lam_b, &conv_psi_w,
                &conv_psi_b, &linear_chi_w, &linear_chi_b, &linear_lam_w, &linear_lam_b};
    }
    std::vector<Parameter<T>*> spatial_only() {
        return {&conv_chi_w, &conv_chi_b, &conv_lam_w, &conv_lam_b, &conv_psi_w, &conv_psi_b};
    }
};

template <typename T>
struct GateMaps {
    Var<T> spatial;          // W_S [N,1,D,H,W]
    Var<T> channel;          // W_C [N,C,1,1,1]
    Var<T> spatial_channel;  // W_SC [N,C,D,H,W] broadcast product
};

namespace detail {
template <typename T>
void check_gate_inputs(Tape<T>& tape, Var<T> chi, Var<T> lam, int channels) {
    const Shape cs = tape.shape(chi);
    const Shape ls = tape.shape(lam);
    if (cs != ls)
        throw std::invalid_argument("scp_ag: encoder/decoder feature shapes differ: " + cs.str() + " vs " + ls.str());
    if (cs[1] != channels)
        throw std::invalid_argument("scp_ag: channels " + std::to_string(cs[1]) + " != params " +
                                    std::to_string(channels));
}
}  // namespace detail

template <typename T>
Var<T> spatial_gate(Tape<T>& tape, Var<T> chi, Var<T> lam, ScpAgParams<T>& p) {
    detail::check_gate_inputs(tape, chi, lam, p.channels);
    const auto in_spec = Conv3dSpec::cubic(p.channels, p.f_int, 1);
    Var<T> a = conv3d(tape, chi, tape.param(p.conv_chi_w), tape.param(p.conv_chi_b), in_spec);
    Var<T> b = conv3d(tape, lam, tape.param(p.conv_lam_w), tape.param(p.conv_lam_b), in_spec);
    Var<T> s = relu(tape, add(tape, a, b));
    Var<T> psi = conv3d(tape, s, tape.param(p.conv_psi_w), tape.param(p.conv_psi_b),
                        Conv3dSpec::cubic(p.f_int, 1, 1));
    return sigmoid(tape, psi);
}

template <typename T>
Var<T> channel_gate(Tape<T>& tape, Var<T> chi, Var<T> lam, ScpAgParams<T>& p) {
    detail::check_gate_inputs(tape, chi, lam, p.channels);
    Var<T> ac = global_avg_pool(tape, chi);  // [N, C]
    Var<T> al = global_avg_pool(tape, lam);
    Var<T> mc = linear(tape, ac, tape.param(p.linear_chi_w), tape.param(p.linear_chi_b));
    Var<T> ml = linear(tape, al, tape.param(p.linear_lam_w), tape.param(p.linear_lam_b));
    Var<T> wc = sigmoid(tape, add(tape, mc, ml));
    const Shape s = tape.shape(chi);
    return reshape(tape, wc, Shape{s[0], s[1], 1, 1, 1});
}

template <typename T>
GateMaps<T> scp_ag_maps(Tape<T>& tape, Var<T> chi, Var<T> lam, ScpAgParams<T>& p) {
    GateMaps<T> m;
    m.spatial = spatial_gate(tape, chi, lam, p);
    m.channel = channel_gate(tape, chi, lam, p);
    m.spatial_channel = mul(tape, m.spatial, m.channel);
    return m;
}

template <typename T>
Var<T> scp_ag_apply(Tape<T>& tape, Var<T> chi, Var<T> lam, ScpAgParams<T>& p) {
    GateMaps<T> m = scp_ag_maps(tape, chi, lam, p);
    return mul(tape, chi, m.spatial_channel);
}

// Classical attention gate of Attention U-Net: spatial reweighting only.
template <typename T>
Var<T> attention_gate_apply(Tape<T>& tape, Var<T> chi, Var<T> lam, ScpAgParams<T>& p) {
    return mul(tape, chi, spatial_gate(tape, chi, lam, p));
}

}  // namespace vseg
