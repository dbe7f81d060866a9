#pragma once

#include "dsa.hpp"
#include "onsampling.hpp"
#include "scp_ag.hpp"

namespace vseg {

enum class UpsamplerKind { trilinear, transposed_conv, subpixel_conv, onsampling };
enum class GateKind { none, attention_gate, scp_ag };
enum class DecoderBlockKind { basic, residual, basic_deform, residual_deform, dsa };

inline const char* to_string(UpsamplerKind k) {
    switch (k) {
        case UpsamplerKind::trilinear: return "trilinear";
        case UpsamplerKind::transposed_conv: return "transposed_conv";
        case UpsamplerKind::subpixel_conv: return "subpixel_conv";
        default: return "onsampling";
    }
}
inline const char* to_string(GateKind k) {
    switch (k) {
        case GateKind::none: return "none";
        case GateKind::attention_gate: return "attention_gate";
        default: return "scp_ag";
    }
}
inline const char* to_string(DecoderBlockKind k) {
    switch (k) {
        case DecoderBlockKind::basic: return "basic";
        case DecoderBlockKind::residual: return "residual";
        case DecoderBlockKind::basic_deform: return "basic_deform";
        case DecoderBlockKind::residual_deform: return "residual_deform";
        default: return "dsa";
    }
}

inline UpsamplerKind upsampler_from_string(const std::string& s) {
    if (s == "trilinear") return UpsamplerKind::trilinear;
    if (s == "transposed_conv") return UpsamplerKind::transposed_conv;
    if (s == "subpixel_conv") return UpsamplerKind::subpixel_conv;
    if (s == "onsampling") return UpsamplerKind::onsampling;
    throw std::invalid_argument("unknown upsampler: " + s);
}
inline GateKind gate_from_string(const std::string& s) {
    if (s == "none") return GateKind::none;
    if (s == "attention_gate") return GateKind::attention_gate;
    if (s == "scp_ag") return GateKind::scp_ag;
    throw std::invalid_argument("unknown gate: " + s);
}
inline DecoderBlockKind decoder_block_from_string(const std::string& s) {
    if (s == "basic") return DecoderBlockKind::basic;
    if (s == "residual") return DecoderBlockKind::residual;
    if (s == "basic_deform") return DecoderBlockKind::basic_deform;
    if (s == "residual_deform") return DecoderBlockKind::residual_deform;
    if (s == "dsa") return DecoderBlockKind::dsa;
    throw std::invalid_argument("unknown decoder block: " + s);
}

struct ModelConfig {
    int in_channels = 1;
    int base_channels = 8;
    int depth = 5;  // encoder stages; strides 1 .. 2^(depth-1)
    UpsamplerKind upsampler = UpsamplerKind::onsampling;
    GateKind gate = GateKind::scp_ag;
    DecoderBlockKind decoder_block = DecoderBlockKind::dsa;
    int num_classes = 4;
    int patch_size = 48;
    bool dsa_literal_gate = false;

    int max_stride() const { return 1 << (depth - 1); }

    void validate() const {
        if (depth < 2 || depth > 6) throw std::invalid_argument("ModelConfig: depth must be in [2,6]");
        if (base_channels < 1 || num_classes < 2 || in_channels < 1)
            throw std::invalid_argument("ModelConfig: bad channel/class counts");
        if (patch_size % max_stride() != 0)
            throw std::invalid_argument("ModelConfig: patch size " + std::to_string(patch_size) +
                                        " not divisible by " + std::to_string(max_stride()));
    }
};

template <typename T>
struct ConvLayer {
    Conv3dSpec spec;
    Parameter<T> w, b;

    static ConvLayer init(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng, const std::string& name,
                          bool zero_weights = false) {
        ConvLayer l;
        l.spec = Conv3dSpec::cubic(cin, cout, k, stride, pad, bias);
        l.w = Parameter<T>(name + ".weight",
                           zero_weights ? Tensor<T>(Shape{cout, cin, k, k, k}, T(0))
                                        : random_normal<T>(Shape{cout, cin, k, k, k}, rng,
                                                           std::sqrt(2.0 / double(cin * k * k * k))));
        if (bias) l.b = Parameter<T>(name + ".bias", Tensor<T>(Shape{cout}, T(0)));
        return l;
    }

    bool valid() const { return w.numel() > 0; }

    Var<T> apply(Tape<T>& t, Var<T> x) {
        return conv3d(t, x, t.param(w), spec.has_bias ? t.param(b) : Var<T>{}, spec);
    }

    void collect(std::vector<std::pair<std::string, Parameter<T>*>>& out) {
        out.emplace_back(w.name, &w);
        if (spec.has_bias) out.emplace_back(b.name, &b);
    }
};

// conv followed by instance normalization; the norm keeps every block
// output at unit scale, which the multiplicative decoder paths rely on
template <typename T>
struct NormedConv {
    ConvLayer<T> conv;
    Parameter<T> gamma, beta;

    static NormedConv init(int cin, int cout, int k, int stride, int pad, Rng& rng, const std::string& name) {
        NormedConv l;
        l.conv = ConvLayer<T>::init(cin, cout, k, stride, pad, true, rng, name);
        l.gamma = Parameter<T>(name + ".norm.gamma", Tensor<T>(Shape{cout}, T(1)));
        l.beta = Parameter<T>(name + ".norm.beta", Tensor<T>(Shape{cout}, T(0)));
        return l;
    }

    bool valid() const { return conv.valid(); }

    Var<T> apply(Tape<T>& t, Var<T> x) {
        return instance_norm3d(t, conv.apply(t, x), t.param(gamma), t.param(beta));
    }

    void collect(std::vector<std::pair<std::string, Parameter<T>*>>& out) {
        conv.collect(out);
        out.emplace_back(gamma.name, &gamma);
        out.emplace_back(beta.name, &beta);
    }
};

// two (conv + instance norm + relu) units with an identity skip
template <typename T>
struct ResBlock {
    NormedConv<T> conv1, conv2;

    static ResBlock init(int ch, Rng& rng, const std::string& name) {
        ResBlock b;
        b.conv1 = NormedConv<T>::init(ch, ch, 3, 1, 1, rng, name + ".conv1");
        b.conv2 = NormedConv<T>::init(ch, ch, 3, 1, 1, rng, name + ".conv2");
        return b;
    }

    Var<T> apply(Tape<T>& t, Var<T> x) {
        Var<T> y = relu(t, conv1.apply(t, x));
        return relu(t, add(t, conv2.apply(t, y), x));
    }

    void collect(std::vector<std::pair<std::string, Parameter<T>*>>& out) {
        conv1.collect(out);
        conv2.collect(out);
    }
};

// one decoder stage: upsample, gate the skip, concat, extract, predict
template <typename T>
struct DecoderLevel {
    int c_hi = 0, c_lo = 0;
    UpsamplerKind upsampler{};
    GateKind gate{};
    DecoderBlockKind block{};

    // upsampler variants
    NormedConv<T> reduce;                // 1x1x1 c_hi -> c_lo (trilinear, onsampling)
    OnsamplingConfig ons_cfg{};
    OnsamplingParams<T> ons;
    Parameter<T> transpose_w, transpose_b;  // [c_hi, c_lo, 4,4,4], stride 2, pad 1
    ConvLayer<T> subpixel;                  // 3x3x3 c_hi -> c_lo*8

    // gate
    ScpAgParams<T> ag;

    // block variants
    NormedConv<T> blk_conv1;  // 3x3x3 2c_lo -> c_lo
    NormedConv<T> blk_conv2;  // 3x3x3 c_lo -> c_lo (basic/residual)
    DeformConv3dParams<T> blk_deform;  // second conv replacement
    ConvLayer<T> blk_proj;    // 1x1x1 2c_lo -> c_lo (residual variants)
    DsaParams<T> dsa;

    ConvLayer<T> head;  // 1x1x1 c_lo -> classes

    static DecoderLevel init(const ModelConfig& cfg, int level_channels, Rng& rng, const std::string& name) {
        DecoderLevel d;
        d.c_lo = level_channels;
        d.c_hi = level_channels * 2;
        d.upsampler = cfg.upsampler;
        d.gate = cfg.gate;
        d.block = cfg.decoder_block;

        switch (cfg.upsampler) {
            case UpsamplerKind::trilinear:
            case UpsamplerKind::onsampling:
                d.reduce = NormedConv<T>::init(d.c_hi, d.c_lo, 1, 1, 0, rng, name + ".reduce");
                break;
            case UpsamplerKind::transposed_conv: {
                d.transpose_w = Parameter<T>(name + ".transpose.weight",
                                             random_normal<T>(Shape{d.c_hi, d.c_lo, 4, 4, 4}, rng,
                                                              std::sqrt(2.0 / double(d.c_hi * 64))));
                d.transpose_b = Parameter<T>(name + ".transpose.bias", Tensor<T>(Shape{d.c_lo}, T(0)));
                break;
            }
            case UpsamplerKind::subpixel_conv:
                d.subpixel = ConvLayer<T>::init(d.c_hi, d.c_lo * 8, 3, 1, 1, true, rng, name + ".subpixel");
                break;
        }
        if (cfg.upsampler == UpsamplerKind::onsampling) {
            d.ons_cfg.c_in = d.c_lo;
            d.ons = OnsamplingParams<T>::init(d.ons_cfg, rng, name + ".onsampling");
        }
        if (cfg.gate != GateKind::none) d.ag = ScpAgParams<T>::init(d.c_lo, rng, name + ".gate");

        switch (cfg.decoder_block) {
            case DecoderBlockKind::basic:
            case DecoderBlockKind::residual:
                d.blk_conv1 = NormedConv<T>::init(2 * d.c_lo, d.c_lo, 3, 1, 1, rng, name + ".block.conv1");
                d.blk_conv2 = NormedConv<T>::init(d.c_lo, d.c_lo, 3, 1, 1, rng, name + ".block.conv2");
                break;
            case DecoderBlockKind::basic_deform:
            case DecoderBlockKind::residual_deform:
                d.blk_conv1 = NormedConv<T>::init(2 * d.c_lo, d.c_lo, 3, 1, 1, rng, name + ".block.conv1");
                d.blk_deform = DeformConv3dParams<T>::init(d.c_lo, d.c_lo, 3, rng, name + ".block.deform");
                break;
            case DecoderBlockKind::dsa:
                d.dsa = DsaParams<T>::init(2 * d.c_lo, d.c_lo, rng, name + ".block.dsa", cfg.dsa_literal_gate);
                break;
        }
        if (cfg.decoder_block == DecoderBlockKind::residual || cfg.decoder_block == DecoderBlockKind::residual_deform)
            d.blk_proj = ConvLayer<T>::init(2 * d.c_lo, d.c_lo, 1, 1, 0, true, rng, name + ".block.proj");

        // zero-initialized heads: logits start at exactly zero, so the initial
        // loss is the uniform-softmax closed form
        d.head = ConvLayer<T>::init(d.c_lo, cfg.num_classes, 1, 1, 0, true, rng, name + ".head",
                                    /*zero_weights=*/true);
        return d;
    }

    Var<T> upsample(Tape<T>& t, Var<T> deep) {
        switch (upsampler) {
            case UpsamplerKind::trilinear:
                return trilinear_upsample(t, relu(t, reduce.apply(t, deep)), 2);
            case UpsamplerKind::onsampling:
                return onsample_forward(t, relu(t, reduce.apply(t, deep)), ons_cfg, ons);
            case UpsamplerKind::transposed_conv:
                return conv_transpose3d(t, deep, t.param(transpose_w), t.param(transpose_b), 2, 1);
            default:
                return pixel_shuffle3d(t, subpixel.apply(t, deep), 2);
        }
    }

    Var<T> gate_skip(Tape<T>& t, Var<T> skip, Var<T> up) {
        switch (gate) {
            case GateKind::none: return skip;
            case GateKind::attention_gate: return attention_gate_apply(t, skip, up, ag);
            default: return scp_ag_apply(t, skip, up, ag);
        }
    }

    Var<T> extract(Tape<T>& t, Var<T> cat) {
        switch (block) {
            case DecoderBlockKind::basic:
                return relu(t, blk_conv2.apply(t, relu(t, blk_conv1.apply(t, cat))));
            case DecoderBlockKind::residual:
                return relu(t, add(t, blk_conv2.apply(t, relu(t, blk_conv1.apply(t, cat))), blk_proj.apply(t, cat)));
            case DecoderBlockKind::basic_deform:
                return relu(t, deform_conv3d_predicted(t, relu(t, blk_conv1.apply(t, cat)), blk_deform));
            case DecoderBlockKind::residual_deform:
                return relu(t, add(t, deform_conv3d_predicted(t, relu(t, blk_conv1.apply(t, cat)), blk_deform),
                                   blk_proj.apply(t, cat)));
            default:
                return dsa_forward(t, cat, dsa);
        }
    }

    Var<T> forward(Tape<T>& t, Var<T> skip, Var<T> deep, Var<T>& logits_out) {
        Var<T> up = upsample(t, deep);
        if (t.shape(up) != t.shape(skip))
            throw std::logic_error("decoder: upsampled feature " + t.shape(up).str() + " does not match skip " +
                                   t.shape(skip).str());
        Var<T> gated = gate_skip(t, skip, up);
        Var<T> out = extract(t, concat_channels(t, gated, up));
        logits_out = head.apply(t, out);
        return out;
    }

    void collect(std::vector<std::pair<std::string, Parameter<T>*>>& out) {
        if (reduce.valid()) reduce.collect(out);
        if (upsampler == UpsamplerKind::onsampling)
            for (auto* p : ons.all()) out.emplace_back(p->name, p);
        if (transpose_w.numel() > 0) {
            out.emplace_back(transpose_w.name, &transpose_w);
            out.emplace_back(transpose_b.name, &transpose_b);
        }
        if (subpixel.valid()) subpixel.collect(out);
        if (gate != GateKind::none) {
            auto ps = gate == GateKind::attention_gate ? ag.spatial_only() : ag.all();
            for (auto* p : ps) out.emplace_back(p->name, p);
        }
        if (blk_conv1.valid()) blk_conv1.collect(out);
        if (blk_conv2.valid()) blk_conv2.collect(out);
        if (block == DecoderBlockKind::basic_deform || block == DecoderBlockKind::residual_deform)
            for (auto* p : blk_deform.all()) out.emplace_back(p->name, p);
        if (blk_proj.valid()) blk_proj.collect(out);
        if (block == DecoderBlockKind::dsa)
            for (auto* p : dsa.all()) out.emplace_back(p->name, p);
        head.collect(out);
    }
};

// Scaled-down encoder-decoder: plain residual CNN encoder (the transformer
// encoder is outside this artifact's scope), decoder with pluggable
// upsampler / gate / feature-extraction block, and a segmentation head at
// every scale for deep supervision.
template <typename T>
struct SegModel {
    ModelConfig cfg;
    NormedConv<T> stem;
    std::vector<ResBlock<T>> enc_blocks;  // depth entries
    std::vector<NormedConv<T>> down;      // depth-1 stride-2 convs
    std::vector<DecoderLevel<T>> dec;     // depth-1 entries, index 0 = topmost
    ConvLayer<T> bottleneck_head;

    int channels_at(int stage) const { return cfg.base_channels << stage; }

    // logits[i] is supervision level i+1 (stride 2^i); logits.back() is the
    // bottleneck head
    std::vector<Var<T>> forward(Tape<T>& t, Var<T> x) {
        const Shape xs = t.shape(x);
        if (xs[1] != cfg.in_channels)
            throw std::invalid_argument("model: input channels " + std::to_string(xs[1]) + " != " +
                                        std::to_string(cfg.in_channels));
        for (int a = 2; a < 5; ++a)
            if (xs[a] % cfg.max_stride() != 0)
                throw std::invalid_argument("model: input extent " + xs.str() + " not divisible by " +
                                            std::to_string(cfg.max_stride()));
        std::vector<Var<T>> feats;
        Var<T> h = relu(t, stem.apply(t, x));
        feats.push_back(enc_blocks[0].apply(t, h));
        for (int s = 1; s < cfg.depth; ++s)
            feats.push_back(enc_blocks[size_t(s)].apply(t, relu(t, down[size_t(s - 1)].apply(t, feats.back()))));

        std::vector<Var<T>> logits(size_t(cfg.depth));
        logits[size_t(cfg.depth - 1)] = bottleneck_head.apply(t, feats.back());
        Var<T> deep = feats.back();
        for (int i = cfg.depth - 1; i >= 1; --i) {
            Var<T> lg;
            deep = dec[size_t(i - 1)].forward(t, feats[size_t(i - 1)], deep, lg);
            logits[size_t(i - 1)] = lg;
        }
        return logits;
    }

    std::vector<std::pair<std::string, Parameter<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Parameter<T>*>> out;
        stem.collect(out);
        for (auto& b : enc_blocks) b.collect(out);
        for (auto& d : down) d.collect(out);
        for (auto& d : dec) d.collect(out);
        bottleneck_head.collect(out);
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (auto& [name, p] : named_parameters()) n += p->numel();
        return n;
    }
};

template <typename T>
SegModel<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    SegModel<T> m;
    m.cfg = cfg;
    Rng rng(seed ^ 0xC0FFEEull);
    m.stem = NormedConv<T>::init(cfg.in_channels, cfg.base_channels, 3, 1, 1, rng, "enc.stem");
    for (int s = 0; s < cfg.depth; ++s)
        m.enc_blocks.push_back(ResBlock<T>::init(m.channels_at(s), rng, "enc.stage" + std::to_string(s)));
    for (int s = 1; s < cfg.depth; ++s)
        m.down.push_back(NormedConv<T>::init(m.channels_at(s - 1), m.channels_at(s), 2, 2, 0, rng,
                                             "enc.down" + std::to_string(s)));
    for (int i = 1; i < cfg.depth; ++i)
        m.dec.push_back(DecoderLevel<T>::init(cfg, m.channels_at(i - 1), rng, "dec.level" + std::to_string(i)));
    m.bottleneck_head = ConvLayer<T>::init(m.channels_at(cfg.depth - 1), cfg.num_classes, 1, 1, 0, true, rng,
                                           "dec.bottleneck_head", /*zero_weights=*/true);
    return m;
}

}  // namespace vseg
