#pragma once

#include <map>

#include "optim.hpp"
#include "volume_io.hpp"

namespace vseg {

// Versioned binary checkpoint container:
//   magic "VSKP" | version u32 | blob count u32 | blobs
// each blob: name length u32 | utf-8 name | dtype tag u8 | rank u8 |
//            extents u64 x rank | little-endian payload
// dtype tags: 0 = f32, 1 = f64, 2 = u16, 3 = u32, 4 = u64
struct CheckpointBlob {
    uint8_t dtype = 0;
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;
    std::vector<uint64_t> u64;

    static CheckpointBlob from_tensor(const Tensor<float>& t) {
        CheckpointBlob b;
        b.dtype = 0;
        b.shape = t.shape;
        b.f32 = t.data;
        return b;
    }
    static CheckpointBlob from_tensor(const Tensor<double>& t) {
        CheckpointBlob b;
        b.dtype = 1;
        b.shape = t.shape;
        b.f64 = t.data;
        return b;
    }
    static CheckpointBlob from_u64(uint64_t v) {
        CheckpointBlob b;
        b.dtype = 4;
        b.shape = Shape{1};
        b.u64 = {v};
        return b;
    }

    template <typename T>
    Tensor<T> to_tensor() const {
        Tensor<T> t(shape);
        if (dtype == 0) {
            for (size_t i = 0; i < f32.size(); ++i) t.data[i] = T(f32[i]);
        } else if (dtype == 1) {
            for (size_t i = 0; i < f64.size(); ++i) t.data[i] = T(f64[i]);
        } else {
            throw std::invalid_argument("checkpoint: blob is not floating point");
        }
        return t;
    }

    uint64_t scalar_u64() const {
        if (dtype != 4 || u64.size() != 1) throw std::invalid_argument("checkpoint: blob is not a u64 scalar");
        return u64[0];
    }
};

using Checkpoint = std::map<std::string, CheckpointBlob>;

constexpr uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out += "VSKP";
    io::put_u32(out, kCheckpointVersion);
    io::put_u32(out, uint32_t(ckpt.size()));
    for (const auto& [name, blob] : ckpt) {
        io::put_u32(out, uint32_t(name.size()));
        out += name;
        out.push_back(char(blob.dtype));
        out.push_back(char(blob.shape.rank));
        for (int i = 0; i < blob.shape.rank; ++i) io::put_u64(out, uint64_t(blob.shape[i]));
        switch (blob.dtype) {
            case 0:
                for (float v : blob.f32) io::put_f32(out, v);
                break;
            case 1:
                for (double v : blob.f64) io::put_f64(out, v);
                break;
            case 4:
                for (uint64_t v : blob.u64) io::put_u64(out, v);
                break;
            default: throw std::invalid_argument("checkpoint: unsupported dtype tag");
        }
    }
    io::write_file(path, out);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    const std::string bytes = io::read_file(path);
    io::Reader r(bytes, path);
    if (r.raw(4) != "VSKP") throw io::VolumeIoError(io::VolumeError::bad_magic, path);
    if (r.u32() != kCheckpointVersion) throw io::VolumeIoError(io::VolumeError::unknown_version, path);
    const uint32_t count = r.u32();
    Checkpoint ckpt;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32();
        const std::string name = r.raw(name_len);
        CheckpointBlob b;
        b.dtype = r.u8();
        const int rank = int(r.u8());
        if (rank < 1 || rank > Shape::kMaxRank) throw io::VolumeIoError(io::VolumeError::length_mismatch, path);
        b.shape.rank = rank;
        for (int k = 0; k < rank; ++k) b.shape[k] = int64_t(r.u64());
        const uint64_t n = uint64_t(b.shape.numel());
        switch (b.dtype) {
            case 0:
                b.f32.resize(n);
                for (auto& v : b.f32) v = r.f32();
                break;
            case 1:
                b.f64.resize(n);
                for (auto& v : b.f64) v = r.f64();
                break;
            case 4:
                b.u64.resize(n);
                for (auto& v : b.u64) v = r.u64();
                break;
            default: throw io::VolumeIoError(io::VolumeError::length_mismatch, path);
        }
        ckpt.emplace(name, std::move(b));
    }
    if (r.remaining() != 0) throw io::VolumeIoError(io::VolumeError::length_mismatch, path);
    return ckpt;
}

// Bundle a model's parameters plus AdamW and schedule state.
template <typename T>
Checkpoint make_checkpoint(const std::vector<std::pair<std::string, Parameter<T>*>>& params, AdamW<T>& opt,
                           int64_t epoch) {
    Checkpoint c;
    for (const auto& [name, p] : params) c.emplace("param/" + name, CheckpointBlob::from_tensor(p->value));
    opt.ensure_state(params);
    for (size_t i = 0; i < params.size(); ++i) {
        c.emplace("adam/m/" + params[i].first, CheckpointBlob::from_tensor(opt.moment1()[i]));
        c.emplace("adam/v/" + params[i].first, CheckpointBlob::from_tensor(opt.moment2()[i]));
    }
    c.emplace("adam/t", CheckpointBlob::from_u64(uint64_t(opt.step_count())));
    c.emplace("sched/epoch", CheckpointBlob::from_u64(uint64_t(epoch)));
    return c;
}

// Model configuration echo, so eval/resume can rebuild the network shape.
template <typename ModelConfigT>
void embed_model_config(Checkpoint& c, const ModelConfigT& cfg) {
    c.emplace("cfg/in_channels", CheckpointBlob::from_u64(uint64_t(cfg.in_channels)));
    c.emplace("cfg/base_channels", CheckpointBlob::from_u64(uint64_t(cfg.base_channels)));
    c.emplace("cfg/depth", CheckpointBlob::from_u64(uint64_t(cfg.depth)));
    c.emplace("cfg/num_classes", CheckpointBlob::from_u64(uint64_t(cfg.num_classes)));
    c.emplace("cfg/patch_size", CheckpointBlob::from_u64(uint64_t(cfg.patch_size)));
    c.emplace("cfg/upsampler", CheckpointBlob::from_u64(uint64_t(cfg.upsampler)));
    c.emplace("cfg/gate", CheckpointBlob::from_u64(uint64_t(cfg.gate)));
    c.emplace("cfg/decoder_block", CheckpointBlob::from_u64(uint64_t(cfg.decoder_block)));
    c.emplace("cfg/dsa_literal_gate", CheckpointBlob::from_u64(cfg.dsa_literal_gate ? 1 : 0));
}

template <typename ModelConfigT>
ModelConfigT extract_model_config(const Checkpoint& c) {
    auto u = [&](const std::string& k) {
        auto it = c.find("cfg/" + k);
        if (it == c.end()) throw std::invalid_argument("checkpoint: missing model config entry '" + k + "'");
        return it->second.scalar_u64();
    };
    ModelConfigT cfg;
    cfg.in_channels = int(u("in_channels"));
    cfg.base_channels = int(u("base_channels"));
    cfg.depth = int(u("depth"));
    cfg.num_classes = int(u("num_classes"));
    cfg.patch_size = int(u("patch_size"));
    cfg.upsampler = decltype(cfg.upsampler)(u("upsampler"));
    cfg.gate = decltype(cfg.gate)(u("gate"));
    cfg.decoder_block = decltype(cfg.decoder_block)(u("decoder_block"));
    cfg.dsa_literal_gate = u("dsa_literal_gate") != 0;
    return cfg;
}

// Restore parameters and optimizer state; returns the stored epoch.
template <typename T>
int64_t load_checkpoint(const Checkpoint& c, const std::vector<std::pair<std::string, Parameter<T>*>>& params,
                        AdamW<T>& opt) {
    std::vector<Tensor<T>> m, v;
    for (const auto& [name, p] : params) {
        auto it = c.find("param/" + name);
        if (it == c.end()) throw std::invalid_argument("checkpoint: missing parameter '" + name + "'");
        Tensor<T> val = it->second.template to_tensor<T>();
        if (val.shape != p->value.shape)
            throw std::invalid_argument("checkpoint: shape mismatch for '" + name + "': " + val.shape.str() + " vs " +
                                        p->value.shape.str());
        p->value = std::move(val);
        m.push_back(c.at("adam/m/" + name).template to_tensor<T>());
        v.push_back(c.at("adam/v/" + name).template to_tensor<T>());
    }
    opt.restore(int64_t(c.at("adam/t").scalar_u64()), std::move(m), std::move(v));
    return int64_t(c.at("sched/epoch").scalar_u64());
}

}  // namespace vseg
