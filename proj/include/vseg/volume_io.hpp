#pragma once

#include <cstdio>
#include <fstream>

#include "losses.hpp"

namespace vseg {

// Minimal raw volume container, bit-exact and little-endian regardless of
// host:
//   magic "VSEG" | version u32 | kind u8 (0 = image f32, 1 = labels u16)
//   channels u32 | extents D,H,W u32 | spacing f32 x3 | payload [C,D,H,W]
namespace io {

enum class VolumeError { bad_magic, unknown_version, truncated, length_mismatch, io_failure };

inline const char* to_string(VolumeError e) {
    switch (e) {
        case VolumeError::bad_magic: return "bad magic";
        case VolumeError::unknown_version: return "unknown version";
        case VolumeError::truncated: return "truncated file";
        case VolumeError::length_mismatch: return "payload length mismatch";
        default: return "io failure";
    }
}

class VolumeIoError : public std::runtime_error {
public:
    VolumeIoError(VolumeError kind, const std::string& path)
        : std::runtime_error(std::string("volume io: ") + to_string(kind) + " (" + path + ")"), kind_(kind) {}
    VolumeError kind() const { return kind_; }

private:
    VolumeError kind_;
};

constexpr uint32_t kVolumeVersion = 1;

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, uint16_t v) {
    out.push_back(char(v & 0xFF));
    out.push_back(char((v >> 8) & 0xFF));
}
inline void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}
inline void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

class Reader {
public:
    Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

    void need(size_t n) const {
        if (pos_ + n > bytes_.size()) throw VolumeIoError(VolumeError::truncated, path_);
    }
    uint8_t u8() {
        need(1);
        return uint8_t(bytes_[pos_++]);
    }
    uint16_t u16() {
        need(2);
        uint16_t v = uint16_t(uint8_t(bytes_[pos_])) | uint16_t(uint8_t(bytes_[pos_ + 1])) << 8;
        pos_ += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(bytes_[pos_ + size_t(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(bytes_[pos_ + size_t(i)])) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string raw(size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& path() const { return path_; }

private:
    const std::string& bytes_;
    std::string path_;
    size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VolumeIoError(VolumeError::io_failure, path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw VolumeIoError(VolumeError::io_failure, path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw VolumeIoError(VolumeError::io_failure, path);
}

}  // namespace io

struct VolumeFile {
    uint8_t kind = 0;  // 0 = image f32, 1 = labels u16
    uint32_t channels = 1;
    uint32_t d = 0, h = 0, w = 0;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::vector<float> image;      // kind 0, [C,D,H,W]
    std::vector<uint16_t> labels;  // kind 1, [C,D,H,W] with C == 1

    static VolumeFile from_image(const Tensor<float>& img, std::array<float, 3> spacing = {1, 1, 1}) {
        if (img.shape.rank != 5 || img.shape[0] != 1)
            throw std::invalid_argument("VolumeFile: image must be [1,C,D,H,W]");
        VolumeFile v;
        v.kind = 0;
        v.channels = uint32_t(img.shape[1]);
        v.d = uint32_t(img.shape[2]);
        v.h = uint32_t(img.shape[3]);
        v.w = uint32_t(img.shape[4]);
        v.spacing = spacing;
        v.image = img.data;
        return v;
    }

    static VolumeFile from_labels(const LabelVolume& lv, std::array<float, 3> spacing = {1, 1, 1}) {
        if (lv.n != 1) throw std::invalid_argument("VolumeFile: label volume must be single-sample");
        VolumeFile v;
        v.kind = 1;
        v.channels = 1;
        v.d = uint32_t(lv.d);
        v.h = uint32_t(lv.h);
        v.w = uint32_t(lv.w);
        v.spacing = spacing;
        v.labels = lv.values;
        return v;
    }

    Tensor<float> to_image() const {
        if (kind != 0) throw std::invalid_argument("VolumeFile: not an image volume");
        return Tensor<float>(Shape{1, channels, d, h, w}, image);
    }

    LabelVolume to_labels(int num_classes) const {
        if (kind != 1) throw std::invalid_argument("VolumeFile: not a label volume");
        LabelVolume lv(1, d, h, w, num_classes);
        lv.values = labels;
        return lv;
    }
};

inline void write_volume(const std::string& path, const VolumeFile& v) {
    std::string out;
    out += "VSEG";
    io::put_u32(out, io::kVolumeVersion);
    out.push_back(char(v.kind));
    io::put_u32(out, v.channels);
    io::put_u32(out, v.d);
    io::put_u32(out, v.h);
    io::put_u32(out, v.w);
    for (float s : v.spacing) io::put_f32(out, s);
    const uint64_t count = uint64_t(v.channels) * v.d * v.h * v.w;
    if (v.kind == 0) {
        if (v.image.size() != count) throw io::VolumeIoError(io::VolumeError::length_mismatch, path);
        for (float x : v.image) io::put_f32(out, x);
    } else {
        if (v.labels.size() != count) throw io::VolumeIoError(io::VolumeError::length_mismatch, path);
        for (uint16_t x : v.labels) io::put_u16(out, x);
    }
    io::write_file(path, out);
}

inline VolumeFile read_volume(const std::string& path) {
    const std::string bytes = io::read_file(path);
    io::Reader r(bytes, path);
    if (r.raw(4) != "VSEG") throw io::VolumeIoError(io::VolumeError::bad_magic, path);
    if (r.u32() != io::kVolumeVersion) throw io::VolumeIoError(io::VolumeError::unknown_version, path);
    VolumeFile v;
    v.kind = r.u8();
    v.channels = r.u32();
    v.d = r.u32();
    v.h = r.u32();
    v.w = r.u32();
    for (float& s : v.spacing) s = r.f32();
    const uint64_t count = uint64_t(v.channels) * v.d * v.h * v.w;
    const size_t elem = v.kind == 0 ? 4 : 2;
    if (r.remaining() != count * elem) throw io::VolumeIoError(io::VolumeError::length_mismatch, path);
    if (v.kind == 0) {
        v.image.resize(count);
        for (auto& x : v.image) x = r.f32();
    } else {
        v.labels.resize(count);
        for (auto& x : v.labels) x = r.u16();
    }
    return v;
}

}  // namespace vseg
