#pragma once

#include "losses.hpp"

namespace vseg {

// Procedural multi-class volume: ellipsoid organ (1), thin ellipsoid shell (2),
// small blob (3) on background (0), distinct intensity means plus Gaussian
// noise, z-score normalized per sample. Same seed, same volume, bit for bit.
struct PhantomSpec {
    uint64_t seed = 1;
    int64_t extent_d = 64, extent_h = 64, extent_w = 64;
    double noise_std = 0.04;
    std::array<double, 4> class_intensity{0.0, 0.5, 0.9, 1.35};

    static constexpr int kNumClasses = 4;

    void validate() const {
        if (extent_d < 16 || extent_h < 16 || extent_w < 16)
            throw std::invalid_argument("PhantomSpec: extents must be >= 16");
    }
};

template <typename T>
struct PhantomSample {
    Tensor<T> image;  // [1, 1, D, H, W], z-scored
    LabelVolume labels;
};

template <typename T>
PhantomSample<T> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const int64_t D = spec.extent_d, H = spec.extent_h, W = spec.extent_w;
    Rng rng(spec.seed * 0x9E3779B97f4A7C15ull + 0x5eed);

    LabelVolume labels(1, D, H, W, PhantomSpec::kNumClasses);

    struct Ellipsoid {
        double cd, ch, cw, rd, rh, rw;
        double rho(int64_t d, int64_t h, int64_t w) const {
            const double a = (double(d) - cd) / rd, b = (double(h) - ch) / rh, c = (double(w) - cw) / rw;
            return std::sqrt(a * a + b * b + c * c);
        }
    };
    auto rand_ellipsoid = [&](double center_lo, double center_hi, double rad_lo, double rad_hi) {
        Ellipsoid e;
        e.cd = rng.uniform(center_lo, center_hi) * double(D);
        e.ch = rng.uniform(center_lo, center_hi) * double(H);
        e.cw = rng.uniform(center_lo, center_hi) * double(W);
        e.rd = rng.uniform(rad_lo, rad_hi) * double(D);
        e.rh = rng.uniform(rad_lo, rad_hi) * double(H);
        e.rw = rng.uniform(rad_lo, rad_hi) * double(W);
        return e;
    };
    const Ellipsoid organ = rand_ellipsoid(0.42, 0.58, 0.32, 0.42);
    const Ellipsoid shell = rand_ellipsoid(0.36, 0.64, 0.24, 0.32);
    Ellipsoid blob;
    blob.cd = rng.uniform(0.25, 0.75) * double(D);
    blob.ch = rng.uniform(0.25, 0.75) * double(H);
    blob.cw = rng.uniform(0.25, 0.75) * double(W);
    blob.rd = blob.rh = blob.rw = rng.uniform(11.0, 14.0);

    // later classes overwrite earlier ones
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                uint16_t cls = 0;
                if (organ.rho(d, h, w) <= 1.0) cls = 1;
                const double sr = shell.rho(d, h, w);
                if (sr >= 0.70 && sr <= 1.0) cls = 2;
                if (blob.rho(d, h, w) <= 1.0) cls = 3;
                labels.at(0, d, h, w) = cls;
            }

    Tensor<T> img(Shape{1, 1, D, H, W});
    for (int64_t i = 0; i < labels.numel(); ++i)
        img[i] = T(spec.class_intensity[labels.values[size_t(i)]] + spec.noise_std * rng.normal());

    // per-sample z-score
    double mean = 0.0;
    for (int64_t i = 0; i < img.numel(); ++i) mean += double(img[i]);
    mean /= double(img.numel());
    double var = 0.0;
    for (int64_t i = 0; i < img.numel(); ++i) {
        const double d = double(img[i]) - mean;
        var += d * d;
    }
    const double stdev = std::sqrt(std::max(var / double(img.numel()), 1e-12));
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = T((double(img[i]) - mean) / stdev);

    return {std::move(img), std::move(labels)};
}

}  // namespace vseg
