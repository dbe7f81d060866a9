#pragma once

#include <array>
#include <limits>
#include <optional>

#include "losses.hpp"

namespace vseg {

// Binary mask over a single volume.
struct Mask {
    int64_t d = 0, h = 0, w = 0;
    std::vector<uint8_t> values;

    Mask() = default;
    Mask(int64_t d_, int64_t h_, int64_t w_) : d(d_), h(h_), w(w_), values(size_t(d_ * h_ * w_), 0) {}

    uint8_t at(int64_t id, int64_t ih, int64_t iw) const { return values[size_t((id * h + ih) * w + iw)]; }
    uint8_t& at(int64_t id, int64_t ih, int64_t iw) { return values[size_t((id * h + ih) * w + iw)]; }
};

inline Mask class_mask(const LabelVolume& labels, int64_t sample, int cls) {
    Mask m(labels.d, labels.h, labels.w);
    const int64_t vox = labels.voxels_per_sample();
    for (int64_t i = 0; i < vox; ++i) m.values[size_t(i)] = labels.values[size_t(sample * vox + i)] == cls ? 1 : 0;
    return m;
}

// Dice = 2|Y∩Ŷ| / (|Y|+|Ŷ|); both masks empty counts as perfect agreement (1).
inline double dice_score(const Mask& pred, const Mask& gt) {
    if (pred.d != gt.d || pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("dice_score: mask shape mismatch");
    int64_t inter = 0, a = 0, b = 0;
    for (size_t i = 0; i < pred.values.size(); ++i) {
        a += pred.values[i];
        b += gt.values[i];
        inter += pred.values[i] & gt.values[i];
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(inter) / double(a + b);
}

inline double dice_score(const LabelVolume& pred, const LabelVolume& gt, int cls, int64_t sample = 0) {
    if (pred.d != gt.d || pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("dice_score: label volume shape mismatch");
    return dice_score(class_mask(pred, sample, cls), class_mask(gt, sample, cls));
}

// Voxel coordinates with physical spacing (mm per voxel).
struct SurfacePointSet {
    std::vector<std::array<int32_t, 3>> points;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

// Mask voxels with at least one 6-connected neighbor outside the mask; the
// volume border counts as outside.
inline SurfacePointSet extract_surface(const Mask& m, std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
    SurfacePointSet s;
    s.spacing = spacing;
    static constexpr int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (int64_t d = 0; d < m.d; ++d)
        for (int64_t h = 0; h < m.h; ++h)
            for (int64_t w = 0; w < m.w; ++w) {
                if (!m.at(d, h, w)) continue;
                bool boundary = false;
                for (const auto& o : off) {
                    const int64_t nd = d + o[0], nh = h + o[1], nw = w + o[2];
                    if (nd < 0 || nd >= m.d || nh < 0 || nh >= m.h || nw < 0 || nw >= m.w || !m.at(nd, nh, nw)) {
                        boundary = true;
                        break;
                    }
                }
                if (boundary) s.points.push_back({int32_t(d), int32_t(h), int32_t(w)});
            }
    return s;
}

namespace detail {

// 3-d kd-tree over voxel points for nearest-neighbor queries. Distances are
// computed as (p - q) * spacing on the raw integer coordinates so results are
// bit-identical to a direct all-pairs evaluation.
class KdTree3 {
public:
    KdTree3(const std::vector<std::array<int32_t, 3>>& points, std::array<double, 3> spacing)
        : pts_(points), spacing_(spacing) {
        index_.resize(pts_.size());
        for (size_t i = 0; i < index_.size(); ++i) index_[i] = i;
        if (!pts_.empty()) build(0, pts_.size(), 0);
    }

    double nearest_sq(const std::array<int32_t, 3>& q) const {
        double best = std::numeric_limits<double>::max();
        query(0, pts_.size(), 0, q, best);
        return best;
    }

private:
    double dist_sq(const std::array<int32_t, 3>& a, const std::array<int32_t, 3>& b) const {
        const double dd = (double(a[0]) - double(b[0])) * spacing_[0];
        const double dh = (double(a[1]) - double(b[1])) * spacing_[1];
        const double dw = (double(a[2]) - double(b[2])) * spacing_[2];
        return dd * dd + dh * dh + dw * dw;
    }

    void build(size_t lo, size_t hi, int axis) {
        if (hi - lo <= 1) return;
        const size_t mid = (lo + hi) / 2;
        std::nth_element(index_.begin() + long(lo), index_.begin() + long(mid), index_.begin() + long(hi),
                         [&](size_t a, size_t b) { return pts_[a][size_t(axis)] < pts_[b][size_t(axis)]; });
        build(lo, mid, (axis + 1) % 3);
        build(mid + 1, hi, (axis + 1) % 3);
    }

    void query(size_t lo, size_t hi, int axis, const std::array<int32_t, 3>& q, double& best) const {
        if (lo >= hi) return;
        const size_t mid = (lo + hi) / 2;
        const auto& p = pts_[index_[mid]];
        best = std::min(best, dist_sq(q, p));
        const double delta = (double(q[size_t(axis)]) - double(p[size_t(axis)])) * spacing_[size_t(axis)];
        const size_t nearer_lo = delta < 0 ? lo : mid + 1, nearer_hi = delta < 0 ? mid : hi;
        const size_t farther_lo = delta < 0 ? mid + 1 : lo, farther_hi = delta < 0 ? hi : mid;
        query(nearer_lo, nearer_hi, (axis + 1) % 3, q, best);
        if (delta * delta < best) query(farther_lo, farther_hi, (axis + 1) % 3, q, best);
    }

    std::vector<std::array<int32_t, 3>> pts_;
    std::array<double, 3> spacing_;
    std::vector<size_t> index_;
};

// Nearest-rank percentile of an ascending list: element ceil(q*M), 1-based.
inline double nearest_rank_percentile(std::vector<double>& values, double q) {
    std::sort(values.begin(), values.end());
    const size_t rank = size_t(std::ceil(q * double(values.size())));
    return values[std::max<size_t>(rank, 1) - 1];
}

}  // namespace detail

// 95th-percentile Hausdorff distance: nearest-rank percentile of each directed
// point-to-set distance list, then the max of the two. Returns nullopt when
// either surface is empty (the metric is undefined there).
inline std::optional<double> hd95(const SurfacePointSet& a, const SurfacePointSet& b) {
    if (a.points.empty() || b.points.empty()) return std::nullopt;
    if (a.spacing != b.spacing) throw std::invalid_argument("hd95: point sets have different spacings");
    auto directed = [](const SurfacePointSet& from, const SurfacePointSet& to) {
        detail::KdTree3 tree(to.points, from.spacing);
        std::vector<double> dists;
        dists.reserve(from.points.size());
        for (const auto& p : from.points) dists.push_back(std::sqrt(tree.nearest_sq(p)));
        return detail::nearest_rank_percentile(dists, 0.95);
    };
    return std::max(directed(a, b), directed(b, a));
}

}  // namespace vseg
