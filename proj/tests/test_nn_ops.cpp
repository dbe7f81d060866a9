#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vseg/conv.hpp>
#include <vseg/gradcheck.hpp>
#include <vseg/resample.hpp>

#include "oracles.hpp"

using namespace vseg;

namespace {

// integer-valued tensors make order-of-summation differences vanish, so
// oracle comparisons can demand bit equality
template <typename T>
Tensor<T> random_int_tensor(Shape s, Rng& rng, int lo = -3, int hi = 3) {
    Tensor<T> t(s);
    for (auto& v : t.data) v = T(rng.uniform_int(lo, hi));
    return t;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += double(a[i]) * double(b[i]);
    return acc;
}

}  // namespace

TEST_CASE("conv3d: 1x1x1 identity kernel") {
    Rng rng(1);
    Tape<double> t;
    auto x = t.input(random_normal<double>(Shape{1, 2, 3, 4, 5}, rng));
    Tensor<double> w(Shape{2, 2, 1, 1, 1});
    w[0 * 2 + 0] = 1.0;
    w[1 * 2 + 1] = 1.0;
    auto y = conv3d(t, x, t.input(w), Var<double>{}, Conv3dSpec::cubic(2, 2, 1, 1, 0, false));
    CHECK(oracle::max_abs_diff(t.val(y), t.val(x)) == 0.0);
}

TEST_CASE("conv3d: all-ones kernel counts overlap") {
    Tape<double> t;
    auto x = t.input(Tensor<double>(Shape{1, 1, 5, 5, 5}, 1.0));
    auto w = t.input(Tensor<double>(Shape{1, 1, 3, 3, 3}, 1.0));
    auto y = conv3d(t, x, w, Var<double>{}, Conv3dSpec::cubic(1, 1, 3, 1, 1));
    const auto& yv = t.val(y);
    CHECK(yv.shape == Shape{1, 1, 5, 5, 5});
    CHECK(yv[(2 * 5 + 2) * 5 + 2] == 27.0);  // center
    CHECK(yv[0] == 8.0);                     // corner
}

TEST_CASE("conv3d matches the naive 6-loop oracle exactly") {
    Rng rng(2);
    for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 0}, {2, 1}}) {
        Tensor<double> xv = random_int_tensor<double>(Shape{1, 3, 5, 5, 5}, rng);
        Tensor<double> wv = random_int_tensor<double>(Shape{2, 3, 3, 3, 3}, rng);
        Tensor<double> bv = random_int_tensor<double>(Shape{2}, rng);
        Tape<double> t;
        auto y = conv3d(t, t.input(xv), t.input(wv), t.input(bv), Conv3dSpec::cubic(3, 2, 3, stride, pad));
        auto ref = oracle::conv3d(xv, wv, &bv, stride, pad);
        CHECK(oracle::max_abs_diff(t.val(y), ref) == 0.0);
    }
    // a non-cubic batch>1 case
    Tensor<double> xv = random_int_tensor<double>(Shape{2, 2, 4, 5, 6}, rng);
    Tensor<double> wv = random_int_tensor<double>(Shape{3, 2, 3, 3, 3}, rng);
    Tape<double> t;
    auto y = conv3d(t, t.input(xv), t.input(wv), Var<double>{}, Conv3dSpec::cubic(2, 3, 3, 1, 1, false));
    CHECK(oracle::max_abs_diff(t.val(y), oracle::conv3d<double>(xv, wv, nullptr, 1, 1)) == 0.0);
}

TEST_CASE("conv3d error paths") {
    Tape<double> t;
    auto x = t.input(Tensor<double>(Shape{1, 2, 2, 2, 2}));
    auto w = t.input(Tensor<double>(Shape{1, 2, 3, 3, 3}));
    CHECK_THROWS_AS(conv3d(t, x, w, Var<double>{}, Conv3dSpec::cubic(2, 1, 3, 1, 0, false)),
                    std::invalid_argument);  // degenerate extent
    CHECK_THROWS_AS(conv3d(t, x, w, Var<double>{}, Conv3dSpec::cubic(3, 1, 3, 1, 1, false)),
                    std::invalid_argument);  // channel mismatch
}

TEST_CASE("conv3d gradients vs finite differences") {
    Rng rng(3);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 4, 4, 4}, rng));
    Parameter<double> w("w", random_normal<double>(Shape{2, 2, 3, 3, 3}, rng, 0.4));
    Parameter<double> b("b", random_normal<double>(Shape{2}, rng, 0.2));
    auto build = [&](Tape<double>& t) {
        auto y = conv3d(t, t.param(x), t.param(w), t.param(b), Conv3dSpec::cubic(2, 2, 3, 1, 1));
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        w.zero_grad();
        b.zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    auto rep = finite_difference_check<double>(fwd, acc, {{"x", &x}, {"w", &w}, {"b", &b}}, {1e-4, 40});
    CHECK(rep.max_rel() < 1e-6);
}

TEST_CASE("conv_transpose3d: s=2 k=2 constant kernel tiles blocks") {
    Rng rng(4);
    Tensor<double> xv = random_normal<double>(Shape{1, 1, 2, 3, 2}, rng);
    Tape<double> t;
    auto y = conv_transpose3d(t, t.input(xv), t.input(Tensor<double>(Shape{1, 1, 2, 2, 2}, 1.0)), Var<double>{}, 2, 0);
    const auto& yv = t.val(y);
    REQUIRE(yv.shape == Shape{1, 1, 4, 6, 4});
    for (int64_t d = 0; d < 4; ++d)
        for (int64_t h = 0; h < 6; ++h)
            for (int64_t w = 0; w < 4; ++w)
                CHECK(yv[(d * 6 + h) * 4 + w] == xv[((d / 2) * 3 + h / 2) * 2 + w / 2]);
}

TEST_CASE("conv_transpose3d overlap counts expose the checkerboard precondition") {
    // mismatched k=3, s=2: uneven footprint counts
    auto uneven = conv_transpose3d_overlap_counts<double>(4, 4, 4, 3, 2, 0);
    bool any_diff = false;
    for (int64_t i = 1; i < uneven.numel(); ++i) any_diff = any_diff || uneven[i] != uneven[0];
    CHECK(any_diff);
    // even configuration k=2s, p=s/2: uniform interior coverage
    auto even = conv_transpose3d_overlap_counts<double>(6, 6, 6, 4, 2, 1);
    REQUIRE(even.shape == Shape{12, 12, 12});
    const double interior = even[(6 * 12 + 6) * 12 + 6];
    for (int64_t d = 1; d < 11; ++d)
        for (int64_t h = 1; h < 11; ++h)
            for (int64_t w = 1; w < 11; ++w) CHECK(even[(d * 12 + h) * 12 + w] == interior);
}

TEST_CASE("conv / conv-transpose adjoint identity") {
    Rng rng(5);
    for (auto [stride, pad, D] : {std::tuple{1, 1, 6}, {2, 1, 7}, {2, 0, 7}}) {
        Tensor<double> wv = random_normal<double>(Shape{3, 2, 3, 3, 3}, rng);
        Tensor<double> xv = random_normal<double>(Shape{1, 2, D, D, D}, rng);
        Tape<double> t;
        auto cx = conv3d(t, t.input(xv), t.input(wv), Var<double>{},
                         Conv3dSpec::cubic(2, 3, 3, stride, pad, false));
        Tensor<double> yv = random_normal<double>(t.val(cx).shape, rng);
        auto ty = conv_transpose3d(t, t.input(yv), t.input(wv), Var<double>{}, stride, pad);
        REQUIRE(t.val(ty).shape == xv.shape);
        const double lhs = dot(t.val(cx), yv);
        const double rhs = dot(xv, t.val(ty));
        CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("conv_transpose3d gradients vs finite differences") {
    Rng rng(6);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 3, 3, 3}, rng));
    Parameter<double> w("w", random_normal<double>(Shape{2, 2, 4, 4, 4}, rng, 0.3));
    Parameter<double> b("b", random_normal<double>(Shape{2}, rng, 0.2));
    auto build = [&](Tape<double>& t) {
        auto y = conv_transpose3d(t, t.param(x), t.param(w), t.param(b), 2, 1);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        w.zero_grad();
        b.zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    auto rep = finite_difference_check<double>(fwd, acc, {{"x", &x}, {"w", &w}, {"b", &b}}, {1e-4, 40});
    CHECK(rep.max_rel() < 1e-6);
}

TEST_CASE("pixel shuffle: declared channel-block order") {
    Tape<double> t;
    // s=1 is the identity
    Rng rng(7);
    Tensor<double> xv = random_normal<double>(Shape{1, 3, 2, 2, 2}, rng);
    auto id = pixel_shuffle3d(t, t.input(xv), 1);
    CHECK(oracle::max_abs_diff(t.val(id), xv) == 0.0);

    // [1,8,1,1,1] with s=2: channel q = dz*4 + dy*2 + dx lands at (dz,dy,dx)
    Tensor<double> v(Shape{1, 8, 1, 1, 1});
    for (int i = 0; i < 8; ++i) v[i] = 10.0 + i;
    auto y = pixel_shuffle3d(t, t.input(v), 2);
    REQUIRE(t.val(y).shape == Shape{1, 1, 2, 2, 2});
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                CHECK(t.val(y)[(dz * 2 + dy) * 2 + dx] == v[dz * 4 + dy * 2 + dx]);

    CHECK_THROWS_AS(pixel_shuffle3d(t, t.input(Tensor<double>(Shape{1, 6, 1, 1, 1})), 2), std::invalid_argument);
}

TEST_CASE("pixel shuffle roundtrip is bit-exact") {
    Rng rng(8);
    Tensor<float> xv = random_normal<float>(Shape{2, 16, 3, 4, 5}, rng);
    Tape<float> t;
    auto y = pixel_unshuffle3d(t, pixel_shuffle3d(t, t.input(xv), 2), 2);
    REQUIRE(t.val(y).shape == xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) CHECK(t.val(y)[i] == xv[i]);
}

TEST_CASE("subpixel upsample equals transposed conv with permuted kernel") {
    // stride s, kernel s, no overlap: w_t[ci][c][dz][dy][dx] = w_sub[c*s^3+(dz,dy,dx)][ci]
    Rng rng(9);
    const int s = 2, Cin = 3, C = 2, s3 = 8;
    Tensor<double> wsub = random_normal<double>(Shape{C * s3, Cin, 1, 1, 1}, rng);
    Tensor<double> wt(Shape{Cin, C, s, s, s});
    for (int ci = 0; ci < Cin; ++ci)
        for (int c = 0; c < C; ++c)
            for (int q = 0; q < s3; ++q) wt[(ci * C + c) * s3 + q] = wsub[(c * s3 + q) * Cin + ci];
    Tensor<double> xv = random_normal<double>(Shape{1, Cin, 3, 3, 3}, rng);
    Tape<double> t;
    auto a = subpixel_upsample(t, t.input(xv), s, t.input(wsub), Var<double>{},
                               Conv3dSpec::cubic(Cin, C * s3, 1, 1, 0, false));
    auto b = conv_transpose3d(t, t.input(xv), t.input(wt), Var<double>{}, s, 0);
    REQUIRE(t.val(a).shape == t.val(b).shape);
    CHECK(oracle::max_abs_diff(t.val(a), t.val(b)) < 1e-12);
}

TEST_CASE("trilinear upsample: convention and constants") {
    Tape<double> t;
    // constant preserved
    auto c = trilinear_upsample(t, t.input(Tensor<double>(Shape{1, 1, 2, 2, 2}, 3.25)), 2);
    for (int64_t i = 0; i < t.val(c).numel(); ++i) CHECK(t.val(c)[i] == doctest::Approx(3.25));
    // s=1 identity
    Rng rng(10);
    Tensor<double> xv = random_normal<double>(Shape{1, 2, 3, 3, 3}, rng);
    auto id = trilinear_upsample(t, t.input(xv), 1);
    CHECK(oracle::max_abs_diff(t.val(id), xv) < 1e-15);
    // 1D slice [0,1] at s=2 -> [0, 0.25, 0.75, 1]
    Tensor<double> line(Shape{1, 1, 1, 1, 2});
    line[1] = 1.0;
    auto y = trilinear_upsample(t, t.input(line), 2);
    // depth/height collapse to the border-clamped single voxel, so inspect w axis at (0,0)
    const auto& yv = t.val(y);
    REQUIRE(yv.shape == Shape{1, 1, 2, 2, 4});
    CHECK(yv[0] == doctest::Approx(0.0));
    CHECK(yv[1] == doctest::Approx(0.25));
    CHECK(yv[2] == doctest::Approx(0.75));
    CHECK(yv[3] == doctest::Approx(1.0));
}

TEST_CASE("trilinear interior reproduces linear ramps") {
    Tape<double> t;
    Tensor<double> ramp(Shape{1, 1, 1, 1, 6});
    for (int i = 0; i < 6; ++i) ramp[i] = double(i);
    auto y = trilinear_upsample(t, t.input(ramp), 2);
    // interior outputs follow the ramp at half-step positions
    for (int64_t k = 1; k < 11; ++k) CHECK(t.val(y)[k] == doctest::Approx((double(k) + 0.5) / 2.0 - 0.5));
}

TEST_CASE("trilinear resize gradients vs finite differences") {
    Rng rng(11);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 3, 4, 5}, rng));
    auto build = [&](Tape<double>& t) {
        auto y = trilinear_resize(t, t.param(x), 5, 3, 7);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    CHECK(finite_difference_check<double>(fwd, acc, {{"x", &x}}, {1e-5, 60}).max_rel() < 1e-6);
}

TEST_CASE("avg pool: examples and oracle") {
    Tape<double> t;
    auto c = avg_pool3d(t, t.input(Tensor<double>(Shape{1, 1, 4, 4, 4}, 2.5)), 2, 2);
    for (int64_t i = 0; i < t.val(c).numel(); ++i) CHECK(t.val(c)[i] == doctest::Approx(2.5));

    Tensor<double> v(Shape{1, 1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) v[i] = double(i + 1);
    auto g = global_avg_pool(t, t.input(v));
    CHECK(t.val(g)[0] == doctest::Approx(4.5));

    Rng rng(12);
    Tensor<double> xv = random_normal<double>(Shape{2, 3, 5, 6, 7}, rng);
    auto p = avg_pool3d(t, t.input(xv), 2, 2, true);
    CHECK(oracle::max_abs_diff(t.val(p), oracle::avg_pool3d(xv, 2, 2, true)) < 1e-12);
    auto p2 = avg_pool3d(t, t.input(xv), 2, 2, false);
    CHECK(oracle::max_abs_diff(t.val(p2), oracle::avg_pool3d(xv, 2, 2, false)) < 1e-12);

    CHECK_THROWS_AS(avg_pool3d(t, t.input(Tensor<double>(Shape{1, 1, 1, 4, 4})), 2, 2), std::invalid_argument);
}

TEST_CASE("avg pool gradients vs finite differences") {
    Rng rng(13);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 5, 5, 5}, rng));
    auto build = [&](Tape<double>& t) {
        auto y = avg_pool3d(t, t.param(x), 2, 2, true);
        auto gp = global_avg_pool(t, t.param(x));
        return add(t, reduce_sum(t, mul(t, y, y)), reduce_sum(t, mul(t, gp, gp)));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    CHECK(finite_difference_check<double>(fwd, acc, {{"x", &x}}, {1e-5, 60}).max_rel() < 1e-6);
}

TEST_CASE("grid sample: lattice exactness and midpoint mean") {
    Rng rng(14);
    Tensor<double> xv = random_normal<double>(Shape{1, 2, 3, 3, 4}, rng);
    Tape<double> t;
    // integer coordinates reproduce lattice values
    Tensor<double> coords(Shape{1, 3, 1, 1, 2});
    coords[0 * 2 + 0] = 1.0;  // d
    coords[0 * 2 + 1] = 2.0;
    coords[1 * 2 + 0] = 2.0;  // h
    coords[1 * 2 + 1] = 0.0;
    coords[2 * 2 + 0] = 3.0;  // w
    coords[2 * 2 + 1] = 1.0;
    auto y = grid_sample_trilinear(t, t.input(xv), t.input(coords));
    CHECK(t.val(y)[0] == doctest::Approx(xv[((0 * 3 + 1) * 3 + 2) * 4 + 3]));
    CHECK(t.val(y)[1] == doctest::Approx(xv[((0 * 3 + 2) * 3 + 0) * 4 + 1]));

    // midpoint along one axis averages the two voxels
    Tensor<double> mid(Shape{1, 3, 1, 1, 1});
    mid[0] = 1.0;
    mid[1] = 1.0;
    mid[2] = 1.5;
    auto m = grid_sample_trilinear(t, t.input(xv), t.input(mid));
    CHECK(t.val(m)[0] ==
          doctest::Approx(0.5 * (xv[((0 * 3 + 1) * 3 + 1) * 4 + 1] + xv[((0 * 3 + 1) * 3 + 1) * 4 + 2])));
}

TEST_CASE("grid sample gradients w.r.t. x and coords vs finite differences") {
    Rng rng(15);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 4, 4, 4}, rng));
    // coordinates at clearly non-integer interior points
    Tensor<double> cv(Shape{1, 3, 2, 2, 2});
    for (auto& v : cv.data) v = 0.3 + 2.4 * rng.uniform();
    Parameter<double> coords("coords", cv);
    auto build = [&](Tape<double>& t) {
        auto y = grid_sample_trilinear(t, t.param(x), t.param(coords));
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        coords.zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    CHECK(finite_difference_check<double>(fwd, acc, {{"x", &x}, {"coords", &coords}}, {1e-4, 48}).max_rel() < 1e-6);
}
