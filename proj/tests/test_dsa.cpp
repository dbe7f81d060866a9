#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vseg/dsa.hpp>
#include <vseg/gradcheck.hpp>

#include "oracles.hpp"

using namespace vseg;

TEST_CASE("deform conv with zero offsets reduces to conv3d") {
    Rng rng(1);
    auto spec = Conv3dSpec::cubic(2, 3, 3, 1, 1, false);
    Tensor<double> xv = random_normal<double>(Shape{1, 2, 5, 5, 5}, rng);
    Tensor<double> wv = random_normal<double>(Shape{3, 2, 3, 3, 3}, rng);
    Tape<double> t;
    auto y = deform_conv3d(t, t.input(xv), t.input(wv), t.input(Tensor<double>(Shape{1, 81, 5, 5, 5}, 0.0)), spec);
    auto ref = oracle::conv3d<double>(xv, wv, nullptr, 1, 1);
    CHECK(oracle::max_abs_diff(t.val(y), ref) < 1e-12);

    // f32 path with the zero-initialized predictor, as trained models start
    Rng rng32(2);
    Tensor<float> xf = random_normal<float>(Shape{2, 2, 4, 4, 4}, rng32);
    auto params = DeformConv3dParams<float>::init(2, 2, 3, rng32, "dc");
    Tape<float> tf;
    auto yf = deform_conv3d_predicted(tf, tf.input(xf), params);
    auto reff = oracle::conv3d<float>(xf, params.weight.value, nullptr, 1, 1);
    CHECK(oracle::max_abs_diff(tf.val(yf), reff) < 1e-6);
}

TEST_CASE("deform conv on constant input ignores in-bounds offsets") {
    Rng rng(3);
    auto spec = Conv3dSpec::cubic(1, 2, 3, 1, 1, false);
    Tensor<double> xv(Shape{1, 1, 6, 6, 6}, 1.3);
    Tensor<double> wv = random_normal<double>(Shape{2, 1, 3, 3, 3}, rng);
    Tensor<double> off(Shape{1, 81, 6, 6, 6});
    for (auto& v : off.data) v = rng.uniform(-0.4, 0.4);
    Tape<double> t;
    auto a = deform_conv3d(t, t.input(xv), t.input(wv), t.input(off), spec);
    auto b = deform_conv3d(t, t.input(xv), t.input(wv), t.input(Tensor<double>(Shape{1, 81, 6, 6, 6}, 0.0)), spec);
    // interpolation preserves constants wherever the displaced taps stay
    // inside the volume, i.e. two voxels away from the border here
    const auto& av = t.val(a);
    const auto& bv = t.val(b);
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t d = 2; d < 4; ++d)
            for (int64_t h = 2; h < 4; ++h)
                for (int64_t w = 2; w < 4; ++w) {
                    const int64_t i = ((c * 6 + d) * 6 + h) * 6 + w;
                    CHECK(av[i] == doctest::Approx(bv[i]).epsilon(1e-9));
                }
}

TEST_CASE("deform conv stays in bounds for any offset magnitude") {
    Rng rng(4);
    auto spec = Conv3dSpec::cubic(1, 1, 3, 1, 1, false);
    Tensor<double> xv = random_normal<double>(Shape{1, 1, 4, 4, 4}, rng);
    Tensor<double> wv = random_normal<double>(Shape{1, 1, 3, 3, 3}, rng);
    Tensor<double> off(Shape{1, 81, 4, 4, 4});
    for (size_t i = 0; i < off.data.size(); ++i) off[int64_t(i)] = (i % 2 ? 1.0 : -1.0) * 1e6;
    Tape<double> t;
    auto y = deform_conv3d(t, t.input(xv), t.input(wv), t.input(off), spec);
    for (int64_t i = 0; i < t.val(y).numel(); ++i) CHECK(std::isfinite(t.val(y)[i]));
}

TEST_CASE("deform conv channel arithmetic errors") {
    Rng rng(5);
    Tape<double> t;
    auto x = t.input(Tensor<double>(Shape{1, 2, 4, 4, 4}));
    auto w = t.input(Tensor<double>(Shape{1, 2, 3, 3, 3}));
    auto bad_off = t.input(Tensor<double>(Shape{1, 80, 4, 4, 4}));
    CHECK_THROWS_AS(deform_conv3d(t, x, w, bad_off, Conv3dSpec::cubic(2, 1, 3, 1, 1, false)), std::invalid_argument);
    CHECK_THROWS_AS(deform_conv3d(t, x, w, bad_off, Conv3dSpec::cubic(3, 1, 3, 1, 1, false)), std::invalid_argument);
}

TEST_CASE("deform conv gradients (weights, offsets, input) vs finite differences") {
    Rng rng(6);
    auto p = DeformConv3dParams<double>::init(2, 2, 3, rng, "dc");
    // move the predictor off the zero point so sampling sits at fractional coords
    p.offset_w.value = random_normal<double>(p.offset_w.value.shape, rng, 0.05);
    p.offset_b.value = random_normal<double>(p.offset_b.value.shape, rng, 0.1);
    Parameter<double> x("x", random_normal<double>(Shape{1, 2, 5, 5, 5}, rng));
    auto build = [&](Tape<double>& t) {
        auto y = deform_conv3d_predicted(t, t.param(x), p);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        for (auto* q : p.all()) q->zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    auto rep = finite_difference_check<double>(
        fwd, acc, {{"x", &x}, {"weight", &p.weight}, {"offset_w", &p.offset_w}, {"offset_b", &p.offset_b}},
        {1e-5, 30});
    rep.print();
    CHECK(rep.max_rel() < 1e-5);
}

TEST_CASE("dsa block: all-zero parameters output exactly zero") {
    Rng rng(7);
    auto p = DsaParams<double>::init(4, 2, rng, "dsa");
    for (auto* q : p.all()) q->value.zero();
    Tape<double> t;
    auto y = dsa_forward(t, t.input(random_normal<double>(Shape{1, 4, 6, 6, 6}, rng)), p);
    REQUIRE(t.val(y).shape == Shape{1, 2, 6, 6, 6});
    for (int64_t i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == 0.0);
}

TEST_CASE("dsa block: forced attention values isolate the residual path") {
    Rng rng(8);
    auto p = DsaParams<double>::init(4, 2, rng, "dsa");
    // force chi_attn == 1: zero attn weights, bias 1 on the last conv
    p.attn1_w.value.zero();
    p.attn1_b.value.zero();
    p.attn2_w.value.zero();
    p.attn2_b.value.fill(1.0);
    Tensor<double> xv = random_normal<double>(Shape{1, 4, 5, 5, 5}, rng);
    Tape<double> t;
    auto y = dsa_forward(t, t.input(xv), p);
    // chi_res computed separately from the same parameters
    auto fused = relu(t, instance_norm3d(t,
                                         conv3d(t, t.input(xv), t.param(p.fuse_w), t.param(p.fuse_b),
                                                Conv3dSpec::cubic(4, 2, 3, 1, 1)),
                                         t.param(p.fuse_ng), t.param(p.fuse_nb)));
    auto res = deform_conv3d_predicted(t, fused, p.deform);
    for (int64_t i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == doctest::Approx(t.val(res)[i] + 1.0));

    // force chi_attn == 0: output vanishes
    p.attn2_b.value.zero();
    auto y0 = dsa_forward(t, t.input(xv), p);
    for (int64_t i = 0; i < t.val(y0).numel(); ++i) CHECK(t.val(y0)[i] == 0.0);
}

TEST_CASE("dsa block restores odd and even extents") {
    Rng rng(9);
    auto p = DsaParams<double>::init(4, 2, rng, "dsa");
    for (auto ext : {5, 6, 7}) {
        Tape<double> t;
        auto y = dsa_forward(t, t.input(random_normal<double>(Shape{1, 4, ext, ext, ext}, rng)), p);
        CHECK(t.val(y).shape == Shape{1, 2, ext, ext, ext});
    }
    Tape<double> t;
    CHECK_THROWS_AS(dsa_forward(t, t.input(Tensor<double>(Shape{1, 3, 6, 6, 6})), p), std::invalid_argument);
}

TEST_CASE("dsa literal-gate variant gates the fused input features") {
    Rng rng(10);
    auto p = DsaParams<double>::init(4, 2, rng, "dsa", /*literal=*/true);
    p.attn1_w.value.zero();
    p.attn1_b.value.zero();
    p.attn2_w.value.zero();
    p.attn2_b.value.fill(1.0);
    Tensor<double> xv = random_normal<double>(Shape{1, 4, 4, 4, 4}, rng);
    Tape<double> t;
    auto y = dsa_forward(t, t.input(xv), p);
    auto fused = relu(t, instance_norm3d(t,
                                         conv3d(t, t.input(xv), t.param(p.fuse_w), t.param(p.fuse_b),
                                                Conv3dSpec::cubic(4, 2, 3, 1, 1)),
                                         t.param(p.fuse_ng), t.param(p.fuse_nb)));
    for (int64_t i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == doctest::Approx(t.val(fused)[i] + 1.0));
}

TEST_CASE("dsa end-to-end gradients vs finite differences") {
    Rng rng(11);
    auto p = DsaParams<double>::init(4, 2, rng, "dsa");
    p.deform.offset_w.value = random_normal<double>(p.deform.offset_w.value.shape, rng, 0.03);
    p.deform.offset_b.value = random_normal<double>(p.deform.offset_b.value.shape, rng, 0.05);
    Parameter<double> x("x", random_normal<double>(Shape{1, 4, 6, 6, 6}, rng));
    auto build = [&](Tape<double>& t) {
        auto y = dsa_forward(t, t.param(x), p);
        return reduce_sum(t, mul(t, y, y));
    };
    auto fwd = [&]() {
        Tape<double> t;
        return t.scalar(build(t));
    };
    auto acc = [&]() {
        x.zero_grad();
        for (auto* q : p.all()) q->zero_grad();
        Tape<double> t;
        t.backward(build(t));
    };
    auto rep = finite_difference_check<double>(fwd, acc,
                                               {{"x", &x},
                                                {"fuse_w", &p.fuse_w},
                                                {"deform_w", &p.deform.weight},
                                                {"deform_offset_w", &p.deform.offset_w},
                                                {"attn1_w", &p.attn1_w},
                                                {"attn2_w", &p.attn2_w}},
                                               {1e-5, 20});
    rep.print();
    CHECK(rep.max_rel() < 1e-5);
}
