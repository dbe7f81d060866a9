#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vseg/gradcheck.hpp>
#include <vseg/ops.hpp>

using namespace vseg;

TEST_CASE("elementwise examples") {
    Tape<double> t;
    auto x = t.input(Tensor<double>(Shape{1}, 0.0));
    CHECK(t.scalar(sigmoid(t, x)) == doctest::Approx(0.5));

    auto r = t.input(Tensor<double>(Shape{2}, {-3.0, 2.5}));
    auto y = relu(t, r);
    CHECK(t.val(y)[0] == 0.0);
    CHECK(t.val(y)[1] == 2.5);

    auto a = t.input(Tensor<double>(Shape{2}, {1.0, 2.0}));
    auto b = t.input(Tensor<double>(Shape{2}, {3.0, 4.0}));
    auto s = add(t, a, b);
    CHECK(t.val(s)[0] == 4.0);
    CHECK(t.val(s)[1] == 6.0);
}

TEST_CASE("binary op shape mismatch names both shapes") {
    Tape<double> t;
    auto a = t.input(Tensor<double>(Shape{2, 3}));
    auto b = t.input(Tensor<double>(Shape{2, 2}));
    CHECK_THROWS_WITH_AS(add(t, a, b), doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("channel-vector and scalar broadcast") {
    Tape<double> t;
    Tensor<double> xv(Shape{2, 3, 1, 2, 2});
    Rng rng(7);
    for (auto& v : xv.data) v = rng.normal();
    auto x = t.input(xv, true);
    auto c = t.input(Tensor<double>(Shape{1, 3, 1, 1, 1}, {1.0, 2.0, 3.0}), true);
    auto y = mul(t, x, c);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t ch = 0; ch < 3; ++ch)
            for (int64_t i = 0; i < 4; ++i)
                CHECK(t.val(y)[(n * 3 + ch) * 4 + i] == doctest::Approx(xv[(n * 3 + ch) * 4 + i] * double(ch + 1)));
    t.backward(reduce_sum(t, y));
    // d/dc_k = sum of x over that channel
    for (int64_t ch = 0; ch < 3; ++ch) {
        double expect = 0.0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < 4; ++i) expect += xv[(n * 3 + ch) * 4 + i];
        CHECK(t.grad(c)[ch] == doctest::Approx(expect));
    }
}

TEST_CASE("softmax examples and invariant") {
    Tape<double> t;
    auto a = softmax_axis(t, t.input(Tensor<double>(Shape{3}, {0.0, 0.0, 0.0})), 0);
    for (int i = 0; i < 3; ++i) CHECK(t.val(a)[i] == doctest::Approx(1.0 / 3.0));

    auto b = softmax_axis(t, t.input(Tensor<double>(Shape{2}, {1000.0, 1000.0})), 0);
    CHECK(t.val(b)[0] == doctest::Approx(0.5));
    CHECK(std::isfinite(t.val(b)[0]));

    auto c = softmax_axis(t, t.input(Tensor<double>(Shape{2}, {0.0, std::log(3.0)})), 0);
    CHECK(t.val(c)[0] == doctest::Approx(0.25));
    CHECK(t.val(c)[1] == doctest::Approx(0.75));

    // rows sum to 1 for random input along a middle axis
    Rng rng(3);
    Tensor<double> big(Shape{2, 5, 3});
    for (auto& v : big.data) v = rng.normal() * 10.0;
    auto s = softmax_axis(t, t.input(big), 1);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t k = 0; k < 3; ++k) {
            double sum = 0.0;
            for (int64_t j = 0; j < 5; ++j) {
                const double v = t.val(s)[(n * 5 + j) * 3 + k];
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }

    CHECK_THROWS_AS(softmax_axis(t, t.input(Tensor<double>(Shape{2})), 3), std::invalid_argument);
}

TEST_CASE("linear layer examples") {
    Rng rng(11);
    Tape<double> t;
    // identity W, zero b
    Tensor<double> eye(Shape{3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    Tensor<double> xv(Shape{2, 3});
    for (auto& v : xv.data) v = rng.normal();
    auto y = linear(t, t.input(xv), t.input(eye), t.input(Tensor<double>(Shape{3})));
    for (int64_t i = 0; i < 6; ++i) CHECK(t.val(y)[i] == doctest::Approx(xv[i]));

    // zero W, constant bias broadcast
    auto y2 = linear(t, t.input(xv), t.input(Tensor<double>(Shape{4, 3})),
                     t.input(Tensor<double>(Shape{4}, {1.0, 2.0, 3.0, 4.0})));
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t o = 0; o < 4; ++o) CHECK(t.val(y2)[n * 4 + o] == doctest::Approx(double(o + 1)));

    // random 3x4 vs direct dot product
    Tensor<double> X(Shape{3, 4}), W(Shape{2, 4}), B(Shape{2});
    for (auto& v : X.data) v = rng.normal();
    for (auto& v : W.data) v = rng.normal();
    for (auto& v : B.data) v = rng.normal();
    auto y3 = linear(t, t.input(X), t.input(W), t.input(B));
    for (int64_t n = 0; n < 3; ++n)
        for (int64_t o = 0; o < 2; ++o) {
            double acc = B[o];
            for (int64_t k = 0; k < 4; ++k) acc += X[n * 4 + k] * W[o * 4 + k];
            CHECK(t.val(y3)[n * 2 + o] == doctest::Approx(acc));
        }

    CHECK_THROWS_AS(linear(t, t.input(Tensor<double>(Shape{2, 3})), t.input(Tensor<double>(Shape{2, 4})), Var<double>{}),
                    std::invalid_argument);
}

TEST_CASE("backward basics") {
    // loss = sum(x) -> grad all ones
    {
        Tape<double> t;
        Parameter<double> p("x", Tensor<double>(Shape{2, 3}, 1.5));
        auto loss = reduce_sum(t, t.param(p));
        t.backward(loss);
        for (int64_t i = 0; i < 6; ++i) CHECK(p.grad[i] == 1.0);
    }
    // loss = sum(x*x) -> grad 2x
    {
        Tape<double> t;
        Rng rng(5);
        Parameter<double> p("x", random_normal<double>(Shape{7}, rng));
        auto x = t.param(p);
        t.backward(reduce_sum(t, mul(t, x, x)));
        for (int64_t i = 0; i < 7; ++i) CHECK(p.grad[i] == doctest::Approx(2.0 * p.value[i]));
    }
}

TEST_CASE("backward error paths") {
    Tape<double> t;
    Parameter<double> p("x", Tensor<double>(Shape{3}, 1.0));
    auto x = t.param(p);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);  // non-scalar loss
    auto loss = reduce_sum(t, x);
    t.backward(loss);
    CHECK_THROWS_AS(t.backward(loss), std::logic_error);  // stale tape
}

TEST_CASE("unreachable parameter grads untouched") {
    Tape<double> t;
    Parameter<double> used("used", Tensor<double>(Shape{2}, 1.0));
    Parameter<double> unused("unused", Tensor<double>(Shape{2}, 1.0));
    auto a = t.param(used);
    t.param(unused);  // recorded leaf, never consumed
    t.backward(reduce_sum(t, a));
    CHECK(used.grad[0] == 1.0);
    CHECK(unused.grad[0] == 0.0);
}

TEST_CASE("replaying a composition is bit-identical") {
    Rng rng(17);
    Tensor<double> xv = random_normal<double>(Shape{2, 4, 3}, rng);
    auto run = [&]() {
        Tape<double> t;
        auto x = t.input(xv);
        auto y = softmax_axis(t, sigmoid(t, scale(t, x, 1.7)), 1);
        return t.val(y);
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.numel() == b.numel());
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("finite_difference_check: exact, smooth, and composite cases") {
    Rng rng(23);
    // f = sum(theta): analytic == numeric nearly exactly
    {
        Parameter<double> p("theta", random_normal<double>(Shape{6}, rng));
        auto fwd = [&]() {
            Tape<double> t;
            return t.scalar(reduce_sum(t, t.param(p)));
        };
        auto acc = [&]() {
            p.zero_grad();
            Tape<double> t;
            t.backward(reduce_sum(t, t.param(p)));
        };
        auto rep = finite_difference_check<double>(fwd, acc, {{"theta", &p}});
        CHECK(rep.max_rel() < 1e-10);
    }
    // f = sum(sigmoid(theta)) on 10 random elements
    {
        Parameter<double> p("theta", random_normal<double>(Shape{10}, rng));
        auto fwd = [&]() {
            Tape<double> t;
            return t.scalar(reduce_sum(t, sigmoid(t, t.param(p))));
        };
        auto acc = [&]() {
            p.zero_grad();
            Tape<double> t;
            t.backward(reduce_sum(t, sigmoid(t, t.param(p))));
        };
        auto rep = finite_difference_check<double>(fwd, acc, {{"theta", &p}});
        CHECK(rep.max_rel() < 1e-7);
    }
    // composite graph mixing ops
    {
        Parameter<double> p("theta", random_normal<double>(Shape{2, 4}, rng, 0.5));
        auto build = [&](Tape<double>& t) {
            auto x = t.param(p);
            auto s = softmax_axis(t, x, 1);
            auto y = mul(t, sigmoid(t, x), s);
            return reduce_mean(t, add(t, y, relu(t, x)));
        };
        auto fwd = [&]() {
            Tape<double> t;
            return t.scalar(build(t));
        };
        auto acc = [&]() {
            p.zero_grad();
            Tape<double> t;
            t.backward(build(t));
        };
        auto rep = finite_difference_check<double>(fwd, acc, {{"theta", &p}});
        CHECK(rep.max_rel() < 1e-7);
    }
}

TEST_CASE("non-deterministic loss is detected") {
    int calls = 0;
    Parameter<double> p("theta", Tensor<double>(Shape{1}, 1.0));
    auto fwd = [&]() { return double(++calls); };
    auto acc = [&]() {};
    CHECK_THROWS_AS(finite_difference_check<double>(fwd, acc, {{"theta", &p}}), std::runtime_error);
}

TEST_CASE("gradient accumulation across backward passes") {
    Parameter<double> p("x", Tensor<double>(Shape{2}, 3.0));
    for (int rep = 0; rep < 2; ++rep) {
        Tape<double> t;
        t.backward(reduce_sum(t, t.param(p)));
    }
    CHECK(p.grad[0] == 2.0);  // += per pass, reset only explicitly
    p.zero_grad();
    CHECK(p.grad[0] == 0.0);
}
