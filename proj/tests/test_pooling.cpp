#include <gtest/gtest.h>

#include <random>

#include "dpa/pooling.hpp"

using namespace dpa;

namespace {

Var lift(Tape& tape, const Tensor& t, bool rg = false) { return tape.leaf(t, rg); }

Tensor plane_1122(std::initializer_list<double> vals) {
    std::vector<double> v(vals);
    return Tensor({1, 1, 2, 2}, std::move(v));
}

double scalar_of(const Var& v) {
    EXPECT_EQ(v.v.numel(), 1);
    return v.v[0];
}

}  // namespace

TEST(AvgPool, SpatialPlaneMeanOracle) {
    // direct mean oracle: (1+2+3+4)/4
    Tape tape;
    Var y = avg_pool(lift(tape, plane_1122({1, 2, 3, 4})), PoolAxis::Spatial);
    ASSERT_EQ(y.v.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(scalar_of(y), 2.5);
}

TEST(AvgPool, ConstantPlane) {
    Tape tape;
    Var y = avg_pool(lift(tape, Tensor::full({2, 3, 4, 4}, 0.7)), PoolAxis::Spatial);
    ASSERT_EQ(y.v.shape(), (Shape{2, 3, 1, 1}));
    for (int64_t i = 0; i < y.v.numel(); ++i) ASSERT_DOUBLE_EQ(y.v[i], 0.7);
}

TEST(AvgPool, ChannelModeLocationMean) {
    Tape tape;
    Var y = avg_pool(lift(tape, Tensor({1, 2, 1, 1}, {0.0, 10.0})), PoolAxis::Channel);
    ASSERT_EQ(y.v.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(scalar_of(y), 5.0);
}

TEST(AvgPool, ChannelModeShape) {
    Tape tape;
    Var y = avg_pool(lift(tape, Tensor::ones({2, 3, 4, 5})), PoolAxis::Channel);
    EXPECT_EQ(y.v.shape(), (Shape{2, 20, 1, 1}));
}

TEST(MinPool, PlaneMinimum) {
    Tape tape;
    Var y = min_pool(lift(tape, plane_1122({1, 2, 3, 4})), PoolAxis::Spatial);
    EXPECT_DOUBLE_EQ(scalar_of(y), 1.0);
    Var c = min_pool(lift(tape, Tensor::full({1, 2, 3, 3}, -1.25)), PoolAxis::Spatial);
    for (int64_t i = 0; i < c.v.numel(); ++i) ASSERT_DOUBLE_EQ(c.v[i], -1.25);
}

TEST(MinPool, EqualsNegMaxOfNeg) {
    std::mt19937_64 rng(71);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = randn({2, 3, 3, 4}, rng);
        Tape tape;
        Var lhs = min_pool(lift(tape, x), PoolAxis::Spatial);
        Var rhs = neg(reduce_max(neg(lift(tape, x)), {2, 3}, true));
        for (int64_t i = 0; i < lhs.v.numel(); ++i) ASSERT_EQ(lhs.v[i], rhs.v[i]);
    }
}

TEST(GemPool, AlphaThreeOracle) {
    // direct formula oracle: ((1 + 8 + 27 + 64)/4)^(1/3) = 25^(1/3)
    Tape tape;
    Var y = gem_pool(lift(tape, plane_1122({1, 2, 3, 4})), PoolAxis::Spatial, {3.0, 1e-6});
    EXPECT_NEAR(scalar_of(y), std::cbrt(25.0), 1e-12);
    EXPECT_NEAR(scalar_of(y), 2.9240, 1e-4);
}

TEST(GemPool, AlphaOneCollapsesToAvg) {
    std::mt19937_64 rng(72);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = rand_uniform({2, 3, 4, 4}, rng, 0.01, 3.0);
        Tape tape;
        Var g = gem_pool(lift(tape, x), PoolAxis::Spatial, {1.0, 1e-12});
        Var a = avg_pool(lift(tape, x), PoolAxis::Spatial);
        for (int64_t i = 0; i < g.v.numel(); ++i) ASSERT_NEAR(g.v[i], a.v[i], 1e-12);
    }
}

TEST(GemPool, LargeAlphaApproachesMax) {
    // direct large-alpha oracle: ((1^64 + 2^64 + 3^64 + 4^64)/4)^(1/64)
    double acc = 0;
    for (double v : {1.0, 2.0, 3.0, 4.0}) acc += std::pow(v, 64.0);
    double oracle = std::pow(acc / 4.0, 1.0 / 64.0);
    Tape tape;
    Var y = gem_pool(lift(tape, plane_1122({1, 2, 3, 4})), PoolAxis::Spatial, {64.0, 1e-6});
    EXPECT_NEAR(scalar_of(y), oracle, 1e-10);
    // far closer to the max than the mean is
    EXPECT_GT(scalar_of(y), 3.9);
    EXPECT_LE(scalar_of(y), 4.0 + 1e-12);
}

TEST(GemPool, MonotoneInAlpha) {
    std::mt19937_64 rng(73);
    Tensor x = rand_uniform({1, 2, 3, 3}, rng, 0.1, 2.0);
    double prev = -1e300;
    for (double alpha : {1.0, 2.0, 4.0, 8.0, 16.0}) {
        Tape tape;
        Var y = gem_pool(lift(tape, x), PoolAxis::Spatial, {alpha, 1e-9});
        ASSERT_GE(y.v[0], prev - 1e-12);
        prev = y.v[0];
    }
}

TEST(GemPool, RejectsBadAlpha) {
    Tape tape;
    Var x = lift(tape, Tensor::ones({1, 1, 2, 2}));
    EXPECT_THROW(gem_pool(x, PoolAxis::Spatial, {0.0, 1e-6}), InvalidAlpha);
    EXPECT_THROW(gem_pool(x, PoolAxis::Spatial, {-2.0, 1e-6}), InvalidAlpha);
}

TEST(SoftPool, ScalarOracle) {
    // direct formula oracle: sum(e^x * x) / sum(e^x)
    std::vector<double> vals{1, 2, 3, 4};
    double num = 0, den = 0;
    for (double v : vals) {
        num += std::exp(v) * v;
        den += std::exp(v);
    }
    Tape tape;
    Var y = soft_pool(lift(tape, plane_1122({1, 2, 3, 4})), PoolAxis::Spatial);
    EXPECT_NEAR(scalar_of(y), num / den, 1e-12);
    EXPECT_NEAR(scalar_of(y), 3.4926, 1e-4);
}

TEST(SoftPool, ConstantRegion) {
    Tape tape;
    Var y = soft_pool(lift(tape, Tensor::full({1, 3, 2, 2}, -0.4)), PoolAxis::Spatial);
    for (int64_t i = 0; i < y.v.numel(); ++i) ASSERT_NEAR(y.v[i], -0.4, 1e-12);
}

TEST(SoftPool, RetainedMapSumsToScalar) {
    std::mt19937_64 rng(74);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = randn({2, 3, 3, 3}, rng);
        Tape tape;
        for (PoolAxis axis : {PoolAxis::Spatial, PoolAxis::Channel}) {
            Var retained = soft_pool(lift(tape, x), axis, SoftPoolMode::RetainedMap);
            ASSERT_EQ(retained.v.shape(), x.shape());
            Var scalar = soft_pool(lift(tape, x), axis, SoftPoolMode::Scalar);
            std::vector<int> axes = axis == PoolAxis::Spatial ? std::vector<int>{2, 3}
                                                              : std::vector<int>{1};
            Var summed = sum(retained, axes, true);
            ASSERT_EQ(summed.v.numel(), scalar.v.numel());
            for (int64_t i = 0; i < summed.v.numel(); ++i)
                ASSERT_NEAR(summed.v[i], scalar.v[i], 1e-10);
        }
    }
}

TEST(SoftPool, ShiftRelation) {
    std::mt19937_64 rng(75);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = randn({1, 2, 3, 3}, rng);
        double c = 5.0 + trial * 0.25;
        Tensor xs = unary_map(x, [c](double v) { return v + c; });
        Tape tape;
        Var y0 = soft_pool(lift(tape, x), PoolAxis::Spatial);
        Var y1 = soft_pool(lift(tape, xs), PoolAxis::Spatial);
        for (int64_t i = 0; i < y0.v.numel(); ++i) ASSERT_NEAR(y1.v[i], y0.v[i] + c, 1e-10);
    }
}

TEST(Pooling, OrderingInvariant) {
    // min <= avg <= soft <= max and min <= gem(alpha>=1) <= max;
    // soft >= avg by the monotone-weights argument
    std::mt19937_64 rng(76);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor x = rand_uniform({1, 1, 3, 3}, rng, 0.05, 3.0);
        Tape tape;
        double mn = min_pool(lift(tape, x), PoolAxis::Spatial).v[0];
        double av = avg_pool(lift(tape, x), PoolAxis::Spatial).v[0];
        double so = soft_pool(lift(tape, x), PoolAxis::Spatial).v[0];
        double ge = gem_pool(lift(tape, x), PoolAxis::Spatial, {3.0, 1e-9}).v[0];
        double mx = reduce_max(lift(tape, x), {2, 3}, true).v[0];
        ASSERT_LE(mn, av + 1e-12);
        ASSERT_LE(av, so + 1e-12);
        ASSERT_LE(so, mx + 1e-12);
        ASSERT_LE(mn, ge + 1e-12);
        ASSERT_LE(ge, mx + 1e-12);
    }
}

TEST(Pooling, GradChecksBothAxes) {
    std::mt19937_64 rng(77);
    for (PoolAxis axis : {PoolAxis::Spatial, PoolAxis::Channel}) {
        for (int trial = 0; trial < 3; ++trial) {
            Tensor x = rand_uniform({1, 4, 3, 3}, rng, 0.2, 2.0);
            double e_avg = grad_check(
                [axis](Tape&, Var& v) { return sum_all(mul(avg_pool(v, axis), avg_pool(v, axis))); },
                x);
            double e_gem = grad_check(
                [axis](Tape&, Var& v) {
                    return sum_all(mul(gem_pool(v, axis, {3.0, 1e-6}), gem_pool(v, axis, {3.0, 1e-6})));
                },
                x);
            double e_soft = grad_check(
                [axis](Tape&, Var& v) {
                    Var s = soft_pool(v, axis, SoftPoolMode::RetainedMap);
                    return sum_all(mul(s, s));
                },
                x);
            ASSERT_LT(e_avg, 1e-6);
            ASSERT_LT(e_gem, 1e-4);
            ASSERT_LT(e_soft, 1e-4);
        }
        // min needs a unique minimizer separated by > 1e-3
        Tensor x({1, 2, 2, 2}, {0.9, 0.4, 1.7, 1.2, 0.3, 1.1, 2.0, 0.8});
        double e_min = grad_check(
            [axis](Tape&, Var& v) { return sum_all(mul(min_pool(v, axis), min_pool(v, axis))); }, x);
        ASSERT_LT(e_min, 1e-4);
    }
}
