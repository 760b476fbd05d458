#include <gtest/gtest.h>

#include "cfwd/nn.hpp"
#include "test_util.hpp"

using cfwd::Rng;
using cfwd::Tensor;
using cfwd::ad::Tape;
using cfwd::ad::Var;
using cfwd::testutil::grad_check;

namespace {

Tensor rand_t(std::vector<int> shape, unsigned seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    return cfwd::rand_uniform(std::move(shape), rng, lo, hi);
}

}  // namespace

TEST(Conv2d, MatchesHandComputedValues) {
    Tape t;
    // 3x3 single-channel input, 2x2 kernel of ones, zero bias
    Var x = t.leaf(Tensor({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    Var w = t.leaf(cfwd::full({2, 2, 1, 1}, 1.0));
    Var b = t.leaf(cfwd::zeros({1}));
    Tensor out = t.val(cfwd::ad::conv2d(t, x, w, b));
    EXPECT_EQ(out.shape, (std::vector<int>{2, 2, 1}));
    EXPECT_DOUBLE_EQ(out[0], 1 + 2 + 4 + 5);
    EXPECT_DOUBLE_EQ(out[3], 5 + 6 + 8 + 9);
}

TEST(Conv2d, PaddingStrideDilationShapes) {
    Tape t;
    Var x = t.leaf(cfwd::zeros({8, 8, 3}));
    Var w = t.leaf(cfwd::zeros({3, 3, 3, 5}));
    Var b = t.leaf(cfwd::zeros({5}));
    EXPECT_EQ(t.val(cfwd::ad::conv2d(t, x, w, b, 1, 1)).shape, (std::vector<int>{8, 8, 5}));
    EXPECT_EQ(t.val(cfwd::ad::conv2d(t, x, w, b, 2, 1)).shape, (std::vector<int>{4, 4, 5}));
    EXPECT_EQ(t.val(cfwd::ad::conv2d(t, x, w, b, 1, 2, 2)).shape, (std::vector<int>{8, 8, 5}));
}

TEST(Conv2d, Gradients) {
    auto x = rand_t({5, 5, 2}, 21);
    auto w = rand_t({3, 3, 2, 3}, 22);
    auto b = rand_t({3}, 23);
    EXPECT_LT(grad_check({x, w, b},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var y = cfwd::ad::conv2d(t, v[0], v[1], v[2], 1, 1);
                             return cfwd::ad::mean(t, cfwd::ad::square(t, y));
                         }),
              1e-4);
    EXPECT_LT(grad_check({x, w, b},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var y = cfwd::ad::conv2d(t, v[0], v[1], v[2], 2, 1);
                             return cfwd::ad::mean(t, cfwd::ad::square(t, y));
                         }),
              1e-4);
}

TEST(DepthwiseConv2d, SeparatesChannelsAndMatchesGradients) {
    // one channel constant, kernel picks it up independently of the other
    Tape t;
    Tensor xv({2, 2, 2});
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            xv.at(y, x, 0) = 1.0;
            xv.at(y, x, 1) = 10.0;
        }
    Var x = t.leaf(xv);
    Tensor wv({1, 1, 2});
    wv[0] = 2.0;
    wv[1] = 3.0;
    Var w = t.leaf(wv);
    Var b = t.leaf(cfwd::zeros({2}));
    Tensor out = t.val(cfwd::ad::depthwise_conv2d(t, x, w, b));
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), 2.0);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 1), 30.0);

    auto xr = rand_t({5, 4, 3}, 24);
    auto wr = rand_t({3, 3, 3}, 25);
    auto br = rand_t({3}, 26);
    EXPECT_LT(grad_check({xr, wr, br},
                         [](Tape& tt, const std::vector<Var>& v) {
                             Var y = cfwd::ad::depthwise_conv2d(tt, v[0], v[1], v[2], 1, 2, 2);
                             return cfwd::ad::mean(tt, cfwd::ad::square(tt, y));
                         }),
              1e-4);
}

TEST(Resample, UpsampleAndAvgpool) {
    Tape t;
    Var x = t.leaf(Tensor({1, 2, 1}, {1.0, 2.0}), true);
    Tensor up = t.val(cfwd::ad::upsample_nearest2x(t, x));
    EXPECT_EQ(up.shape, (std::vector<int>{2, 4, 1}));
    EXPECT_DOUBLE_EQ(up.at(1, 1, 0), 1.0);
    EXPECT_DOUBLE_EQ(up.at(0, 2, 0), 2.0);

    Var y = t.leaf(Tensor({2, 2, 1}, {1.0, 2.0, 3.0, 4.0}), true);
    Tensor pooled = t.val(cfwd::ad::avgpool2x2(t, y));
    EXPECT_EQ(pooled.shape, (std::vector<int>{1, 1, 1}));
    EXPECT_DOUBLE_EQ(pooled[0], 2.5);

    auto xr = rand_t({4, 6, 2}, 27);
    EXPECT_LT(grad_check({xr},
                         [](Tape& tt, const std::vector<Var>& v) {
                             Var u = cfwd::ad::upsample_nearest2x(tt, v[0]);
                             return cfwd::ad::mean(tt, cfwd::ad::square(tt, u));
                         }),
              1e-5);
    EXPECT_LT(grad_check({xr},
                         [](Tape& tt, const std::vector<Var>& v) {
                             Var p = cfwd::ad::avgpool2x2(tt, v[0]);
                             return cfwd::ad::mean(tt, cfwd::ad::square(tt, p));
                         }),
              1e-5);
}

TEST(Resample, AdaptivePoolAveragesCells) {
    Tape t;
    Var x = t.leaf(Tensor({2, 2, 1}, {1.0, 2.0, 3.0, 4.0}));
    Tensor g1 = t.val(cfwd::ad::adaptive_avgpool_grid(t, x, 1));
    EXPECT_EQ(g1.shape, (std::vector<int>{1, 1, 1}));
    EXPECT_DOUBLE_EQ(g1[0], 2.5);
    // grid equal to input size is the identity
    Tensor g2 = t.val(cfwd::ad::adaptive_avgpool_grid(t, x, 2));
    EXPECT_DOUBLE_EQ(g2.at(1, 0, 0), 3.0);

    auto xr = rand_t({5, 7, 2}, 28);
    EXPECT_LT(grad_check({xr},
                         [](Tape& tt, const std::vector<Var>& v) {
                             Var p = cfwd::ad::adaptive_avgpool_grid(tt, v[0], 3);
                             return cfwd::ad::mean(tt, cfwd::ad::square(tt, p));
                         }),
              1e-5);
}

TEST(GroupNorm, NormalizesPerGroupAndMatchesGradients) {
    Tape t;
    // gamma=1, beta=0: each group becomes zero-mean unit-variance
    auto xv = rand_t({4, 4, 4}, 29, 1.0, 3.0);
    Var x = t.leaf(xv);
    Var gamma = t.leaf(cfwd::full({4}, 1.0));
    Var beta = t.leaf(cfwd::zeros({4}));
    Tensor out = t.val(cfwd::ad::group_norm(t, x, gamma, beta, 2));
    for (int g = 0; g < 2; ++g) {
        double m = 0.0, v2 = 0.0;
        long n = 0;
        for (int y = 0; y < 4; ++y)
            for (int xx = 0; xx < 4; ++xx)
                for (int k = 2 * g; k < 2 * (g + 1); ++k) {
                    m += out.at(y, xx, k);
                    ++n;
                }
        m /= static_cast<double>(n);
        for (int y = 0; y < 4; ++y)
            for (int xx = 0; xx < 4; ++xx)
                for (int k = 2 * g; k < 2 * (g + 1); ++k) v2 += (out.at(y, xx, k) - m) * (out.at(y, xx, k) - m);
        v2 /= static_cast<double>(n);
        EXPECT_NEAR(m, 0.0, 1e-10);
        EXPECT_NEAR(v2, 1.0, 1e-4);  // eps shifts variance slightly below 1
    }

    auto gm = rand_t({4}, 30, 0.5, 1.5);
    auto bt = rand_t({4}, 31);
    EXPECT_LT(grad_check({xv, gm, bt},
                         [](Tape& tt, const std::vector<Var>& v) {
                             Var y = cfwd::ad::group_norm(tt, v[0], v[1], v[2], 2);
                             Tensor tgt = cfwd::full({4, 4, 4}, 0.3);
                             return cfwd::ad::mse_loss(tt, y, tt.constant(tgt));
                         }),
              1e-4);
}

TEST(GroupNorm, RejectsIndivisibleGroups) {
    Tape t;
    Var x = t.leaf(cfwd::zeros({2, 2, 3}));
    Var gamma = t.leaf(cfwd::full({3}, 1.0));
    Var beta = t.leaf(cfwd::zeros({3}));
    EXPECT_THROW(cfwd::ad::group_norm(t, x, gamma, beta, 2), cfwd::Error);
}

TEST(Attention, UniformWhenQueriesAreZero) {
    Tape t;
    // zero queries -> uniform attention -> output is the mean of v rows
    Var q = t.leaf(cfwd::zeros({2, 2, 3}));
    auto kv = rand_t({2, 2, 3}, 32);
    auto vv = rand_t({2, 2, 2}, 33);
    Var k = t.leaf(kv);
    Var v = t.leaf(vv);
    Tensor out = t.val(cfwd::ad::spatial_attention(t, q, k, v));
    double m0 = 0.0;
    for (int i = 0; i < 4; ++i) m0 += vv[i * 2];
    m0 /= 4.0;
    EXPECT_NEAR(out.at(0, 0, 0), m0, 1e-12);
    EXPECT_NEAR(out.at(1, 1, 0), m0, 1e-12);
}

TEST(Attention, Gradients) {
    auto q = rand_t({2, 2, 3}, 34);
    auto k = rand_t({2, 2, 3}, 35);
    auto v = rand_t({2, 2, 3}, 36);
    EXPECT_LT(grad_check({q, k, v},
                         [](Tape& t, const std::vector<Var>& vars) {
                             Var o = cfwd::ad::spatial_attention(t, vars[0], vars[1], vars[2]);
                             return cfwd::ad::mean(t, cfwd::ad::square(t, o));
                         }),
              1e-4);
}

TEST(ParamStore, AddGetCountAndBind) {
    cfwd::ad::ParamStore ps;
    ps.add("a.weight", cfwd::zeros({3, 3, 2, 4}));
    ps.add("a.bias", cfwd::zeros({4}));
    EXPECT_EQ(ps.parameter_count(), 3 * 3 * 2 * 4 + 4);
    EXPECT_THROW(ps.get("missing"), cfwd::Error);

    Tape t;
    auto bound = cfwd::ad::bind(t, ps, true);
    EXPECT_TRUE(t.requires_grad(bound["a.weight"]));
    EXPECT_EQ(t.val(bound["a.bias"]).shape, (std::vector<int>{4}));
    EXPECT_THROW(bound["missing"], cfwd::Error);
}

TEST(Adam, ConvergesOnQuadratic) {
    cfwd::ad::ParamStore ps;
    ps.add("x", cfwd::full({2}, 5.0));
    cfwd::ad::Adam opt(0.1);
    for (int i = 0; i < 500; ++i) {
        Tape t;
        auto bound = cfwd::ad::bind(t, ps, true);
        Var loss = cfwd::ad::mean(t, cfwd::ad::square(t, bound["x"]));
        t.backward(loss);
        opt.step(ps, {t.grad(bound["x"])});
    }
    EXPECT_LT(std::abs(ps.get("x")[0]), 1e-2);
    EXPECT_LT(std::abs(ps.get("x")[1]), 1e-2);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    // with bias correction the first update is exactly lr * sign(grad)
    cfwd::ad::ParamStore ps;
    ps.add("x", cfwd::full({1}, 1.0));
    cfwd::ad::Adam opt(0.05);
    Tensor g({1}, {3.0});
    opt.step(ps, {g});
    EXPECT_NEAR(ps.get("x")[0], 1.0 - 0.05, 1e-6);
}

TEST(Helpers, PickGroupsAndInit) {
    EXPECT_EQ(cfwd::ad::pick_groups(32), 8);
    EXPECT_EQ(cfwd::ad::pick_groups(12), 6);
    EXPECT_EQ(cfwd::ad::pick_groups(7), 7);
    EXPECT_EQ(cfwd::ad::pick_groups(5), 5);
    EXPECT_EQ(cfwd::ad::pick_groups(1), 1);

    Rng rng(99);
    Tensor w = cfwd::ad::init_uniform({3, 3, 4, 8}, 3 * 3 * 4, rng);
    double bound = 1.0 / 6.0;
    for (long i = 0; i < w.numel(); ++i) {
        EXPECT_LE(std::abs(w[i]), bound);
    }
}
