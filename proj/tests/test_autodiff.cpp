#include <gtest/gtest.h>

#include "cfwd/autodiff.hpp"
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

TEST(Tape, ForwardValuesAndChaining) {
    Tape t;
    Var a = t.leaf(cfwd::scalar_tensor(3.0), true);
    Var b = t.leaf(cfwd::scalar_tensor(4.0), true);
    Var c = cfwd::ad::add(t, cfwd::ad::mul(t, a, b), a);  // 3*4 + 3
    EXPECT_DOUBLE_EQ(t.val(c)[0], 15.0);
    t.backward(c);
    EXPECT_DOUBLE_EQ(t.grad(a)[0], 5.0);  // b + 1
    EXPECT_DOUBLE_EQ(t.grad(b)[0], 3.0);
}

TEST(Tape, GradOfUnreachedNodeIsZero) {
    Tape t;
    Var a = t.leaf(cfwd::scalar_tensor(2.0), true);
    Var orphan = t.leaf(cfwd::scalar_tensor(7.0), true);
    Var l = cfwd::ad::square(t, a);
    t.backward(l);
    EXPECT_DOUBLE_EQ(t.grad(orphan)[0], 0.0);
}

TEST(Tape, BackwardRequiresScalar) {
    Tape t;
    Var a = t.leaf(Tensor({2}, {1.0, 2.0}), true);
    EXPECT_THROW(t.backward(a), cfwd::Error);
}

TEST(Autodiff, ElementwiseBinaryGradients) {
    auto x = rand_t({3, 4}, 1);
    auto y = rand_t({3, 4}, 2, 0.5, 1.5);  // keep divisor away from zero
    using namespace cfwd::ad;
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return sum(t, add(t, v[0], v[1])); }), 1e-6);
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return sum(t, sub(t, v[0], v[1])); }), 1e-6);
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return sum(t, mul(t, v[0], v[1])); }), 1e-6);
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return sum(t, div(t, v[0], v[1])); }), 1e-5);
}

TEST(Autodiff, ScalarBroadcast) {
    auto x = rand_t({2, 3}, 3);
    auto s = cfwd::scalar_tensor(0.7);
    using namespace cfwd::ad;
    EXPECT_LT(grad_check({x, s}, [](Tape& t, const std::vector<Var>& v) { return sum(t, mul(t, v[0], v[1])); }), 1e-6);
    EXPECT_LT(grad_check({s, x}, [](Tape& t, const std::vector<Var>& v) { return sum(t, div(t, v[0], v[1])); }),
              1e-5);

    Tape t;
    Var a = t.leaf(x);
    Var b = t.leaf(s);
    EXPECT_EQ(t.val(cfwd::ad::mul(t, a, b)).shape, x.shape);
    EXPECT_EQ(t.val(cfwd::ad::mul(t, b, a)).shape, x.shape);
}

TEST(Autodiff, UnaryGradients) {
    auto x = rand_t({3, 3}, 4, 0.2, 1.8);  // positive, away from kinks
    using namespace cfwd::ad;
    EXPECT_LT(grad_check({x}, [](Tape& t, const std::vector<Var>& v) { return sum(t, exp_(t, v[0])); }), 1e-5);
    EXPECT_LT(grad_check({x}, [](Tape& t, const std::vector<Var>& v) { return sum(t, sqrt_(t, v[0])); }), 1e-5);
    EXPECT_LT(grad_check({x}, [](Tape& t, const std::vector<Var>& v) { return sum(t, square(t, v[0])); }), 1e-6);
    EXPECT_LT(grad_check({x}, [](Tape& t, const std::vector<Var>& v) { return sum(t, silu(t, v[0])); }), 1e-5);
    EXPECT_LT(grad_check({x}, [](Tape& t, const std::vector<Var>& v) { return sum(t, affine(t, v[0], 2.5, -1.0)); }),
              1e-6);

    auto xs = rand_t({4, 4}, 5);  // signed, for abs away from 0 w.h.p.
    EXPECT_LT(grad_check({xs}, [](Tape& t, const std::vector<Var>& v) { return sum(t, abs_(t, v[0])); }), 1e-5);
}

TEST(Autodiff, ClampGradientPassesInsideOnly) {
    Tape t;
    Var a = t.leaf(Tensor({3}, {-0.5, 0.5, 1.5}), true);
    Var l = cfwd::ad::sum(t, cfwd::ad::clamp(t, a, 0.0, 1.0));
    EXPECT_DOUBLE_EQ(t.val(l)[0], 0.0 + 0.5 + 1.0);
    t.backward(l);
    Tensor g = t.grad(a);
    EXPECT_DOUBLE_EQ(g[0], 0.0);
    EXPECT_DOUBLE_EQ(g[1], 1.0);
    EXPECT_DOUBLE_EQ(g[2], 0.0);
}

TEST(Autodiff, Reductions) {
    auto x = rand_t({5, 2}, 6);
    auto y = rand_t({5, 2}, 7);
    using namespace cfwd::ad;
    EXPECT_LT(grad_check({x}, [](Tape& t, const std::vector<Var>& v) { return mean(t, v[0]); }), 1e-6);
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return dot(t, v[0], v[1]); }), 1e-6);
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return mse_loss(t, v[0], v[1]); }), 1e-5);
    EXPECT_LT(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) { return l1_loss(t, v[0], v[1]); }), 1e-5);
}

TEST(Autodiff, PackAndNormalizeAndCosine) {
    using namespace cfwd::ad;
    auto x = rand_t({6}, 8, 0.1, 1.0);
    auto y = rand_t({6}, 9, 0.1, 1.0);
    EXPECT_LT(grad_check({x, y},
                         [](Tape& t, const std::vector<Var>& v) { return cosine(t, v[0], v[1]); }),
              1e-5);
    EXPECT_LT(grad_check({x},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var n = l2_normalize(t, v[0]);
                             return dot(t, n, t.constant(Tensor({6}, {1, -1, 2, 0.5, -0.5, 1})));
                         }),
              1e-5);
    EXPECT_LT(grad_check({x, y},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var p = pack(t, {mean(t, v[0]), mean(t, v[1]), dot(t, v[0], v[1])});
                             return sum(t, square(t, p));
                         }),
              1e-5);

    // cosine of identical vectors is exactly 1
    Tape t;
    Var a = t.leaf(x);
    EXPECT_NEAR(t.val(cosine(t, a, a))[0], 1.0, 1e-12);

    // zero vector must be rejected
    Tape t2;
    Var z = t2.leaf(cfwd::zeros({4}), true);
    EXPECT_THROW(l2_normalize(t2, z), cfwd::Error);
}

TEST(Autodiff, ShapeOps) {
    using namespace cfwd::ad;
    auto x = rand_t({4, 6, 2}, 10);
    auto y = rand_t({4, 6, 3}, 11);
    EXPECT_LT(grad_check({x},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var r = reshape(t, v[0], {6, 8});
                             return mean(t, square(t, r));
                         }),
              1e-5);
    EXPECT_LT(grad_check({x, y},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var c = concat_ch(t, {v[0], v[1]});
                             Var s = slice_ch(t, c, 1, 4);
                             return mean(t, square(t, s));
                         }),
              1e-5);
    EXPECT_LT(grad_check({x},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var c = crop(t, v[0], 1, 2, 2, 3);
                             return mean(t, square(t, c));
                         }),
              1e-5);

    Tape t;
    Var a = t.leaf(x);
    Var b = t.leaf(y);
    Var c = concat_ch(t, {a, b});
    EXPECT_EQ(t.val(c).shape, (std::vector<int>{4, 6, 5}));
    EXPECT_DOUBLE_EQ(t.val(c).at(2, 3, 3), y.at(2, 3, 1));
    Var s = slice_ch(t, c, 2, 5);
    EXPECT_DOUBLE_EQ(t.val(s).at(1, 1, 0), y.at(1, 1, 0));
}

TEST(Autodiff, MatmulLinearSoftmax) {
    using namespace cfwd::ad;
    auto A = rand_t({3, 4}, 12);
    auto B = rand_t({4, 2}, 13);
    auto b = rand_t({2}, 14);
    EXPECT_LT(grad_check({A, B},
                         [](Tape& t, const std::vector<Var>& v) {
                             return mean(t, square(t, matmul(t, v[0], v[1])));
                         }),
              1e-5);
    EXPECT_LT(grad_check({A, B, b},
                         [](Tape& t, const std::vector<Var>& v) {
                             return mean(t, square(t, linear(t, v[0], v[1], v[2])));
                         }),
              1e-5);
    EXPECT_LT(grad_check({A},
                         [](Tape& t, const std::vector<Var>& v) {
                             Var sm = softmax_rows(t, v[0]);
                             return mean(t, square(t, sm));
                         }),
              1e-5);
    EXPECT_LT(grad_check({A},
                         [](Tape& t, const std::vector<Var>& v) {
                             return mean(t, square(t, transpose2d(t, v[0])));
                         }),
              1e-5);

    // matmul against a hand-computed 2x2 case
    Tape t;
    Var x = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    Var y = t.leaf(Tensor({2, 2}, {5, 6, 7, 8}));
    Tensor out = t.val(matmul(t, x, y));
    EXPECT_DOUBLE_EQ(out[0], 19.0);
    EXPECT_DOUBLE_EQ(out[1], 22.0);
    EXPECT_DOUBLE_EQ(out[2], 43.0);
    EXPECT_DOUBLE_EQ(out[3], 50.0);

    // softmax rows sum to one
    Var sm = softmax_rows(t, y);
    EXPECT_NEAR(t.val(sm)[0] + t.val(sm)[1], 1.0, 1e-12);
}

TEST(Autodiff, ReusedNodeAccumulatesBothPaths) {
    Tape t;
    Var a = t.leaf(cfwd::scalar_tensor(2.0), true);
    Var sq = cfwd::ad::square(t, a);
    Var l = cfwd::ad::add(t, sq, sq);  // 2*a^2, d/da = 4a
    t.backward(l);
    EXPECT_DOUBLE_EQ(t.grad(a)[0], 8.0);
}
