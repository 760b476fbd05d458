#include <gtest/gtest.h>

#include "cfwd/hfpm.hpp"
#include "test_util.hpp"

using cfwd::HfpmConfig;
using cfwd::HfpmParams;
using cfwd::HfpmVersion;
using cfwd::Rng;
using cfwd::SubbandTriple;
using cfwd::Tensor;
using cfwd::WaveletPyramid;

namespace {

SubbandTriple random_triple(int h, int w, int c, Rng& rng) {
    return {cfwd::randn({h, w, c}, rng), cfwd::randn({h, w, c}, rng), cfwd::randn({h, w, c}, rng)};
}

WaveletPyramid random_pyramid(int levels, int side, int c, Rng& rng) {
    WaveletPyramid p;
    p.levels = levels;
    int s = side;
    for (int k = 1; k <= levels; ++k) {
        s /= 2;
        p.details.push_back(random_triple(s, s, c, rng));
    }
    p.approx = cfwd::randn({s, s, c}, rng);
    return p;
}

/// Forces the enhancement to the identity by zeroing the band-space output
/// projections: the global residual then passes each band through unchanged.
void zero_output_stage(HfpmParams& hp) {
    for (const char* pre : {"v", "h", "d"}) {
        for (const char* leaf : {".out.pw.weight", ".out.pw.bias"}) {
            Tensor& t = hp.store.get(std::string(pre) + leaf);
            std::fill(t.data.begin(), t.data.end(), 0.0);
        }
    }
}

}  // namespace

TEST(InitHfpm, DeterministicAndSeedSensitive) {
    HfpmConfig cfg{3, 8};
    auto a = cfwd::init_hfpm(5, cfg);
    auto b = cfwd::init_hfpm(5, cfg);
    auto c = cfwd::init_hfpm(6, cfg);
    ASSERT_EQ(a.store.entries.size(), b.store.entries.size());
    for (std::size_t i = 0; i < a.store.entries.size(); ++i)
        EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(a.store.entries[i].second, b.store.entries[i].second), 0.0);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.store.entries.size(); ++i)
        if (cfwd::max_abs_diff(a.store.entries[i].second, c.store.entries[i].second) > 0.0) any_diff = true;
    EXPECT_TRUE(any_diff);
    EXPECT_EQ(a.fingerprint, c.fingerprint);
    EXPECT_TRUE(a.store.all_finite_params());
}

TEST(InitHfpm, ClosedFormParameterCount) {
    const int c = 3, f = 16;
    auto p = cfwd::init_hfpm(1, HfpmConfig{c, f});
    long band_in = (9 * c + c) + (c * f + f);                     // depthwise 3x3 + pointwise
    long band_tail = 2 * (9 * f * f + f)                          // dilated pair
                     + (9 * f + f) + (f * c + c);                 // output depthwise + pointwise
    long fuse = 2 * f * f + f;
    long attn = 4 * (f * f + f);
    EXPECT_EQ(p.store.parameter_count(), 3 * (band_in + band_tail) + fuse + attn);
}

TEST(InitHfpm, RejectsBadArchitectures) {
    EXPECT_THROW(cfwd::init_hfpm(1, HfpmConfig{0, 8}), cfwd::Error);
    EXPECT_THROW(cfwd::init_hfpm(1, HfpmConfig{3, 0}), cfwd::Error);
}

TEST(InitHfpm, VersionStringsRoundTrip) {
    for (auto v : {HfpmVersion::v1, HfpmVersion::v2, HfpmVersion::v3})
        EXPECT_EQ(cfwd::hfpm_version_from(cfwd::to_string(v)), v);
    EXPECT_THROW(cfwd::hfpm_version_from("v4"), cfwd::Error);
}

TEST(EnhanceDetails, ShapePreservedAt128) {
    auto hp = cfwd::init_hfpm(2, HfpmConfig{3, 8});
    Rng rng(1);
    SubbandTriple in = random_triple(128, 128, 3, rng);
    SubbandTriple out = cfwd::enhance_details(in, hp);
    EXPECT_EQ(out.V.shape, in.V.shape);
    EXPECT_EQ(out.H.shape, in.H.shape);
    EXPECT_EQ(out.D.shape, in.D.shape);
    EXPECT_TRUE(cfwd::all_finite(out.V) && cfwd::all_finite(out.H) && cfwd::all_finite(out.D));
}

TEST(EnhanceDetails, DeterministicGivenParams) {
    auto hp = cfwd::init_hfpm(3, HfpmConfig{3, 8});
    Rng rng(2);
    SubbandTriple in = random_triple(16, 16, 3, rng);
    SubbandTriple a = cfwd::enhance_details(in, hp);
    SubbandTriple b = cfwd::enhance_details(in, hp);
    EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(a.V, b.V), 0.0);
    EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(a.H, b.H), 0.0);
    EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(a.D, b.D), 0.0);
}

TEST(EnhanceDetails, ZeroedOutputStageIsIdentity) {
    auto hp = cfwd::init_hfpm(4, HfpmConfig{3, 8});
    zero_output_stage(hp);
    Rng rng(3);
    SubbandTriple in = random_triple(12, 12, 3, rng);
    SubbandTriple out = cfwd::enhance_details(in, hp);
    EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(out.V, in.V), 0.0);
    EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(out.H, in.H), 0.0);
    EXPECT_DOUBLE_EQ(cfwd::max_abs_diff(out.D, in.D), 0.0);
}

TEST(EnhanceDetails, MismatchedBandsRejected) {
    auto hp = cfwd::init_hfpm(4, HfpmConfig{3, 8});
    Rng rng(4);
    SubbandTriple in = random_triple(8, 8, 3, rng);
    in.D = cfwd::randn({4, 4, 3}, rng);
    EXPECT_THROW(cfwd::enhance_details(in, hp), cfwd::Error);
}

TEST(EnhanceDetails, EveryParameterGradientMatchesFiniteDifferences) {
    // micro scale: 8x8 single-channel bands, width 4
    HfpmConfig cfg{1, 4};
    auto hp = cfwd::init_hfpm(7, cfg);
    Rng rng(5);
    SubbandTriple in = random_triple(8, 8, 1, rng);
    auto loss_fn = [&hp, &in](cfwd::ad::Tape& t, const std::vector<cfwd::ad::Var>& vars) {
        cfwd::ad::BoundParams bp;
        bp.store = &hp.store;
        bp.vars = vars;
        auto out = cfwd::ad::enhance_details(t, bp, t.constant(in.V), t.constant(in.H), t.constant(in.D));
        using cfwd::ad::mean;
        using cfwd::ad::square;
        cfwd::ad::Var s = cfwd::ad::add(t, mean(t, square(t, out.V)), mean(t, square(t, out.H)));
        return cfwd::ad::add(t, s, mean(t, square(t, out.D)));
    };
    std::vector<std::pair<std::string, double>> per_tensor;
    cfwd::testutil::grad_check_params(hp.store, loss_fn, 1e-4, &per_tensor);
    EXPECT_EQ(per_tensor.size(), hp.store.entries.size());
    for (const auto& [name, rel] : per_tensor) EXPECT_LT(rel, 1e-3) << "parameter " << name;
}

TEST(HfpmLoss, IdentityParamsAndEqualPyramidsGiveZero) {
    auto hp = cfwd::init_hfpm(8, HfpmConfig{3, 8});
    zero_output_stage(hp);
    Rng rng(6);
    WaveletPyramid p = random_pyramid(2, 32, 3, rng);
    for (auto v : {HfpmVersion::v1, HfpmVersion::v2, HfpmVersion::v3})
        EXPECT_DOUBLE_EQ(cfwd::hfpm_loss(p, p, hp, v, 1.0, 1.0), 0.0);
}

TEST(HfpmLoss, V3IsMeanOfPerLevelTerms) {
    // recompute v3 from single-level pyramids: with K levels it must equal the
    // average of the per-level three-band losses
    auto hp = cfwd::init_hfpm(9, HfpmConfig{3, 8});
    Rng rng(7);
    WaveletPyramid low = random_pyramid(2, 32, 3, rng);
    WaveletPyramid ref = random_pyramid(2, 32, 3, rng);
    double v3 = cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v3, 0.7, 0.3);

    std::vector<double> level_terms;
    for (int k = 0; k < 2; ++k) {
        WaveletPyramid lo1{1, low.approx, {low.details[static_cast<std::size_t>(k)]}};
        WaveletPyramid re1{1, ref.approx, {ref.details[static_cast<std::size_t>(k)]}};
        level_terms.push_back(cfwd::hfpm_loss(lo1, re1, hp, HfpmVersion::v2, 0.7, 0.3));
    }
    EXPECT_NEAR(v3, 0.5 * (level_terms[0] + level_terms[1]), 1e-12);

    // v2 sees only the finest level
    double v2 = cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v2, 0.7, 0.3);
    EXPECT_NEAR(v2, level_terms[0], 1e-12);
    EXPECT_GT(std::abs(v3 - v2), 0.0);
}

TEST(HfpmLoss, V2EqualsV3AtSingleLevel) {
    auto hp = cfwd::init_hfpm(10, HfpmConfig{3, 8});
    Rng rng(8);
    WaveletPyramid low = random_pyramid(1, 16, 3, rng);
    WaveletPyramid ref = random_pyramid(1, 16, 3, rng);
    EXPECT_DOUBLE_EQ(cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v2, 1.0, 1.0),
                     cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v3, 1.0, 1.0));
}

TEST(HfpmLoss, V1ComparesApproximationsOnly) {
    auto hp = cfwd::init_hfpm(11, HfpmConfig{3, 8});
    Rng rng(9);
    WaveletPyramid low = random_pyramid(2, 32, 3, rng);
    WaveletPyramid ref = random_pyramid(2, 32, 3, rng);
    // same approximations, different details -> v1 sees no difference
    ref.approx = low.approx;
    EXPECT_DOUBLE_EQ(cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v1, 1.0, 1.0), 0.0);

    // v1 matches the spectral distance of the approximations, no params involved
    Rng rng2(10);
    ref.approx = cfwd::randn({8, 8, 3}, rng2);
    auto sl = cfwd::dft_amp_phase(low.approx);
    auto sr = cfwd::dft_amp_phase(ref.approx);
    double direct = cfwd::spectral_l1_loss({sl}, {sr}, 0.4, 0.6);
    EXPECT_NEAR(cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v1, 0.4, 0.6), direct, 1e-12);
}

TEST(HfpmLoss, NonnegativeOnFuzzedPairs) {
    auto hp = cfwd::init_hfpm(12, HfpmConfig{2, 4});
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        int levels = 1 + static_cast<int>(rng.uniform_int(0, 1));
        int side = 8 << levels;
        WaveletPyramid low = random_pyramid(levels, side, 2, rng);
        WaveletPyramid ref = random_pyramid(levels, side, 2, rng);
        double l = cfwd::hfpm_loss(low, ref, hp, HfpmVersion::v3, 1.0, 1.0);
        EXPECT_GE(l, 0.0);
        EXPECT_TRUE(std::isfinite(l));
    }
}

TEST(HfpmLoss, MismatchErrors) {
    auto hp = cfwd::init_hfpm(13, HfpmConfig{3, 4});
    Rng rng(12);
    WaveletPyramid a = random_pyramid(2, 32, 3, rng);
    WaveletPyramid b = random_pyramid(1, 16, 3, rng);
    EXPECT_THROW(cfwd::hfpm_loss(a, b, hp, HfpmVersion::v3, 1.0, 1.0), cfwd::Error);
    WaveletPyramid c = random_pyramid(2, 64, 3, rng);
    EXPECT_THROW(cfwd::hfpm_loss(a, c, hp, HfpmVersion::v3, 1.0, 1.0), cfwd::Error);
}

TEST(HfpmLoss, GradientsFlowToParamsThroughLoss) {
    HfpmConfig cfg{1, 4};
    auto hp = cfwd::init_hfpm(14, cfg);
    Rng rng(13);
    WaveletPyramid low = random_pyramid(1, 12, 1, rng);
    WaveletPyramid ref = random_pyramid(1, 12, 1, rng);
    auto loss_fn = [&](cfwd::ad::Tape& t, const std::vector<cfwd::ad::Var>& vars) {
        cfwd::ad::BoundParams bp;
        bp.store = &hp.store;
        bp.vars = vars;
        return cfwd::ad::hfpm_loss(t, bp, low, ref, HfpmVersion::v3, 1.0, 1.0);
    };
    std::vector<std::pair<std::string, double>> per_tensor;
    cfwd::testutil::grad_check_params(hp.store, loss_fn, 1e-4, &per_tensor);
    for (const auto& [name, rel] : per_tensor) EXPECT_LT(rel, 2e-3) << "parameter " << name;
}
