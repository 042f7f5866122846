#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "maskdime/masks.hpp"
#include "maskdime/rng.hpp"

using namespace maskdime;

namespace {

// Oracle: explicit sort of (value, index) pairs.
Tensor brute_top(const Tensor& g, int count) {
    std::vector<std::pair<float, int>> v;
    for (std::size_t i = 0; i < g.numel(); ++i) v.emplace_back(g[i], static_cast<int>(i));
    std::sort(v.begin(), v.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    Tensor m = Tensor::zeros_like(g);
    for (int i = 0; i < count; ++i) m[static_cast<std::size_t>(v[static_cast<std::size_t>(i)].second)] = 1;
    return m;
}

// Oracle: direct window scan.
Tensor brute_dilate(const Tensor& m, int k) {
    const int h = m.dim(-2), w = m.dim(-1), r = k / 2;
    Tensor out = Tensor::zeros_like(m);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w && m[static_cast<std::size_t>(yy * w + xx)] != 0)
                        out[static_cast<std::size_t>(y * w + x)] = 1;
                }
    return out;
}

Tensor random_mask(RngStream& r, int h, int w, double p) {
    Tensor m({1, h, w});
    for (float& v : m.vec()) v = r.uniform() < p ? 1.0f : 0.0f;
    return m;
}

Tensor union_of(const Tensor& a, const Tensor& b) {
    return zip(a, b, [](float x, float y) { return (x != 0 || y != 0) ? 1.0f : 0.0f; });
}

}  // namespace

TEST(Masks, RoundHalfUpWithFloor) {
    EXPECT_EQ(mask_count(0.1, 1024), 102);
    EXPECT_EQ(mask_count(0.05, 1024), 51);
    EXPECT_EQ(mask_count(0.5 * 0.1, 1024), 51);
    EXPECT_EQ(mask_count(0.125, 4), 1);  // 0.5 rounds up
    EXPECT_EQ(mask_count(1e-6, 16), 1);
    EXPECT_EQ(mask_count(1.0, 16), 16);
}

TEST(Masks, ConstantMapFullK) {
    const DualMask m = build_dual_mask(Tensor({1, 6, 6}, 0.3f), 1.0, 1.0);
    EXPECT_EQ(popcount(m.mz), 36);
    EXPECT_EQ(popcount(m.mx), 36);
}

TEST(Masks, SortedFourByFour) {
    Tensor g({1, 4, 4});
    for (int i = 0; i < 16; ++i) g[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
    const DualMaskRaw raw = select_dual(g, 0.25, 0.5);
    for (int i = 0; i < 16; ++i) {
        EXPECT_EQ(raw.mz[static_cast<std::size_t>(i)], i >= 12 ? 1.0f : 0.0f);
        EXPECT_EQ(raw.mx[static_cast<std::size_t>(i)], i >= 14 ? 1.0f : 0.0f);
    }
}

TEST(Masks, RhoOneGivesEqualMasks) {
    RngStream r(1);
    Tensor g({1, 16, 16});
    for (float& v : g.vec()) v = static_cast<float>(r.uniform());
    const DualMask m = build_dual_mask(g, 0.1, 1.0);
    EXPECT_TRUE(m.mz.bit_equal(m.mx));
    const DualMaskRaw raw = select_dual(g, 0.1, 1.0);
    EXPECT_TRUE(raw.mz.bit_equal(raw.mx));
}

TEST(Masks, TiesGoToEarlierRasterIndex) {
    Tensor g({1, 1, 6}, {0.5f, 1.0f, 0.5f, 1.0f, 0.5f, 0.0f});
    const Tensor m = top_k_mask(g, 0.5);
    EXPECT_TRUE(m.bit_equal(Tensor({1, 1, 6}, {1, 1, 0, 1, 0, 0})));
}

TEST(Dilate, Basics) {
    EXPECT_EQ(popcount(dilate(Tensor({1, 9, 9}))), 0);
    Tensor c({1, 9, 9});
    c[4 * 9 + 4] = 1;
    const Tensor d = dilate(c, 5);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x)
            EXPECT_EQ(d[static_cast<std::size_t>(y * 9 + x)], (y >= 2 && y <= 6 && x >= 2 && x <= 6) ? 1.0f : 0.0f);
    EXPECT_THROW(dilate(c, 4), ArgumentError);
}

TEST(Dilate, MatchesOracleAndDistributesOverUnion) {
    RngStream r(2);
    for (int i = 0; i < 100; ++i) {
        const Tensor a = random_mask(r, 16, 16, 0.05), b = random_mask(r, 16, 16, 0.05);
        const Tensor da = dilate(a), db = dilate(b);
        EXPECT_TRUE(da.bit_equal(brute_dilate(a, 5)));
        EXPECT_TRUE(is_subset(a, da));
        EXPECT_TRUE(dilate(union_of(a, b)).bit_equal(union_of(da, db)));
    }
}

TEST(PixelDiffMask, ZeroDifferenceTakesFirstRasterPixels) {
    const Tensor x({1, 8, 8}, 0.2f);
    const Tensor m = top_k_mask(abs_diff_map(x, x), 0.1);
    const int n = mask_count(0.1, 64);
    for (int i = 0; i < 64; ++i) EXPECT_EQ(m[static_cast<std::size_t>(i)], i < n ? 1.0f : 0.0f);
}

TEST(PixelDiffMask, ConcentratedBlock) {
    Tensor x({1, 16, 16}), x0({1, 16, 16});
    Tensor block({1, 16, 16});
    for (int y = 5; y < 9; ++y)
        for (int xx = 6; xx < 10; ++xx) {
            x0[static_cast<std::size_t>(y * 16 + xx)] = 0.7f;
            block[static_cast<std::size_t>(y * 16 + xx)] = 1;
        }
    EXPECT_TRUE(pixel_diff_mask(x0, x, 16.0 / 256.0).bit_equal(dilate(block)));
}

TEST(PixelDiffMask, Cardinality) {
    RngStream r(3);
    for (int i = 0; i < 50; ++i) {
        Tensor a({1, 12, 12}), b({1, 12, 12});
        for (float& v : a.vec()) v = static_cast<float>(r.uniform(-1, 1));
        for (float& v : b.vec()) v = static_cast<float>(r.uniform(-1, 1));
        const double k = r.uniform(0.01, 1.0);
        EXPECT_EQ(popcount(top_k_mask(abs_diff_map(a, b), k)), mask_count(k, 144));
    }
}

TEST(FixedMask, IsDualMaskWithoutShrinkage) {
    RngStream r(4);
    Tensor g({1, 16, 16});
    for (float& v : g.vec()) v = static_cast<float>(r.uniform());
    EXPECT_TRUE(fixed_mask(g, 0.1).bit_equal(build_dual_mask(g, 0.1, 1.0).mz));
}

// 10^4 random maps, values quantized so that ties occur.
TEST(DualMask, InvariantsOnRandomMaps) {
    RngStream r(5);
    for (int i = 0; i < 10000; ++i) {
        const int h = r.uniform_int(4, 32), w = r.uniform_int(4, 32);
        Tensor g({1, h, w});
        const int levels = r.uniform_int(2, 50);
        for (float& v : g.vec()) v = static_cast<float>(r.uniform_int(0, levels)) / levels;
        const double k = r.uniform(0.01, 1.0), rho = r.uniform(0.01, 1.0);
        const std::size_t n = g.numel();
        const DualMaskRaw raw = select_dual(g, k, rho);
        const int nz = mask_count(k, n), nx = mask_count(rho * k, n);
        ASSERT_EQ(popcount(raw.mz), nz);
        ASSERT_EQ(popcount(raw.mx), nx);
        ASSERT_TRUE(raw.mz.bit_equal(brute_top(g, nz)));
        ASSERT_TRUE(raw.mx.bit_equal(brute_top(g, nx)));
        ASSERT_TRUE(is_subset(raw.mx, raw.mz));
        const DualMask dm = build_dual_mask(g, k, rho);
        ASSERT_TRUE(is_subset(dm.mx, dm.mz));
        ASSERT_TRUE(is_subset(raw.mz, dm.mz));
    }
}

TEST(DualMask, PermutationEquivariance) {
    RngStream r(6);
    for (int i = 0; i < 100; ++i) {
        Tensor g({1, 8, 8});
        std::vector<int> vals(64);
        std::iota(vals.begin(), vals.end(), 0);
        r.shuffle(vals);
        for (int j = 0; j < 64; ++j) g[static_cast<std::size_t>(j)] = static_cast<float>(vals[j]);
        std::vector<int> perm(64);
        std::iota(perm.begin(), perm.end(), 0);
        r.shuffle(perm);
        Tensor gp({1, 8, 8});
        for (int j = 0; j < 64; ++j) gp[static_cast<std::size_t>(perm[j])] = g[static_cast<std::size_t>(j)];
        const DualMaskRaw a = select_dual(g, 0.2, 0.5), b = select_dual(gp, 0.2, 0.5);
        for (int j = 0; j < 64; ++j) {
            EXPECT_EQ(b.mz[static_cast<std::size_t>(perm[j])], a.mz[static_cast<std::size_t>(j)]);
            EXPECT_EQ(b.mx[static_cast<std::size_t>(perm[j])], a.mx[static_cast<std::size_t>(j)]);
        }
    }
}

TEST(DualMask, MonotoneInK) {
    RngStream r(7);
    for (int i = 0; i < 200; ++i) {
        Tensor g({1, 10, 10});
        for (float& v : g.vec()) v = static_cast<float>(r.uniform_int(0, 5));
        double k1 = r.uniform(0.01, 1), k2 = r.uniform(0.01, 1);
        if (k1 > k2) std::swap(k1, k2);
        EXPECT_TRUE(is_subset(top_k_mask(g, k1), top_k_mask(g, k2)));
    }
}

TEST(Masks, Iou) {
    EXPECT_EQ(iou(Tensor({4}, {1, 1, 0, 0}), Tensor({4}, {0, 1, 1, 0})), 1.0 / 3.0);
    EXPECT_EQ(iou(Tensor({2}), Tensor({2})), 1.0);
}
