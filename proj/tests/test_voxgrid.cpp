#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "shapecomp/augmentation.hpp"
#include "shapecomp/dissection.hpp"
#include "shapecomp/synth.hpp"

using namespace shapecomp;

namespace {

VoxelGrid random_grid(const GridSpec& spec, double density, std::uint64_t seed) {
    Rng rng(seed);
    VoxelGrid g(spec);
    for (std::size_t i = 0; i < g.size(); ++i) g.set(i, rng.bernoulli(density));
    return g;
}

VoxelGrid blob(const GridSpec& spec, const Vec3& center, double radius) {
    VoxelGrid g(spec);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto [x, y, z] = spec.coords(i);
        g.set(i, (Vec3(x, y, z) - center).norm() <= radius);
    }
    return g;
}

DissectionCuboid random_cuboid(Rng& rng, int c) {
    DissectionCuboid cub;
    cub.center = Vec3(rng.uniform(0, c), rng.uniform(0, c), rng.uniform(0, c));
    for (int a = 0; a < 3; ++a) cub.half_extents[a] = rng.uniform(0.5, 0.4 * c);
    cub.rotation = random_rotation(rng);
    return cub;
}

}  // namespace

TEST(GridSpec, RejectsSmallOrNonPositive) {
    EXPECT_THROW(GridSpec(7), InvalidArgument);
    EXPECT_THROW(GridSpec(8, 0.0), InvalidArgument);
    EXPECT_NO_THROW(GridSpec(8, 0.5));
}

TEST(RasterizeCuboid, AxisAlignedCubeMatchesBruteForce) {
    const GridSpec spec(8);
    DissectionCuboid cub;
    cub.center = Vec3(3.5, 3.5, 3.5);
    cub.half_extents = Vec3(1, 1, 1);
    const VoxelGrid mask = rasterize_cuboid(cub, spec);

    // Oracle: enumerate all 512 voxel centers.
    std::size_t expected = 0;
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const bool in = std::abs(x - 3.5) <= 1 && std::abs(y - 3.5) <= 1 && std::abs(z - 3.5) <= 1;
                expected += in;
                EXPECT_EQ(mask.at(x, y, z), in);
            }
    EXPECT_EQ(expected, 8u);
    EXPECT_EQ(mask.count(), 8u);
    for (int z = 3; z <= 4; ++z)
        for (int y = 3; y <= 4; ++y)
            for (int x = 3; x <= 4; ++x) EXPECT_TRUE(mask.at(x, y, z));
}

TEST(RasterizeCuboid, TinyCuboidBetweenCentersIsEmpty) {
    DissectionCuboid cub;
    cub.center = Vec3(3.5, 3.5, 3.5);
    cub.half_extents = Vec3(0.1, 0.1, 0.1);
    EXPECT_TRUE(rasterize_cuboid(cub, GridSpec(8)).empty());
}

TEST(RasterizeCuboid, QuarterTurnOfSymmetricCuboidIsIdentical) {
    DissectionCuboid a;
    a.center = Vec3(7.5, 7.5, 7.5);
    a.half_extents = Vec3(3, 3, 2);
    DissectionCuboid b = a;
    b.rotation = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitZ()).toRotationMatrix();
    EXPECT_EQ(rasterize_cuboid(a, GridSpec(16)), rasterize_cuboid(b, GridSpec(16)));
}

TEST(RasterizeCuboid, OutsideGridIsEmpty) {
    DissectionCuboid cub;
    cub.center = Vec3(-20, 40, 3);
    cub.half_extents = Vec3(2, 2, 2);
    EXPECT_TRUE(rasterize_cuboid(cub, GridSpec(16)).empty());
}

TEST(RasterizeCuboid, RejectsInvalidCuboids) {
    DissectionCuboid cub;
    cub.half_extents = Vec3(1, 0, 1);
    EXPECT_THROW(rasterize_cuboid(cub, GridSpec(8)), InvalidArgument);
    cub.half_extents = Vec3(1, 1, 1);
    cub.rotation = -Mat3::Identity();  // orthonormal but a reflection
    EXPECT_THROW(rasterize_cuboid(cub, GridSpec(8)), InvalidArgument);
}

TEST(RasterizeCuboid, RotationEquivarianceForInteriorCuboids) {
    // Rotating the cuboid by R and the mask back by R^-1 should agree up to
    // discretisation on at least 95% of set voxels. Nearest-voxel rounding
    // misplaces a shell of about a quarter voxel per face, so the cuboids
    // must be large for the bound to hold.
    const GridSpec spec(96);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        DissectionCuboid base;
        base.center = spec.center();
        base.half_extents = Vec3(rng.uniform(18, 26), rng.uniform(18, 26), rng.uniform(18, 26));
        const Mat3 r = random_rotation(rng);
        DissectionCuboid rotated = base;
        rotated.rotation = r;
        const VoxelGrid ref = rasterize_cuboid(base, spec);
        const VoxelGrid rot = rasterize_cuboid(rotated, spec);
        std::size_t agree = 0;
        for (std::size_t i = 0; i < rot.size(); ++i) {
            if (!rot[i]) continue;
            const auto [x, y, z] = spec.coords(i);
            const Vec3 back = r.transpose() * (Vec3(x, y, z) - base.center) + base.center;
            agree += ref.get_or_zero(int(std::lround(back[0])), int(std::lround(back[1])), int(std::lround(back[2])));
        }
        EXPECT_GE(double(agree), 0.95 * double(rot.count())) << "trial " << trial;
    }
}

TEST(Complement, CountsAndInvolution) {
    const GridSpec spec(8);
    EXPECT_TRUE(complement(VoxelGrid::filled(spec, true)).empty());
    VoxelGrid b(spec);
    for (int i = 0; i < 10; ++i) b.set(std::size_t(i * 37), true);
    ASSERT_EQ(b.count(), 10u);
    EXPECT_EQ(complement(b).count(), 502u);
    EXPECT_EQ(complement(complement(b)), b);
}

TEST(Dissect, TrivialMasks) {
    const GridSpec spec(8);
    const VoxelGrid s = random_grid(spec, 0.3, 1);
    auto [x0, y0] = dissect(s, VoxelGrid(spec));
    EXPECT_EQ(x0, s);
    EXPECT_TRUE(y0.empty());
    auto [x1, y1] = dissect(s, VoxelGrid::filled(spec, true));
    EXPECT_TRUE(x1.empty());
    EXPECT_EQ(y1, s);
}

TEST(Dissect, CountsMatchBruteForce) {
    // s has exactly 100 set voxels; b covers exactly 30 of them.
    const GridSpec spec(16);
    Rng rng(42);
    std::vector<std::size_t> all(spec.voxel_count());
    std::iota(all.begin(), all.end(), std::size_t{0});
    rng.shuffle(all);
    VoxelGrid s(spec), b(spec);
    for (int i = 0; i < 100; ++i) s.set(all[std::size_t(i)], true);
    for (int i = 0; i < 30; ++i) b.set(all[std::size_t(i)], true);
    for (int i = 100; i < 400; ++i) b.set(all[std::size_t(i)], true);  // mask voxels off the shape

    std::size_t oracle_x = 0, oracle_y = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        oracle_x += s[i] && !b[i];
        oracle_y += s[i] && b[i];
    }
    ASSERT_EQ(oracle_x, 70u);
    ASSERT_EQ(oracle_y, 30u);
    auto [x, y] = dissect(s, b);
    EXPECT_EQ(x.count(), 70u);
    EXPECT_EQ(y.count(), 30u);
}

TEST(Dissect, PartitionPropertyOnRandomGrids) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const GridSpec spec(8 + int(rng.uniform_int(0, 8)));
        const VoxelGrid s = random_grid(spec, rng.uniform(0.05, 0.8), rng.next_u64());
        const VoxelGrid b = rasterize_cuboid(random_cuboid(rng, spec.c), spec);
        auto [x, y] = dissect(s, b);
        for (std::size_t i = 0; i < s.size(); ++i) {
            ASSERT_EQ(x[i] + y[i], s[i]);
            ASSERT_EQ(x[i] * y[i], 0);
        }
        EXPECT_EQ(x, hadamard(s, complement(b)));
        EXPECT_EQ(y, hadamard(s, b));
    }
}

TEST(Dissect, SpecMismatch) {
    EXPECT_THROW(dissect(VoxelGrid(GridSpec(8)), VoxelGrid(GridSpec(9))), SpecMismatch);
}

class SampleDissection : public ::testing::Test {
protected:
    GridSpec spec{32};
    VoxelGrid shape = generate_shape(SynthParams{}, spec);
};

TEST_F(SampleDissection, DeterministicPerSeed) {
    const auto a = sample_dissection(shape, 99);
    const auto b = sample_dissection(shape, 99);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.cuboid.center, b.cuboid.center);
    EXPECT_EQ(a.cuboid.rotation, b.cuboid.rotation);
}

TEST_F(SampleDissection, BoundsHoldAndHistogramSpansRange) {
    const DissectionConfig cfg;
    const double total = double(shape.count());
    double lo = 1.0, hi = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto d = sample_dissection(shape, seed, cfg);
        const double frac = double(d.y.count()) / total;
        EXPECT_GE(double(d.y.count()), std::ceil(cfg.min_removed_fraction * total));
        EXPECT_LE(double(d.y.count()), std::floor(cfg.max_removed_fraction * total));
        lo = std::min(lo, frac);
        hi = std::max(hi, frac);
    }
    // Monte Carlo: accepted removals cover most of [2%, 50%]. A single cuboid
    // with edges of at most c/2 removes at most about 44% of this shape.
    EXPECT_LT(lo, 0.05);
    EXPECT_GT(hi, 0.40);
}

TEST_F(SampleDissection, ExhaustsWhenBoundsAreUnsatisfiable) {
    DissectionConfig cfg;
    cfg.min_removed_fraction = 0.99;
    cfg.max_removed_fraction = 0.995;
    cfg.max_attempts = 5;
    EXPECT_THROW(sample_dissection(shape, 1, cfg), SamplingExhausted);
}

TEST(Augmentation, IdentityIsExact) {
    const VoxelGrid s = random_grid(GridSpec(16), 0.3, 3);
    EXPECT_EQ(apply_augmentation(s, RigidAugmentation{}), s);
}

TEST(Augmentation, MirrorTwiceIsIdentity) {
    const VoxelGrid s = random_grid(GridSpec(12), 0.3, 4);
    RigidAugmentation m;
    m.mirror_sagittal = true;
    const VoxelGrid once = apply_augmentation(s, m);
    EXPECT_NE(once, s);
    EXPECT_EQ(apply_augmentation(once, m), s);
}

TEST(Augmentation, TranslationShiftsSupport) {
    const GridSpec spec(16);
    const VoxelGrid s = blob(spec, Vec3(7, 8, 7.5), 3.2);
    RigidAugmentation t;
    t.translation_vox = {2, 0, 0};
    const VoxelGrid moved = apply_augmentation(s, t);
    EXPECT_EQ(moved.count(), s.count());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto [x, y, z] = spec.coords(i);
        EXPECT_EQ(moved.get_or_zero(x + 2, y, z), s[i]) << x << "," << y << "," << z;
    }
}

TEST(Augmentation, SmallRotationKeepsVolumeRoughly) {
    const GridSpec spec(32);
    const VoxelGrid s = generate_shape(SynthParams{}, spec);
    RigidAugmentation r;
    r.rotation_deg = {8.0, -6.0, 9.0};
    const VoxelGrid out = apply_augmentation(s, r);
    EXPECT_NEAR(double(out.count()), double(s.count()), 0.08 * double(s.count()));
    for (auto v : out.data()) EXPECT_LE(v, 1);
}

TEST(Augmentation, SampledParametersRespectLimits) {
    Rng rng(8);
    AugmentationConfig cfg;
    for (int i = 0; i < 200; ++i) {
        const auto a = sample_augmentation(rng, cfg);
        for (double d : a.rotation_deg) EXPECT_LE(std::abs(d), cfg.max_rotation_deg);
        for (int t : a.translation_vox) EXPECT_LE(std::abs(t), cfg.max_translation_vox);
    }
}
