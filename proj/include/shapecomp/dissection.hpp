#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

#include <Eigen/Geometry>

#include "shapecomp/grid.hpp"
#include "shapecomp/random.hpp"

namespace shapecomp {

/// Oriented box in voxel coordinates. Columns of `rotation` are the box's
/// local axes expressed in the grid frame.
struct DissectionCuboid {
    Vec3 center = Vec3::Zero();
    Vec3 half_extents = Vec3::Ones();
    Mat3 rotation = Mat3::Identity();

    void validate() const {
        if ((half_extents.array() <= 0.0).any()) throw InvalidArgument("cuboid half extents must be positive");
        if ((rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
            throw InvalidArgument("cuboid rotation is not orthonormal");
        }
        if (std::abs(rotation.determinant() - 1.0) > 1e-6) throw InvalidArgument("cuboid rotation must have det +1");
    }

    bool contains(const Vec3& p) const {
        const Vec3 local = rotation.transpose() * (p - center);
        return (local.cwiseAbs().array() <= half_extents.array()).all();
    }
};

/// Voxel (i,j,k) is set iff its center lies inside the cuboid.
inline VoxelGrid rasterize_cuboid(const DissectionCuboid& cuboid, const GridSpec& spec) {
    cuboid.validate();
    VoxelGrid mask(spec);
    // Only the cuboid's axis-aligned bounding box needs testing.
    const Vec3 reach = cuboid.rotation.cwiseAbs() * cuboid.half_extents;
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0, int(std::floor(cuboid.center[a] - reach[a])) - 1);
        hi[a] = std::min(spec.c - 1, int(std::ceil(cuboid.center[a] + reach[a])) + 1);
        if (lo[a] > hi[a]) return mask;
    }
    for (int z = lo[2]; z <= hi[2]; ++z)
        for (int y = lo[1]; y <= hi[1]; ++y)
            for (int x = lo[0]; x <= hi[0]; ++x)
                if (cuboid.contains(Vec3(x, y, z))) mask.set(x, y, z, true);
    return mask;
}

inline VoxelGrid complement(const VoxelGrid& b) {
    VoxelGrid out(b.spec());
    for (std::size_t i = 0; i < b.size(); ++i) out.set(i, !b[i]);
    return out;
}

struct DissectedPair {
    VoxelGrid x;  ///< remaining input, S with the cuboid removed
    VoxelGrid y;  ///< removed segment, S inside the cuboid
};

/// X = S * B', Y = S * B (elementwise products).
inline DissectedPair dissect(const VoxelGrid& s, const VoxelGrid& b) {
    require_same_spec(s.spec(), b.spec(), "dissect");
    DissectedPair out{VoxelGrid(s.spec()), VoxelGrid(s.spec())};
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!s[i]) continue;
        if (b[i]) out.y.set(i, true);
        else out.x.set(i, true);
    }
    return out;
}

struct DissectionConfig {
    /// Cuboid edge length as a fraction of c, drawn uniformly per axis.
    double min_size_frac = 0.15;
    double max_size_frac = 0.5;
    double min_removed_fraction = 0.02;
    double max_removed_fraction = 0.5;
    int max_attempts = 100;
};

struct Dissection {
    DissectionCuboid cuboid;
    VoxelGrid mask;
    VoxelGrid x;
    VoxelGrid y;
};

/// Uniformly distributed rotation (Shoemake's quaternion method).
inline Mat3 random_rotation(Rng& rng) {
    const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    const double t2 = 2.0 * std::numbers::pi * u2, t3 = 2.0 * std::numbers::pi * u3;
    Eigen::Quaterniond q(b * std::cos(t3), a * std::sin(t2), a * std::cos(t2), b * std::sin(t3));
    return q.normalized().toRotationMatrix();
}

inline Dissection sample_dissection(const VoxelGrid& s, std::uint64_t seed, const DissectionConfig& cfg = {}) {
    const std::size_t total = s.count();
    if (total == 0) throw InvalidArgument("cannot dissect an empty shape");

    std::vector<std::size_t> occupied;
    occupied.reserve(total);
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i]) occupied.push_back(i);

    const auto min_removed = std::size_t(std::ceil(cfg.min_removed_fraction * double(total)));
    const auto max_removed = std::size_t(std::floor(cfg.max_removed_fraction * double(total)));
    const double c = s.spec().c;

    Rng rng(seed);
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        DissectionCuboid cuboid;
        const auto [vx, vy, vz] = s.spec().coords(occupied[std::size_t(rng.uniform_int(0, std::int64_t(total - 1)))]);
        cuboid.center = Vec3(vx + rng.uniform(-0.5, 0.5), vy + rng.uniform(-0.5, 0.5), vz + rng.uniform(-0.5, 0.5));
        for (int a = 0; a < 3; ++a) cuboid.half_extents[a] = 0.5 * c * rng.uniform(cfg.min_size_frac, cfg.max_size_frac);
        cuboid.rotation = random_rotation(rng);

        VoxelGrid mask = rasterize_cuboid(cuboid, s.spec());
        const std::size_t removed = intersection_count(s, mask);
        if (removed < std::max<std::size_t>(min_removed, 1) || removed > max_removed) continue;
        auto [x, y] = dissect(s, mask);
        return {cuboid, std::move(mask), std::move(x), std::move(y)};
    }
    throw SamplingExhausted("no cuboid removed between " + std::to_string(min_removed) + " and " +
                            std::to_string(max_removed) + " voxels in " + std::to_string(cfg.max_attempts) +
                            " draws");
}

}  // namespace shapecomp
