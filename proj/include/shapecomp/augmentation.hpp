#pragma once

#include <array>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "shapecomp/grid.hpp"
#include "shapecomp/log.hpp"
#include "shapecomp/random.hpp"

namespace shapecomp {

/// Rigid transform applied about the grid center: rotation (degrees, applied
/// x then y then z), integer shift, then optional mirror x -> c-1-x.
struct RigidAugmentation {
    std::array<double, 3> rotation_deg{0.0, 0.0, 0.0};
    std::array<int, 3> translation_vox{0, 0, 0};
    bool mirror_sagittal = false;

    bool has_rotation() const { return rotation_deg[0] != 0.0 || rotation_deg[1] != 0.0 || rotation_deg[2] != 0.0; }

    Mat3 rotation() const {
        constexpr double to_rad = std::numbers::pi / 180.0;
        return (Eigen::AngleAxisd(rotation_deg[2] * to_rad, Vec3::UnitZ()) *
                Eigen::AngleAxisd(rotation_deg[1] * to_rad, Vec3::UnitY()) *
                Eigen::AngleAxisd(rotation_deg[0] * to_rad, Vec3::UnitX()))
            .toRotationMatrix();
    }
};

struct AugmentationConfig {
    double max_rotation_deg = 10.0;
    int max_translation_vox = 3;
    double mirror_probability = 0.5;
    bool enabled = true;
};

inline RigidAugmentation sample_augmentation(Rng& rng, const AugmentationConfig& cfg) {
    RigidAugmentation aug;
    if (!cfg.enabled) return aug;
    for (auto& r : aug.rotation_deg) r = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    for (auto& t : aug.translation_vox) t = int(rng.uniform_int(-cfg.max_translation_vox, cfg.max_translation_vox));
    aug.mirror_sagittal = rng.bernoulli(cfg.mirror_probability);
    return aug;
}

inline VoxelGrid mirror_sagittal(const VoxelGrid& s) {
    const int c = s.edge();
    VoxelGrid out(s.spec());
    for (int z = 0; z < c; ++z)
        for (int y = 0; y < c; ++y)
            for (int x = 0; x < c; ++x) out.set(x, y, z, s.at(c - 1 - x, y, z));
    return out;
}

/// Nearest-neighbour resampling of `s` under `aug`. Output stays binary.
inline VoxelGrid apply_augmentation(const VoxelGrid& s, const RigidAugmentation& aug) {
    const int c = s.edge();
    const auto& t = aug.translation_vox;
    VoxelGrid out(s.spec());

    if (!aug.has_rotation()) {
        for (int z = 0; z < c; ++z)
            for (int y = 0; y < c; ++y)
                for (int x = 0; x < c; ++x) out.set(x, y, z, s.get_or_zero(x - t[0], y - t[1], z - t[2]));
    } else {
        const Mat3 r = aug.rotation();
        const Mat3 r_inv = r.transpose();
        const Vec3 ctr = s.spec().center();
        const Vec3 shift(t[0], t[1], t[2]);
        for (int z = 0; z < c; ++z)
            for (int y = 0; y < c; ++y)
                for (int x = 0; x < c; ++x) {
                    const Vec3 src = r_inv * (Vec3(x, y, z) - ctr - shift) + ctr;
                    out.set(x, y, z,
                            s.get_or_zero(int(std::lround(src[0])), int(std::lround(src[1])),
                                          int(std::lround(src[2]))));
                }
    }

    // Report support pushed off the lattice.
    const std::size_t before = s.count();
    if (before > 0) {
        std::size_t lost = 0;
        const Mat3 r = aug.rotation();
        const Vec3 ctr = s.spec().center();
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!s[i]) continue;
            const auto [x, y, z] = s.spec().coords(i);
            const Vec3 dst = r * (Vec3(x, y, z) - ctr) + ctr + Vec3(t[0], t[1], t[2]);
            if (!s.spec().contains(int(std::lround(dst[0])), int(std::lround(dst[1])), int(std::lround(dst[2]))))
                ++lost;
        }
        if (double(lost) > 0.01 * double(before))
            log::warn("augmentation dropped ", lost, " of ", before, " voxels outside the grid");
    }

    return aug.mirror_sagittal ? mirror_sagittal(out) : out;
}

}  // namespace shapecomp
