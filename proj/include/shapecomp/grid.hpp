#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "shapecomp/errors.hpp"

namespace shapecomp {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Cubic lattice description: `c` voxels per edge, each `voxel_size` mm wide.
struct GridSpec {
    int c = 32;
    double voxel_size = 1.0;

    static constexpr int min_edge = 8;

    GridSpec() = default;
    GridSpec(int edge, double voxel_mm = 1.0) : c(edge), voxel_size(voxel_mm) { validate(); }

    void validate() const {
        if (c < min_edge) throw InvalidArgument("grid edge must be >= 8, got " + std::to_string(c));
        if (!(voxel_size > 0.0)) throw InvalidArgument("voxel size must be positive");
    }

    std::size_t voxel_count() const { return std::size_t(c) * c * c; }

    /// Linear index, x fastest.
    std::size_t index(int x, int y, int z) const {
        return std::size_t(x) + std::size_t(c) * (std::size_t(y) + std::size_t(c) * std::size_t(z));
    }

    std::array<int, 3> coords(std::size_t idx) const {
        const int x = int(idx % c);
        const int y = int((idx / c) % c);
        const int z = int(idx / (std::size_t(c) * c));
        return {x, y, z};
    }

    bool contains(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < c && y < c && z < c;
    }

    /// Geometric center of the lattice in voxel-center coordinates.
    Vec3 center() const { return Vec3::Constant(0.5 * (c - 1)); }

    friend bool operator==(const GridSpec& a, const GridSpec& b) {
        return a.c == b.c && a.voxel_size == b.voxel_size;
    }
};

inline void require_same_spec(const GridSpec& a, const GridSpec& b, const char* what) {
    if (!(a == b)) {
        throw SpecMismatch(std::string(what) + ": grids " + std::to_string(a.c) + "^3 and " +
                           std::to_string(b.c) + "^3 (or voxel sizes) differ");
    }
}

/// Binary occupancy map. Values are 0 or 1; storage is row-major, x fastest.
class VoxelGrid {
public:
    VoxelGrid() = default;
    explicit VoxelGrid(GridSpec spec) : spec_(spec), data_(spec.voxel_count(), 0) { spec_.validate(); }
    VoxelGrid(GridSpec spec, std::vector<std::uint8_t> data) : spec_(spec), data_(std::move(data)) {
        spec_.validate();
        if (data_.size() != spec_.voxel_count()) throw InvalidArgument("voxel data length does not match c^3");
        for (auto& v : data_) {
            if (v > 1) throw InvalidArgument("occupancy values must be 0 or 1");
        }
    }

    static VoxelGrid filled(GridSpec spec, bool value) {
        VoxelGrid g(spec);
        std::fill(g.data_.begin(), g.data_.end(), std::uint8_t(value));
        return g;
    }

    const GridSpec& spec() const { return spec_; }
    int edge() const { return spec_.c; }
    std::size_t size() const { return data_.size(); }

    std::uint8_t operator[](std::size_t i) const { return data_[i]; }
    std::uint8_t at(int x, int y, int z) const { return data_[spec_.index(x, y, z)]; }
    /// Out-of-lattice reads return 0.
    std::uint8_t get_or_zero(int x, int y, int z) const {
        return spec_.contains(x, y, z) ? at(x, y, z) : std::uint8_t(0);
    }
    void set(std::size_t i, bool v) { data_[i] = std::uint8_t(v); }
    void set(int x, int y, int z, bool v) { data_[spec_.index(x, y, z)] = std::uint8_t(v); }

    const std::vector<std::uint8_t>& data() const { return data_; }

    std::size_t count() const {
        return std::size_t(std::count(data_.begin(), data_.end(), std::uint8_t(1)));
    }
    bool empty() const { return std::find(data_.begin(), data_.end(), std::uint8_t(1)) == data_.end(); }

    /// Mean coordinate of the set voxels (voxel units). Undefined for empty grids.
    Vec3 centroid() const {
        Vec3 acc = Vec3::Zero();
        std::size_t n = 0;
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!data_[i]) continue;
            const auto [x, y, z] = spec_.coords(i);
            acc += Vec3(x, y, z);
            ++n;
        }
        return n ? Vec3(acc / double(n)) : Vec3(Vec3::Constant(std::numeric_limits<double>::quiet_NaN()));
    }

    friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
        return a.spec_ == b.spec_ && a.data_ == b.data_;
    }

private:
    GridSpec spec_;
    std::vector<std::uint8_t> data_;
};

/// Real-valued probability map with values in [0, 1].
class ProbGrid {
public:
    ProbGrid() = default;
    explicit ProbGrid(GridSpec spec, double fill = 0.0) : spec_(spec), data_(spec.voxel_count(), fill) {
        spec_.validate();
        check_range();
    }
    ProbGrid(GridSpec spec, std::vector<double> data) : spec_(spec), data_(std::move(data)) {
        spec_.validate();
        if (data_.size() != spec_.voxel_count()) throw InvalidArgument("probability data length does not match c^3");
        check_range();
    }

    static ProbGrid from_binary(const VoxelGrid& g) {
        std::vector<double> d(g.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i];
        return ProbGrid(g.spec(), std::move(d));
    }

    const GridSpec& spec() const { return spec_; }
    std::size_t size() const { return data_.size(); }
    double operator[](std::size_t i) const { return data_[i]; }
    const std::vector<double>& data() const { return data_; }

    /// Voxels strictly above the threshold.
    VoxelGrid binarize(double threshold = 0.5) const {
        VoxelGrid g(spec_);
        for (std::size_t i = 0; i < data_.size(); ++i) g.set(i, data_[i] > threshold);
        return g;
    }

    friend bool operator==(const ProbGrid& a, const ProbGrid& b) {
        return a.spec_ == b.spec_ && a.data_ == b.data_;
    }

private:
    void check_range() const {
        for (double v : data_) {
            if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("probability values must lie in [0, 1]");
        }
    }

    GridSpec spec_;
    std::vector<double> data_;
};

// Elementwise helpers. All require matching specs.

inline VoxelGrid hadamard(const VoxelGrid& a, const VoxelGrid& b) {
    require_same_spec(a.spec(), b.spec(), "hadamard");
    VoxelGrid out(a.spec());
    for (std::size_t i = 0; i < a.size(); ++i) out.set(i, a[i] && b[i]);
    return out;
}

/// Union of two binary grids (the sum X + Y for disjoint operands).
inline VoxelGrid unite(const VoxelGrid& a, const VoxelGrid& b) {
    require_same_spec(a.spec(), b.spec(), "unite");
    VoxelGrid out(a.spec());
    for (std::size_t i = 0; i < a.size(); ++i) out.set(i, a[i] || b[i]);
    return out;
}

inline std::size_t intersection_count(const VoxelGrid& a, const VoxelGrid& b) {
    require_same_spec(a.spec(), b.spec(), "intersection_count");
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] & b[i]);
    return n;
}

}  // namespace shapecomp
