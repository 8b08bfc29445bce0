#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <queue>
#include <vector>

#include "json.hpp"

#include "shapecomp/grid.hpp"
#include "shapecomp/random.hpp"

// Procedural mandible-like shapes: a tube of varying radius around a
// horseshoe curve (axial arc plus two rising rami) with a bulge at each
// condyle. Axes: x left-right (sagittal mirror is x -> c-1-x), y
// posterior-anterior, z inferior-superior.
namespace shapecomp {

struct SynthParams {
    double arch_radius_frac = 0.26;
    double arch_opening_deg = 180.0;
    double tube_radius_frac = 0.075;
    double ramus_height_frac = 0.28;
    double condyle_bulge = 0.4;
    double perturb_amp = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        auto frac = [](double v, const char* name) {
            if (!(v > 0.0 && v < 0.5)) throw InvalidArgument(std::string(name) + " must lie in (0, 0.5)");
        };
        frac(arch_radius_frac, "arch_radius_frac");
        frac(tube_radius_frac, "tube_radius_frac");
        frac(ramus_height_frac, "ramus_height_frac");
        if (!(arch_opening_deg >= 120.0 && arch_opening_deg <= 220.0))
            throw InvalidArgument("arch_opening_deg must lie in [120, 220]");
        if (condyle_bulge < 0.0) throw InvalidArgument("condyle_bulge must be non-negative");
        if (perturb_amp < 0.0 || perturb_amp >= 1.0) throw InvalidArgument("perturb_amp must lie in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const SynthParams& p) {
    j = {{"arch_radius_frac", p.arch_radius_frac}, {"arch_opening_deg", p.arch_opening_deg},
         {"tube_radius_frac", p.tube_radius_frac}, {"ramus_height_frac", p.ramus_height_frac},
         {"condyle_bulge", p.condyle_bulge},       {"perturb_amp", p.perturb_amp},
         {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, SynthParams& p) {
    p.arch_radius_frac = j.at("arch_radius_frac").get<double>();
    p.arch_opening_deg = j.at("arch_opening_deg").get<double>();
    p.tube_radius_frac = j.at("tube_radius_frac").get<double>();
    p.ramus_height_frac = j.at("ramus_height_frac").get<double>();
    p.condyle_bulge = j.at("condyle_bulge").get<double>();
    p.perturb_amp = j.at("perturb_amp").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
}

/// Sampling ranges for generate_dataset (closed intervals).
struct SynthRanges {
    std::array<double, 2> arch_radius_frac{0.22, 0.30};
    std::array<double, 2> arch_opening_deg{150.0, 200.0};
    std::array<double, 2> tube_radius_frac{0.06, 0.09};
    std::array<double, 2> ramus_height_frac{0.20, 0.35};
    std::array<double, 2> condyle_bulge{0.2, 0.6};
    std::array<double, 2> perturb_amp{0.0, 0.2};
};

/// Number of 6-connected components of the set voxels.
inline int count_components(const VoxelGrid& g) {
    const int c = g.edge();
    std::vector<int> label(g.size(), 0);
    int components = 0;
    std::queue<std::size_t> q;
    for (std::size_t seed = 0; seed < g.size(); ++seed) {
        if (!g[seed] || label[seed]) continue;
        ++components;
        label[seed] = components;
        q.push(seed);
        while (!q.empty()) {
            const auto [x, y, z] = g.spec().coords(q.front());
            q.pop();
            const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
            for (const auto& p : nb) {
                if (p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= c || p[1] >= c || p[2] >= c) continue;
                const std::size_t i = g.spec().index(p[0], p[1], p[2]);
                if (g[i] && !label[i]) {
                    label[i] = components;
                    q.push(i);
                }
            }
        }
    }
    return components;
}

namespace synth_detail {

struct Segment {
    Vec3 a, b;
    double ta, tb;  // curve parameter at the endpoints, in [0, 1]
};

// Low-frequency radius modulation in [-1, 1] over signed parameter tau in [-1, 1].
struct Perturbation {
    std::array<double, 3> phase{};
    double operator()(double tau) const {
        double s = 0.0, w = 0.0;
        for (int k = 1; k <= 3; ++k) {
            s += std::sin(k * std::numbers::pi * tau + phase[std::size_t(k - 1)]) / k;
            w += 1.0 / k;
        }
        return s / w;
    }
};

}  // namespace synth_detail

inline VoxelGrid generate_shape(const SynthParams& params, const GridSpec& spec) {
    using namespace synth_detail;
    params.validate();
    spec.validate();
    const double c = spec.c;
    const double mid = 0.5 * (c - 1);
    const double R = params.arch_radius_frac * c;
    const double half_open = 0.5 * params.arch_opening_deg * std::numbers::pi / 180.0;
    const double r_tube = params.tube_radius_frac * c;
    const double H = params.ramus_height_frac * c;
    const double back = 0.15 * H;  // rami lean posteriorly
    const double r_condyle = r_tube * (1.0 + params.condyle_bulge);

    const double y_lo = R * std::cos(half_open) - back, y_hi = R;
    const double ya = mid - 0.5 * (y_lo + y_hi);
    const double z0 = mid - 0.5 * (H + r_condyle - r_tube);

    // Right half of the curve (x >= mid): arc from the front, then the ramus.
    constexpr int arc_segments = 48, ramus_segments = 16;
    std::vector<Vec3> pts;
    for (int i = 0; i <= arc_segments; ++i) {
        const double th = half_open * i / arc_segments;
        pts.emplace_back(mid + R * std::sin(th), ya + R * std::cos(th), z0);
    }
    const Vec3 foot = pts.back();
    for (int i = 1; i <= ramus_segments; ++i) {
        const double s = double(i) / ramus_segments;
        pts.push_back(foot + Vec3(0.0, -back * s, H * s));
    }
    const Vec3 condyle = pts.back();
    double total = 0.0;
    std::vector<double> arclen{0.0};
    for (std::size_t i = 1; i < pts.size(); ++i) arclen.push_back(total += (pts[i] - pts[i - 1]).norm());
    std::vector<Segment> segs;
    for (std::size_t i = 1; i < pts.size(); ++i) segs.push_back({pts[i - 1], pts[i], arclen[i - 1] / total, arclen[i] / total});

    Perturbation wobble;
    Rng rng(params.seed);
    for (auto& ph : wobble.phase) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);

    VoxelGrid grid(spec);
    for (int z = 0; z < spec.c; ++z)
        for (int y = 0; y < spec.c; ++y)
            for (int x = 0; x < spec.c; ++x) {
                const double dx = double(x) - mid;
                const double side = dx < 0.0 ? -1.0 : 1.0;
                const Vec3 p(mid + std::abs(dx), y, z);  // fold onto the right half
                auto radius_at = [&](double t) { return r_tube * (1.0 + params.perturb_amp * wobble(side * t)); };
                double sdf = (p - condyle).norm() - r_condyle * (1.0 + params.perturb_amp * wobble(side));
                for (const auto& s : segs) {
                    const Vec3 ab = s.b - s.a;
                    const double u = std::clamp((p - s.a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
                    const double d = (p - (s.a + u * ab)).norm() - radius_at(s.ta + u * (s.tb - s.ta));
                    sdf = std::min(sdf, d);
                }
                if (sdf <= 0.0) grid.set(x, y, z, true);
            }

    if (double(grid.count()) < 0.01 * double(spec.voxel_count()))
        throw DegenerateShape("synthetic shape occupies less than 1% of the grid");
    if (count_components(grid) != 1) throw DegenerateShape("synthetic shape is not a single 6-connected component");
    return grid;
}

struct SynthSample {
    SynthParams params;
    VoxelGrid grid;
};

inline SynthParams draw_params(Rng& rng, const SynthRanges& r) {
    auto pick = [&](const std::array<double, 2>& range) { return rng.uniform(range[0], range[1]); };
    SynthParams p;
    p.arch_radius_frac = pick(r.arch_radius_frac);
    p.arch_opening_deg = pick(r.arch_opening_deg);
    p.tube_radius_frac = pick(r.tube_radius_frac);
    p.ramus_height_frac = pick(r.ramus_height_frac);
    p.condyle_bulge = pick(r.condyle_bulge);
    p.perturb_amp = pick(r.perturb_amp);
    p.seed = rng.next_u64();
    return p;
}

/// `n` shapes, a pure function of (n, spec, seed, ranges). Each degenerate
/// draw is redrawn up to 10 times before the error propagates.
inline std::vector<SynthSample> generate_dataset(int n, const GridSpec& spec, std::uint64_t seed,
                                                 const SynthRanges& ranges = {}) {
    if (n < 1) throw InvalidArgument("dataset size must be >= 1");
    std::vector<SynthSample> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::mix(seed, std::uint64_t(i)));
        for (int attempt = 0;; ++attempt) {
            const SynthParams p = draw_params(rng, ranges);
            try {
                out.push_back({p, generate_shape(p, spec)});
                break;
            } catch (const DegenerateShape&) {
                if (attempt >= 10) throw;
            }
        }
    }
    return out;
}

inline nlohmann::json manifest_json(const std::vector<SynthSample>& samples) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : samples) arr.push_back(s.params);
    return arr;
}

}  // namespace shapecomp
