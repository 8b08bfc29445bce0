#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "shapecomp/grid.hpp"
#include "shapecomp/losses.hpp"

namespace shapecomp {

/// Centers of boundary voxels (set voxels with an unset 6-neighbour; the
/// lattice border counts as unset), in voxel units.
struct SurfacePointSet {
    std::vector<Vec3> points;
    double voxel_size = 1.0;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

/// Points come out in storage order (z, then y, then x ascending).
inline SurfacePointSet extract_surface(const VoxelGrid& g) {
    if (g.empty()) throw EmptyGrid("cannot extract the surface of an empty grid");
    SurfacePointSet s;
    s.voxel_size = g.spec().voxel_size;
    const int c = g.edge();
    for (int z = 0; z < c; ++z)
        for (int y = 0; y < c; ++y)
            for (int x = 0; x < c; ++x) {
                if (!g.at(x, y, z)) continue;
                const bool interior = g.get_or_zero(x - 1, y, z) && g.get_or_zero(x + 1, y, z) &&
                                      g.get_or_zero(x, y - 1, z) && g.get_or_zero(x, y + 1, z) &&
                                      g.get_or_zero(x, y, z - 1) && g.get_or_zero(x, y, z + 1);
                if (!interior) s.points.emplace_back(x, y, z);
            }
    return s;
}

/// Squared Euclidean distance, summed in a fixed x, y, z order.
inline double squared_distance(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

/// Static 3-d tree for exact nearest-neighbour queries.
class KdTree {
public:
    explicit KdTree(const std::vector<Vec3>& points) : pts_(points), order_(points.size()) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        build(0, order_.size(), 0);
    }

    /// Squared distance to the nearest stored point.
    double nearest_squared(const Vec3& q) const {
        double best = std::numeric_limits<double>::infinity();
        search(0, order_.size(), 0, q, best);
        return best;
    }

private:
    void build(std::size_t lo, std::size_t hi, int axis) {
        if (hi - lo <= kLeaf) return;
        const std::size_t mid = lo + (hi - lo) / 2;
        std::nth_element(order_.begin() + std::ptrdiff_t(lo), order_.begin() + std::ptrdiff_t(mid),
                         order_.begin() + std::ptrdiff_t(hi),
                         [&](std::size_t a, std::size_t b) { return pts_[a][axis] < pts_[b][axis]; });
        build(lo, mid, (axis + 1) % 3);
        build(mid + 1, hi, (axis + 1) % 3);
    }

    void search(std::size_t lo, std::size_t hi, int axis, const Vec3& q, double& best) const {
        if (hi - lo <= kLeaf) {
            for (std::size_t i = lo; i < hi; ++i) best = std::min(best, squared_distance(q, pts_[order_[i]]));
            return;
        }
        const std::size_t mid = lo + (hi - lo) / 2;
        const Vec3& pivot = pts_[order_[mid]];
        best = std::min(best, squared_distance(q, pivot));
        const double delta = q[axis] - pivot[axis];
        const int next = (axis + 1) % 3;
        // Near side first; the far side only if the splitting plane is within reach.
        if (delta < 0.0) {
            search(lo, mid, next, q, best);
            if (delta * delta <= best) search(mid + 1, hi, next, q, best);
        } else {
            search(mid + 1, hi, next, q, best);
            if (delta * delta <= best) search(lo, mid, next, q, best);
        }
    }

    static constexpr std::size_t kLeaf = 8;
    std::vector<Vec3> pts_;
    std::vector<std::size_t> order_;
};

/// Nearest-neighbour distance (mm) from every point of `a` to the set `b`, in `a`'s order.
inline std::vector<double> directed_distances(const SurfacePointSet& a, const SurfacePointSet& b) {
    if (a.empty() || b.empty()) throw EmptySurface("directed distance needs two non-empty surfaces");
    const KdTree tree(b.points);
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = std::sqrt(tree.nearest_squared(a.points[i])) * a.voxel_size;
    return d;
}

/// Mean over p in a of min over q in b of |p - q|, in mm.
inline double directed_avg_distance(const SurfacePointSet& a, const SurfacePointSet& b) {
    const auto d = directed_distances(a, b);
    double sum = 0.0;
    for (double v : d) sum += v;
    return sum / double(d.size());
}

/// Percentile with linear interpolation between order statistics (rank q*(n-1)).
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw InvalidArgument("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * double(values.size() - 1);
    const auto lo = std::size_t(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - double(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

enum class Hd95Convention {
    union_of_directions,  ///< 95th percentile of both directed multisets pooled
    max_of_directions,    ///< max of the two per-direction 95th percentiles
};

inline double hd95(const SurfacePointSet& a, const SurfacePointSet& b,
                   Hd95Convention convention = Hd95Convention::union_of_directions) {
    auto ab = directed_distances(a, b);
    auto ba = directed_distances(b, a);
    if (convention == Hd95Convention::max_of_directions) return std::max(percentile(ab, 0.95), percentile(ba, 0.95));
    ab.insert(ab.end(), ba.begin(), ba.end());
    return percentile(std::move(ab), 0.95);
}

struct MetricsReport {
    double dsc = 0.0;
    double comp_mm = 0.0;  ///< target surface -> predicted surface
    double acc_mm = 0.0;   ///< predicted surface -> target surface
    double hd95_mm = 0.0;
    bool empty_prediction = false;
};

struct EvalOptions {
    double threshold = 0.5;
    Hd95Convention hd95_convention = Hd95Convention::union_of_directions;
};

inline MetricsReport evaluate_binary(const VoxelGrid& pred, const VoxelGrid& target, const EvalOptions& opt = {}) {
    require_same_spec(pred.spec(), target.spec(), "evaluate");
    MetricsReport r;
    r.dsc = conformity(pred, target);
    if (pred.empty() || target.empty()) {
        const double inf = std::numeric_limits<double>::infinity();
        r.comp_mm = r.acc_mm = r.hd95_mm = inf;
        r.empty_prediction = pred.empty();
        return r;
    }
    const auto sp = extract_surface(pred);
    const auto st = extract_surface(target);
    r.comp_mm = directed_avg_distance(st, sp);
    r.acc_mm = directed_avg_distance(sp, st);
    r.hd95_mm = hd95(sp, st, opt.hd95_convention);
    return r;
}

/// Binarizes `pred` (voxels > threshold) and scores it against `target`.
/// An empty binarized prediction reports +inf distances and sets the flag.
inline MetricsReport evaluate(const ProbGrid& pred, const VoxelGrid& target, const EvalOptions& opt = {}) {
    require_same_spec(pred.spec(), target.spec(), "evaluate");
    return evaluate_binary(pred.binarize(opt.threshold), target, opt);
}

/// Scores only the part of the prediction inside `region` (the dissection cuboid).
inline MetricsReport evaluate_region(const ProbGrid& pred, const VoxelGrid& region, const VoxelGrid& target,
                                     const EvalOptions& opt = {}) {
    return evaluate_binary(hadamard(pred.binarize(opt.threshold), region), target, opt);
}

inline nlohmann::json to_json(const MetricsReport& r) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"dsc", r.dsc},
            {"comp_mm", num(r.comp_mm)},
            {"acc_mm", num(r.acc_mm)},
            {"hd95_mm", num(r.hd95_mm)},
            {"empty_prediction", r.empty_prediction}};
}

struct MeanStd {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;  ///< finite samples used
};

/// Mean and sample standard deviation over the finite values.
inline MeanStd mean_std(const std::vector<double>& values) {
    MeanStd out;
    double sum = 0.0;
    for (double v : values)
        if (std::isfinite(v)) {
            sum += v;
            ++out.n;
        }
    if (out.n == 0) return out;
    out.mean = sum / double(out.n);
    double ss = 0.0;
    for (double v : values)
        if (std::isfinite(v)) ss += (v - out.mean) * (v - out.mean);
    out.std = out.n > 1 ? std::sqrt(ss / double(out.n - 1)) : 0.0;
    return out;
}

struct MetricsAggregate {
    MeanStd dsc, comp_mm, acc_mm, hd95_mm;
    std::size_t cases = 0;
    std::size_t empty_predictions = 0;
};

inline MetricsAggregate aggregate(const std::vector<MetricsReport>& reports) {
    std::vector<double> dsc, comp, acc, hd;
    MetricsAggregate a;
    for (const auto& r : reports) {
        dsc.push_back(r.dsc);
        comp.push_back(r.comp_mm);
        acc.push_back(r.acc_mm);
        hd.push_back(r.hd95_mm);
        a.empty_predictions += r.empty_prediction;
    }
    a.cases = reports.size();
    a.dsc = mean_std(dsc);
    a.comp_mm = mean_std(comp);
    a.acc_mm = mean_std(acc);
    a.hd95_mm = mean_std(hd);
    return a;
}

inline nlohmann::json to_json(const MetricsAggregate& a) {
    auto ms = [](const MeanStd& m) -> nlohmann::json {
        if (m.n == 0) return nullptr;
        return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}};
    };
    return {{"cases", a.cases},       {"empty_predictions", a.empty_predictions},
            {"dsc", ms(a.dsc)},       {"comp_mm", ms(a.comp_mm)},
            {"acc_mm", ms(a.acc_mm)}, {"hd95_mm", ms(a.hd95_mm)}};
}

/// "mean ± std" with fixed decimals, or N/A when no finite samples exist.
inline std::string format_mean_std(const MeanStd& m, int decimals, double scale = 1.0) {
    if (m.n == 0) return "N/A";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, m.mean * scale, decimals, m.std * scale);
    return buf;
}

/// One CSV row per named aggregate: method, DSC%, Comp, Acc, HD95 (each "mean ± std").
inline void write_metrics_csv(std::ostream& out, const std::vector<std::pair<std::string, MetricsAggregate>>& rows) {
    out << "method,dsc_percent,comp_mm,acc_mm,hd95_mm\n";
    for (const auto& [name, a] : rows) {
        out << name << ',' << format_mean_std(a.dsc, 1, 100.0) << ',' << format_mean_std(a.comp_mm, 2) << ','
            << format_mean_std(a.acc_mm, 2) << ',' << format_mean_std(a.hd95_mm, 2) << '\n';
    }
}

}  // namespace shapecomp
