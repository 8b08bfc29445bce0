#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "shapecomp/grid.hpp"
#include "shapecomp/log.hpp"
#include "shapecomp/random.hpp"

namespace shapecomp {

enum class KlWeighting { mean, conformity };

struct LossConfig {
    double gamma = 0.1;               // KL weight
    double sigma_w_frac = 1.0 / 3.0;  // sigma_w = sigma_w_frac * c
    double smooth_eps = 1e-6;         // Dice denominator guard
    int m = 2;                        // extra targets per sample
    KlWeighting kl_weighting = KlWeighting::mean;
};

/// Scalar loss plus its gradient with respect to every voxel of the prediction.
struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

/// Soft Dice value 2*sum(p*t) / (sum p + sum t + eps). The loss is 1 - value.
inline double soft_dice(const ProbGrid& p, const VoxelGrid& t, double eps = 1e-6) {
    require_same_spec(p.spec(), t.spec(), "soft_dice");
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * t[i];
        sp += p[i];
        st += t[i];
    }
    return 2.0 * inter / (sp + st + eps);
}

/// 1 - soft_dice(p, t) with its gradient in p.
inline LossGrad soft_dice_loss(const ProbGrid& p, const VoxelGrid& t, double eps = 1e-6) {
    require_same_spec(p.spec(), t.spec(), "soft_dice_loss");
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * t[i];
        sp += p[i];
        st += t[i];
    }
    const double den = sp + st + eps;
    LossGrad out{1.0 - 2.0 * inter / den, std::vector<double>(p.size())};
    for (std::size_t i = 0; i < p.size(); ++i) out.grad[i] = -(2.0 * t[i] * den - 2.0 * inter) / (den * den);
    return out;
}

/// Per-voxel weights around the removed segment: 1 inside the cuboid mask,
/// an unnormalised Gaussian of the distance to the target centroid outside.
struct WeightField {
    GridSpec spec;
    std::vector<double> data;
    double sigma_w = 0.0;
    Vec3 center = Vec3::Zero();

    static WeightField uniform(const GridSpec& spec) {
        return {spec, std::vector<double>(spec.voxel_count(), 1.0), std::numeric_limits<double>::infinity(),
                spec.center()};
    }
};

inline WeightField build_weight_field(const VoxelGrid& b, const VoxelGrid& y, const LossConfig& cfg = {}) {
    require_same_spec(b.spec(), y.spec(), "build_weight_field");
    if (y.empty()) throw EmptyTarget("weight field needs a non-empty target segment");
    WeightField w;
    w.spec = b.spec();
    w.sigma_w = cfg.sigma_w_frac * b.spec().c;
    w.center = y.centroid();
    w.data.resize(b.size());
    const double inv_two_var = 1.0 / (2.0 * w.sigma_w * w.sigma_w);
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b[i]) {
            w.data[i] = 1.0;
            continue;
        }
        const auto [x, yy, z] = b.spec().coords(i);
        const double d2 = (Vec3(x, yy, z) - w.center).squaredNorm();
        w.data[i] = std::exp(-d2 * inv_two_var);
    }
    return w;
}

/// Voxel-weighted Dice:
///   1 - 2 sum[p (x+y) W] / (sum[(p + x + y) W] + eps)
/// with x and y disjoint (x + y is the whole shape).
inline LossGrad vw_dice_loss(const VoxelGrid& x, const VoxelGrid& y, const ProbGrid& p, const WeightField& w,
                             double eps = 1e-6) {
    require_same_spec(x.spec(), y.spec(), "vw_dice_loss");
    require_same_spec(x.spec(), p.spec(), "vw_dice_loss");
    require_same_spec(x.spec(), w.spec, "vw_dice_loss");
    double num = 0.0, den = eps;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double t = double(x[i]) + double(y[i]);
        num += p[i] * t * w.data[i];
        den += (p[i] + t) * w.data[i];
    }
    num *= 2.0;
    LossGrad out{1.0 - num / den, std::vector<double>(p.size())};
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double t = double(x[i]) + double(y[i]);
        out.grad[i] = -w.data[i] * (2.0 * t * den - num) * inv_den2;
    }
    return out;
}

/// Whole-shape baseline: vanilla Dice against X + Y.
inline LossGrad dice_whole_loss(const VoxelGrid& x, const VoxelGrid& y, const ProbGrid& p, double eps = 1e-6) {
    return soft_dice_loss(p, unite(x, y), eps);
}

/// Target-only baseline: Dice between the prediction restricted to the cuboid and Y.
inline LossGrad dice_target_loss(const VoxelGrid& b, const VoxelGrid& y, const ProbGrid& p, double eps = 1e-6) {
    require_same_spec(b.spec(), p.spec(), "dice_target_loss");
    std::vector<double> masked(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) masked[i] = b[i] ? p[i] : 0.0;
    LossGrad out = soft_dice_loss(ProbGrid(p.spec(), std::move(masked)), y, eps);
    for (std::size_t i = 0; i < p.size(); ++i)
        if (!b[i]) out.grad[i] = 0.0;
    return out;
}

/// The W = 1 case of vw_dice_loss against the vanilla whole-shape Dice loss.
/// Returns the absolute difference of the two routes (zero up to rounding).
inline double reduction_check(const VoxelGrid& x, const VoxelGrid& y, const ProbGrid& p, double eps = 1e-6) {
    const double weighted = vw_dice_loss(x, y, p, WeightField::uniform(p.spec()), eps).loss;
    const double vanilla = 1.0 - soft_dice(p, unite(x, y), eps);
    return std::abs(weighted - vanilla);
}

/// Hard Dice between two binary shapes; 1 when both are empty.
inline double conformity(const VoxelGrid& a, const VoxelGrid& b) {
    require_same_spec(a.spec(), b.spec(), "conformity");
    const std::size_t na = a.count(), nb = b.count();
    if (na + nb == 0) return 1.0;
    return 2.0 * double(intersection_count(a, b)) / double(na + nb);
}

/// Y_0 (the true removed segment) plus donor segments cut with the same mask.
struct TargetSet {
    std::vector<VoxelGrid> targets;
    std::vector<double> conformities;  // conformity of each target with Y_0
    std::vector<int> donors;           // source shape index per target, -1 for Y_0

    std::size_t size() const { return targets.size(); }
};

/// Cuts `m` distinct randomly chosen shapes with `cuboid_mask`. A donor whose
/// cut is empty is replaced by another candidate, up to 10 times per slot;
/// slots that stay empty are dropped.
inline TargetSet build_target_set(const std::vector<VoxelGrid>& shapes, const VoxelGrid& cuboid_mask,
                                  const VoxelGrid& y0, int m, Rng& rng, const std::vector<int>& exclude = {}) {
    TargetSet set;
    set.targets.push_back(y0);
    set.conformities.push_back(1.0);
    set.donors.push_back(-1);
    if (m <= 0) return set;

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < shapes.size(); ++i)
        if (std::find(exclude.begin(), exclude.end(), int(i)) == exclude.end()) pool.push_back(i);
    if (std::size_t(m) > pool.size()) throw InvalidArgument("not enough donor shapes for the requested m");
    rng.shuffle(pool);

    std::size_t next = 0;
    for (int slot = 0; slot < m; ++slot) {
        bool filled = false;
        for (int tries = 0; tries <= 10 && next < pool.size(); ++tries) {
            const std::size_t donor = pool[next++];
            require_same_spec(shapes[donor].spec(), cuboid_mask.spec(), "build_target_set");
            VoxelGrid yi = hadamard(shapes[donor], cuboid_mask);
            if (yi.empty()) continue;
            set.conformities.push_back(conformity(y0, yi));
            set.targets.push_back(std::move(yi));
            set.donors.push_back(int(donor));
            filled = true;
            break;
        }
        if (!filled) log::warn("dropping donor target slot ", slot, ": every candidate cut was empty");
    }
    return set;
}

/// Diagonal Gaussian posterior over the latent code.
struct PosteriorParams {
    std::vector<double> mu;
    std::vector<double> sigma;
};

struct KlGrad {
    double value = 0.0;
    std::vector<double> d_mu;
    std::vector<double> d_sigma;
};

/// KL(N(mu, diag sigma^2) || N(0, I)) = sum 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2).
inline KlGrad kl_to_standard_normal(const PosteriorParams& q) {
    if (q.mu.size() != q.sigma.size()) throw InvalidArgument("posterior mu/sigma length mismatch");
    KlGrad out;
    out.d_mu.resize(q.mu.size());
    out.d_sigma.resize(q.mu.size());
    for (std::size_t d = 0; d < q.mu.size(); ++d) {
        const double s = q.sigma[d];
        if (!(s > 0.0)) throw NonPositiveSigma("sigma[" + std::to_string(d) + "] = " + std::to_string(s));
        out.value += 0.5 * (q.mu[d] * q.mu[d] + s * s - 1.0 - std::log(s * s));
        out.d_mu[d] = q.mu[d];
        out.d_sigma[d] = s - 1.0 / s;
    }
    return out;
}

struct TargetWeightedLoss {
    double total = 0.0;
    double reconstruction = 0.0;
    double kl = 0.0;
    std::vector<std::vector<double>> d_pred;  // per target, per voxel
    std::vector<KlGrad> d_posterior;          // per target, already scaled by gamma * weight
};

/// (1 / sum L) * sum_i L_i * VWDice_i + gamma * aggregate_i KL_i, where L_i is
/// the conformity of target i with Y_0. KL is aggregated by plain mean or by
/// conformity-weighted mean per `cfg.kl_weighting`. With `posteriors` empty
/// the KL term is omitted.
inline TargetWeightedLoss target_weighted_loss(const VoxelGrid& x, const std::vector<ProbGrid>& predictions,
                                               const TargetSet& tset, const std::vector<PosteriorParams>& posteriors,
                                               const std::vector<WeightField>& w_fields, const LossConfig& cfg) {
    const std::size_t k = tset.size();
    if (predictions.size() != k || w_fields.size() != k || tset.conformities.size() != k ||
        (!posteriors.empty() && posteriors.size() != k)) {
        throw InvalidArgument("target-weighted loss: predictions, targets, weights and posteriors must align");
    }
    double lambda_sum = 0.0;
    for (double l : tset.conformities) lambda_sum += l;
    if (!(lambda_sum > 0.0)) throw InvalidArgument("conformities must have a positive sum");

    TargetWeightedLoss out;
    out.d_pred.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double weight = tset.conformities[i] / lambda_sum;
        LossGrad li = vw_dice_loss(x, tset.targets[i], predictions[i], w_fields[i], cfg.smooth_eps);
        out.reconstruction += weight * li.loss;
        for (auto& g : li.grad) g *= weight;
        out.d_pred[i] = std::move(li.grad);
    }
    if (!posteriors.empty()) {
        out.d_posterior.resize(k);
        for (std::size_t i = 0; i < k; ++i) {
            const double weight = cfg.kl_weighting == KlWeighting::mean ? 1.0 / double(k)
                                                                        : tset.conformities[i] / lambda_sum;
            KlGrad kg = kl_to_standard_normal(posteriors[i]);
            out.kl += weight * kg.value;
            for (auto& g : kg.d_mu) g *= cfg.gamma * weight;
            for (auto& g : kg.d_sigma) g *= cfg.gamma * weight;
            out.d_posterior[i] = std::move(kg);
        }
    }
    out.total = out.reconstruction + cfg.gamma * out.kl;
    return out;
}

}  // namespace shapecomp
