#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "shapecomp/augmentation.hpp"
#include "shapecomp/dissection.hpp"
#include "shapecomp/log.hpp"
#include "shapecomp/losses.hpp"
#include "shapecomp/metrics.hpp"
#include "shapecomp/nn/model.hpp"
#include "shapecomp/nn/optim.hpp"
#include "shapecomp/synth.hpp"

namespace shapecomp {

enum class Objective { dice_whole, dice_target, vwdice, cvae_basic, cvae_vwdice_tw };

NLOHMANN_JSON_SERIALIZE_ENUM(Objective, {{Objective::dice_whole, "dice_whole"},
                                         {Objective::dice_target, "dice_target"},
                                         {Objective::vwdice, "vwdice"},
                                         {Objective::cvae_basic, "cvae_basic"},
                                         {Objective::cvae_vwdice_tw, "cvae_vwdice_tw"}})

inline std::string to_string(Objective o) { return nlohmann::json(o).get<std::string>(); }

inline Objective objective_from_string(const std::string& s) {
    for (Objective o : {Objective::dice_whole, Objective::dice_target, Objective::vwdice, Objective::cvae_basic,
                        Objective::cvae_vwdice_tw})
        if (to_string(o) == s) return o;
    throw InvalidArgument("unknown objective '" + s + "'");
}

inline ModelMode mode_for(Objective o) {
    return o == Objective::cvae_basic || o == Objective::cvae_vwdice_tw ? ModelMode::probabilistic
                                                                         : ModelMode::deterministic;
}

struct TrainConfig {
    double lr0 = 1e-2;
    double lr_decay = 0.98;
    double weight_decay = 1e-5;
    nn::WeightDecayMode decay_mode = nn::WeightDecayMode::decoupled;
    int batch_size = 4;
    int epochs = 300;
    int m = 2;  // extra targets, used by cvae_vwdice_tw
    std::uint64_t seed = 0;
    Objective objective = Objective::vwdice;
    int patience = 30;  // epochs without validation improvement; <= 0 disables
    AugmentationConfig augmentation;
    DissectionConfig dissection;

    void validate() const {
        if (!(lr0 > 0.0)) throw InvalidArgument("lr0 must be positive");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidArgument("lr_decay must be in (0, 1]");
        if (!(weight_decay >= 0.0)) throw InvalidArgument("weight_decay must be >= 0");
        if (batch_size < 1 || epochs < 0 || m < 0) throw InvalidArgument("batch_size >= 1, epochs >= 0, m >= 0 required");
    }

    int extra_targets() const { return objective == Objective::cvae_vwdice_tw ? m : 0; }
    double lr_at(int epoch) const { return lr0 * std::pow(lr_decay, double(epoch)); }
};

NLOHMANN_JSON_SERIALIZE_ENUM(nn::WeightDecayMode, {{nn::WeightDecayMode::decoupled, "decoupled"},
                                                   {nn::WeightDecayMode::l2, "l2"}})
NLOHMANN_JSON_SERIALIZE_ENUM(KlWeighting, {{KlWeighting::mean, "mean"}, {KlWeighting::conformity, "conformity"}})

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
    j = {{"lr0", t.lr0},
         {"lr_decay", t.lr_decay},
         {"weight_decay", t.weight_decay},
         {"decay_mode", t.decay_mode},
         {"batch_size", t.batch_size},
         {"epochs", t.epochs},
         {"m", t.m},
         {"seed", t.seed},
         {"objective", t.objective},
         {"patience", t.patience},
         {"augmentation",
          {{"enabled", t.augmentation.enabled},
           {"max_rotation_deg", t.augmentation.max_rotation_deg},
           {"max_translation_vox", t.augmentation.max_translation_vox},
           {"mirror_probability", t.augmentation.mirror_probability}}},
         {"dissection",
          {{"min_size_frac", t.dissection.min_size_frac},
           {"max_size_frac", t.dissection.max_size_frac},
           {"min_removed_fraction", t.dissection.min_removed_fraction},
           {"max_removed_fraction", t.dissection.max_removed_fraction},
           {"max_attempts", t.dissection.max_attempts}}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
    const TrainConfig d;
    t.lr0 = j.value("lr0", d.lr0);
    t.lr_decay = j.value("lr_decay", d.lr_decay);
    t.weight_decay = j.value("weight_decay", d.weight_decay);
    t.decay_mode = j.value("decay_mode", d.decay_mode);
    t.batch_size = j.value("batch_size", d.batch_size);
    t.epochs = j.value("epochs", d.epochs);
    t.m = j.value("m", d.m);
    t.seed = j.value("seed", d.seed);
    t.objective = j.value("objective", d.objective);
    t.patience = j.value("patience", d.patience);
    const auto a = j.value("augmentation", nlohmann::json::object());
    t.augmentation.enabled = a.value("enabled", d.augmentation.enabled);
    t.augmentation.max_rotation_deg = a.value("max_rotation_deg", d.augmentation.max_rotation_deg);
    t.augmentation.max_translation_vox = a.value("max_translation_vox", d.augmentation.max_translation_vox);
    t.augmentation.mirror_probability = a.value("mirror_probability", d.augmentation.mirror_probability);
    const auto s = j.value("dissection", nlohmann::json::object());
    t.dissection.min_size_frac = s.value("min_size_frac", d.dissection.min_size_frac);
    t.dissection.max_size_frac = s.value("max_size_frac", d.dissection.max_size_frac);
    t.dissection.min_removed_fraction = s.value("min_removed_fraction", d.dissection.min_removed_fraction);
    t.dissection.max_removed_fraction = s.value("max_removed_fraction", d.dissection.max_removed_fraction);
    t.dissection.max_attempts = s.value("max_attempts", d.dissection.max_attempts);
}

inline void to_json(nlohmann::json& j, const LossConfig& l) {
    j = {{"gamma", l.gamma}, {"sigma_w_frac", l.sigma_w_frac}, {"smooth_eps", l.smooth_eps}, {"kl_weighting", l.kl_weighting}};
}

inline void from_json(const nlohmann::json& j, LossConfig& l) {
    const LossConfig d;
    l.gamma = j.value("gamma", d.gamma);
    l.sigma_w_frac = j.value("sigma_w_frac", d.sigma_w_frac);
    l.smooth_eps = j.value("smooth_eps", d.smooth_eps);
    l.kl_weighting = j.value("kl_weighting", d.kl_weighting);
}

// ---- data -----------------------------------------------------------------

struct DataConfig {
    int c = 32;
    int n_train = 64;
    int n_val = 16;
    int n_test = 16;
    int val_cases = 16;
    int test_cases = 100;
    std::uint64_t seed = 2024;
};

inline void to_json(nlohmann::json& j, const DataConfig& d) {
    j = {{"c", d.c},         {"n_train", d.n_train},     {"n_val", d.n_val}, {"n_test", d.n_test},
         {"val_cases", d.val_cases}, {"test_cases", d.test_cases}, {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DataConfig& d) {
    const DataConfig x;
    d.c = j.value("c", x.c);
    d.n_train = j.value("n_train", x.n_train);
    d.n_val = j.value("n_val", x.n_val);
    d.n_test = j.value("n_test", x.n_test);
    d.val_cases = j.value("val_cases", x.val_cases);
    d.test_cases = j.value("test_cases", x.test_cases);
    d.seed = j.value("seed", x.seed);
}

struct Dataset {
    std::vector<VoxelGrid> train, val, test;
};

/// Train/val/test split of one generated synthetic corpus, in generation order.
inline Dataset make_dataset(const DataConfig& cfg) {
    if (cfg.n_train < 1 || cfg.n_val < 0 || cfg.n_test < 0) throw InvalidArgument("invalid split sizes");
    const auto all = generate_dataset(cfg.n_train + cfg.n_val + cfg.n_test, GridSpec(cfg.c), cfg.seed);
    Dataset d;
    for (int i = 0; i < int(all.size()); ++i) {
        auto& dst = i < cfg.n_train ? d.train : i < cfg.n_train + cfg.n_val ? d.val : d.test;
        dst.push_back(all[std::size_t(i)].grid);
    }
    return d;
}

/// One frozen dissection used for validation or testing.
struct EvalCase {
    int shape = 0;
    std::uint64_t seed = 0;
    VoxelGrid mask, x, y;
};

/// Case k dissects shape k mod |shapes| with seed mix(seed, k); no augmentation.
inline std::vector<EvalCase> make_eval_cases(const std::vector<VoxelGrid>& shapes, int n, std::uint64_t seed,
                                             const DissectionConfig& dcfg = {}) {
    if (shapes.empty() || n < 0) throw InvalidArgument("evaluation cases need shapes");
    std::vector<EvalCase> cases;
    for (int k = 0; k < n; ++k) {
        const int s = k % int(shapes.size());
        const std::uint64_t case_seed = Rng::mix(seed, std::uint64_t(k));
        Dissection d = sample_dissection(shapes[std::size_t(s)], case_seed, dcfg);
        cases.push_back({s, case_seed, std::move(d.mask), std::move(d.x), std::move(d.y)});
    }
    return cases;
}

// ---- batches --------------------------------------------------------------

struct TrainSample {
    int shape = 0;
    std::uint64_t seed = 0;
    VoxelGrid mask;  ///< rasterised cuboid shared by every target
    VoxelGrid x;
    TargetSet targets;  ///< targets[0] is Y_0
    std::vector<WeightField> weights;
};

using Batch = std::vector<TrainSample>;

/// Augments shape `index`, dissects it, and cuts `m` donors (augmented the same
/// way) with the identical mask. A shape whose dissection sampling is exhausted
/// is replaced by another random shape.
inline TrainSample make_sample(const std::vector<VoxelGrid>& shapes, int index, std::uint64_t seed,
                               const TrainConfig& cfg, const LossConfig& loss_cfg) {
    Rng rng(seed);
    const int m = cfg.extra_targets();
    if (m >= int(shapes.size())) throw InvalidArgument("m must be smaller than the number of training shapes");
    const RigidAugmentation aug = cfg.augmentation.enabled ? sample_augmentation(rng, cfg.augmentation) : RigidAugmentation{};
    for (int attempt = 0;; ++attempt) {
        try {
            const VoxelGrid s = apply_augmentation(shapes[std::size_t(index)], aug);
            Dissection d = sample_dissection(s, rng.next_u64(), cfg.dissection);
            TrainSample out{index, seed, std::move(d.mask), std::move(d.x), {}, {}};
            std::vector<VoxelGrid> donors;
            if (m > 0) {
                std::vector<std::size_t> pool;
                for (std::size_t i = 0; i < shapes.size(); ++i)
                    if (int(i) != index) pool.push_back(i);
                const auto pick = rng.sample_without_replacement(pool.size(), std::min(pool.size(), std::size_t(m) + 3));
                for (std::size_t p : pick) donors.push_back(apply_augmentation(shapes[pool[p]], aug));
            }
            out.targets = build_target_set(donors, out.mask, d.y, m, rng);
            for (const auto& t : out.targets.targets) out.weights.push_back(build_weight_field(out.mask, t, loss_cfg));
            return out;
        } catch (const SamplingExhausted&) {
            if (attempt >= 10) throw;
            log::warn("dissection sampling exhausted on shape ", index, "; resampling the shape");
            index = int(rng.uniform_int(0, std::int64_t(shapes.size()) - 1));
        }
    }
}

inline Batch make_batch(const std::vector<VoxelGrid>& shapes, const std::vector<int>& indices,
                        const std::vector<std::uint64_t>& seeds, const TrainConfig& cfg, const LossConfig& loss_cfg) {
    if (shapes.empty()) throw InvalidArgument("empty dataset");
    Batch b;
    for (std::size_t i = 0; i < indices.size(); ++i) b.push_back(make_sample(shapes, indices[i], seeds[i], cfg, loss_cfg));
    return b;
}

// ---- loss and gradient ----------------------------------------------------

struct StepLoss {
    double total = 0.0;
    double reconstruction = 0.0;
    double kl = 0.0;
};

/// Forward, loss (mean over the batch) and backward for one batch. Gradients
/// are accumulated into the network's parameter grads. `noise` supplies the
/// reparameterisation draws of probabilistic objectives. With `backward`
/// false only the loss is computed.
template <typename T>
StepLoss loss_and_backward(nn::CompletionNet<T>& net, const Batch& batch, Objective objective, const LossConfig& loss_cfg,
                           const nn::Context& ctx, Rng& noise, bool backward = true) {
    if (net.config().mode != mode_for(objective))
        throw ModeArgumentMismatch("objective " + to_string(objective) + " does not match the model mode");
    const GridSpec spec = batch.at(0).x.spec();
    const double inv_b = 1.0 / double(batch.size());
    std::vector<const VoxelGrid*> xs;
    for (const auto& s : batch) xs.push_back(&s.x);
    const nn::Tensor<T> x = nn::stack<T>(xs);
    StepLoss out;

    if (!net.probabilistic()) {
        const nn::Tensor<T> prob = net.forward_deterministic(x, ctx);
        nn::Tensor<T> d_prob(prob.shape());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const TrainSample& s = batch[i];
            const ProbGrid p = nn::to_prob_grid(prob, int(i), spec);
            const VoxelGrid& y0 = s.targets.targets[0];
            LossGrad lg;
            switch (objective) {
                case Objective::dice_whole: lg = dice_whole_loss(s.x, y0, p, loss_cfg.smooth_eps); break;
                case Objective::dice_target: lg = dice_target_loss(s.mask, y0, p, loss_cfg.smooth_eps); break;
                default: lg = vw_dice_loss(s.x, y0, p, s.weights[0], loss_cfg.smooth_eps); break;
            }
            out.reconstruction += inv_b * lg.loss;
            for (std::size_t v = 0; v < lg.grad.size(); ++v) d_prob[i * d_prob.stride0() + v] = T(inv_b * lg.grad[v]);
        }
        out.total = out.reconstruction;
        if (backward) net.backward_deterministic(d_prob);
        return out;
    }

    const bool tw = objective == Objective::cvae_vwdice_tw;
    std::vector<int> counts;
    std::vector<const VoxelGrid*> ys;
    for (const auto& s : batch) {
        const std::size_t k = tw ? s.targets.size() : 1;
        counts.push_back(int(k));
        for (std::size_t t = 0; t < k; ++t) ys.push_back(&s.targets.targets[t]);
    }
    const int L = net.config().latent_dim;
    const int K = int(ys.size());
    nn::Tensor<T> eps({K, L});
    for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = T(noise.normal());
    const auto fwd = net.forward_train(x, nn::stack<T>(ys), counts, eps, ctx);

    nn::Tensor<T> d_prob(fwd.prob.shape()), d_mu({K, L}), d_sigma({K, L});
    int row = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const TrainSample& s = batch[i];
        std::vector<ProbGrid> preds;
        std::vector<PosteriorParams> posts;
        for (int t = 0; t < counts[i]; ++t) {
            preds.push_back(nn::to_prob_grid(fwd.prob, row + t, spec));
            PosteriorParams q;
            for (int d = 0; d < L; ++d) {
                q.mu.push_back(double(fwd.mu[std::size_t(row + t) * L + d]));
                q.sigma.push_back(double(fwd.sigma[std::size_t(row + t) * L + d]));
            }
            posts.push_back(std::move(q));
        }
        std::vector<std::vector<double>> dp;
        std::vector<KlGrad> dq;
        if (tw) {
            TargetWeightedLoss l = target_weighted_loss(s.x, preds, s.targets, posts, s.weights, loss_cfg);
            out.reconstruction += inv_b * l.reconstruction;
            out.kl += inv_b * l.kl;
            out.total += inv_b * l.total;
            dp = std::move(l.d_pred);
            dq = std::move(l.d_posterior);
        } else {
            LossGrad lg = dice_target_loss(s.mask, s.targets.targets[0], preds[0], loss_cfg.smooth_eps);
            KlGrad kg = kl_to_standard_normal(posts[0]);
            out.reconstruction += inv_b * lg.loss;
            out.kl += inv_b * kg.value;
            out.total += inv_b * (lg.loss + loss_cfg.gamma * kg.value);
            for (auto& g : kg.d_mu) g *= loss_cfg.gamma;
            for (auto& g : kg.d_sigma) g *= loss_cfg.gamma;
            dp.push_back(std::move(lg.grad));
            dq.push_back(std::move(kg));
        }
        for (int t = 0; t < counts[i]; ++t) {
            const std::size_t r = std::size_t(row + t);
            for (std::size_t v = 0; v < dp[std::size_t(t)].size(); ++v)
                d_prob[r * d_prob.stride0() + v] = T(inv_b * dp[std::size_t(t)][v]);
            for (int d = 0; d < L; ++d) {
                d_mu[r * L + std::size_t(d)] = T(inv_b * dq[std::size_t(t)].d_mu[std::size_t(d)]);
                d_sigma[r * L + std::size_t(d)] = T(inv_b * dq[std::size_t(t)].d_sigma[std::size_t(d)]);
            }
        }
        row += counts[i];
    }
    if (backward) net.backward_train(d_prob, d_mu, d_sigma);
    return out;
}

// ---- inference ------------------------------------------------------------

/// Completion probabilities for each input grid. Probabilistic models use the
/// supplied codes, one per input, or the zero vector when none are given.
inline std::vector<ProbGrid> predict(nn::CompletionNet<float>& net, const std::vector<const VoxelGrid*>& xs,
                                     const std::vector<std::vector<double>>& zs = {}, std::size_t chunk = 4) {
    std::vector<ProbGrid> out;
    const nn::Context ctx{false, nullptr};
    const int L = net.config().latent_dim;
    for (std::size_t start = 0; start < xs.size(); start += chunk) {
        const std::size_t end = std::min(xs.size(), start + chunk);
        std::vector<const VoxelGrid*> part(xs.begin() + std::ptrdiff_t(start), xs.begin() + std::ptrdiff_t(end));
        for (const auto* g : part)
            if (g->edge() != net.config().c) throw ConfigMismatch("input grid size does not match the model");
        const nn::Tensor<float> x = nn::stack<float>(part);
        nn::Tensor<float> prob;
        if (net.probabilistic()) {
            nn::Tensor<float> z({int(part.size()), L});
            if (!zs.empty()) {
                for (std::size_t i = 0; i < part.size(); ++i) {
                    const auto& zi = zs.at(start + i);
                    if (int(zi.size()) != L) throw InvalidArgument("latent code has the wrong dimension");
                    for (int d = 0; d < L; ++d) z[i * std::size_t(L) + std::size_t(d)] = float(zi[std::size_t(d)]);
                }
            }
            prob = net.forward_latent(x, z, ctx);
        } else {
            prob = net.forward_deterministic(x, ctx);
        }
        for (std::size_t i = 0; i < part.size(); ++i) out.push_back(nn::to_prob_grid(prob, int(i), part[i]->spec()));
    }
    return out;
}

/// Completion of one input. Deterministic models ignore `z`.
inline ProbGrid infer_complete(nn::CompletionNet<float>& net, const VoxelGrid& x,
                               const std::optional<std::vector<double>>& z = std::nullopt) {
    if (net.probabilistic()) {
        const std::vector<double> code = z.value_or(std::vector<double>(std::size_t(net.config().latent_dim), 0.0));
        return predict(net, {&x}, {code}).at(0);
    }
    return predict(net, {&x}).at(0);
}

struct Variation {
    std::vector<double> z;
    ProbGrid completion;
};

/// `n` completions for codes drawn from N(0, I) with a seeded stream.
inline std::vector<Variation> sample_variations(nn::CompletionNet<float>& net, const VoxelGrid& x, int n, std::uint64_t seed) {
    if (!net.probabilistic()) throw ConfigMismatch("sampling variations needs a probabilistic model");
    Rng rng(seed);
    std::vector<std::vector<double>> zs(std::size_t(std::max(n, 0)));
    for (auto& z : zs) {
        z.resize(std::size_t(net.config().latent_dim));
        for (auto& v : z) v = rng.normal();
    }
    std::vector<const VoxelGrid*> xs(zs.size(), &x);
    auto preds = predict(net, xs, zs);
    std::vector<Variation> out;
    for (std::size_t i = 0; i < zs.size(); ++i) out.push_back({zs[i], std::move(preds[i])});
    return out;
}

/// Hard Dice of the binarised prediction restricted to the cuboid against Y.
inline double target_region_dsc(const ProbGrid& pred, const EvalCase& c) {
    return conformity(hadamard(pred.binarize(0.5), c.mask), c.y);
}

/// DSC of the whole completed shape X+Y; what dice_whole is trained to reproduce.
inline double whole_shape_dsc(const ProbGrid& pred, const EvalCase& c) {
    return conformity(pred.binarize(0.5), unite(c.x, c.y));
}

/// Per-case DSC on the region the objective fits: the whole shape for
/// dice_whole, the removed segment for every other objective.
inline std::vector<double> evaluate_cases_dsc(nn::CompletionNet<float>& net, const std::vector<EvalCase>& cases,
                                              Objective objective = Objective::vwdice) {
    std::vector<const VoxelGrid*> xs;
    for (const auto& c : cases) xs.push_back(&c.x);
    const auto preds = predict(net, xs);
    std::vector<double> d;
    for (std::size_t i = 0; i < cases.size(); ++i)
        d.push_back(objective == Objective::dice_whole ? whole_shape_dsc(preds[i], cases[i])
                                                       : target_region_dsc(preds[i], cases[i]));
    return d;
}

inline std::vector<MetricsReport> evaluate_cases(nn::CompletionNet<float>& net, const std::vector<EvalCase>& cases) {
    std::vector<const VoxelGrid*> xs;
    for (const auto& c : cases) xs.push_back(&c.x);
    const auto preds = predict(net, xs);
    std::vector<MetricsReport> out;
    for (std::size_t i = 0; i < cases.size(); ++i) out.push_back(evaluate_region(preds[i], cases[i].mask, cases[i].y));
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

// ---- training -------------------------------------------------------------

struct TrainLogRow {
    int epoch = 0;
    long step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double reconstruction = 0.0;
    double kl = 0.0;
    double val_dsc = 0.0;
    double wall_seconds = 0.0;
};

inline void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& rows) {
    out << "epoch,step,lr,loss,reconstruction,kl,val_dsc,wall_seconds\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%ld,%.17g,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.step, r.lr, r.loss,
                      r.reconstruction, r.kl, r.val_dsc, r.wall_seconds);
        out << buf;
    }
}

struct TrainResult {
    nn::CompletionNet<float> net;  ///< best-on-validation state
    std::vector<TrainLogRow> log;
    double best_val_dsc = -1.0;
    int best_epoch = -1;
};

/// Adam training with an exponential learning-rate schedule, validation on the
/// frozen `val_cases` after every epoch and early stopping. Validation DSC is
/// taken on the region the objective fits (see evaluate_cases_dsc), so early
/// stopping tracks convergence of that objective. Epoch losses are means over
/// the epoch's batches.
inline TrainResult train(const std::vector<VoxelGrid>& shapes, const std::vector<EvalCase>& val_cases, ModelConfig model_cfg,
                         const TrainConfig& cfg, const LossConfig& loss_cfg,
                         const std::function<void(const TrainLogRow&)>& on_epoch = {}) {
    cfg.validate();
    model_cfg.mode = mode_for(cfg.objective);
    if (shapes.empty()) throw InvalidArgument("training needs at least one shape");
    if (shapes[0].edge() != model_cfg.c) throw ConfigMismatch("dataset grid size does not match the model");
    nn::CompletionNet<float> net(model_cfg);
    TrainResult result{nn::CompletionNet<float>(net), {}, -1.0, -1};
    nn::Adam<float> opt(net.params(), nn::AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay, cfg.decay_mode});
    Rng dropout_rng(Rng::mix(cfg.seed, 0xd509));
    Rng noise_rng(Rng::mix(cfg.seed, 0x2015e));
    const auto t0 = std::chrono::steady_clock::now();
    long step = 0;
    std::uint64_t sample_counter = 0;
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at(epoch);
        std::vector<int> order(shapes.size());
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng(Rng::mix(cfg.seed, 0x10000 + std::uint64_t(epoch)));
        order_rng.shuffle(order);
        StepLoss epoch_loss;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
            std::vector<int> idx(order.begin() + std::ptrdiff_t(start), order.begin() + std::ptrdiff_t(end));
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < idx.size(); ++i) seeds.push_back(Rng::mix(cfg.seed, 0x100000000ull + sample_counter++));
            const Batch batch = make_batch(shapes, idx, seeds, cfg, loss_cfg);
            net.zero_grad();
            const nn::Context ctx{true, &dropout_rng};
            const StepLoss l = loss_and_backward(net, batch, cfg.objective, loss_cfg, ctx, noise_rng);
            if (!std::isfinite(l.total)) {
                throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                                    "; first sample seed " + std::to_string(seeds[0]));
            }
            opt.step(lr);
            ++step;
            ++batches;
            epoch_loss.total += l.total;
            epoch_loss.reconstruction += l.reconstruction;
            epoch_loss.kl += l.kl;
        }
        TrainLogRow row;
        row.epoch = epoch;
        row.step = step;
        row.lr = lr;
        row.loss = epoch_loss.total / std::max(batches, 1);
        row.reconstruction = epoch_loss.reconstruction / std::max(batches, 1);
        row.kl = epoch_loss.kl / std::max(batches, 1);
        row.val_dsc = val_cases.empty() ? 0.0 : mean_of(evaluate_cases_dsc(net, val_cases, cfg.objective));
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(row);
        if (on_epoch) on_epoch(row);
        log::info("epoch ", epoch, " loss ", row.loss, " val_dsc ", row.val_dsc);
        if (row.val_dsc > result.best_val_dsc) {
            result.best_val_dsc = row.val_dsc;
            result.best_epoch = epoch;
            result.net.copy_state_from(net);
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            log::info("early stop after epoch ", epoch);
            break;
        }
    }
    return result;
}

// ---- experiments ----------------------------------------------------------

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    DataConfig data;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<Objective> arms{Objective::dice_whole, Objective::dice_target, Objective::vwdice, Objective::cvae_basic,
                                Objective::cvae_vwdice_tw};
    int latent_cases = 16;
    int latent_k = 8;
    double latent_step = 0.5;
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& e) {
    j = {{"model", e.model},
         {"train", e.train},
         {"loss", e.loss},
         {"data", e.data},
         {"experiment",
          {{"seeds", e.seeds}, {"arms", e.arms}, {"latent_cases", e.latent_cases}, {"latent_k", e.latent_k},
           {"latent_step", e.latent_step}}}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& e) {
    const ExperimentConfig d;
    e.model = j.value("model", d.model);
    e.train = j.value("train", d.train);
    e.loss = j.value("loss", d.loss);
    e.data = j.value("data", d.data);
    const auto x = j.value("experiment", nlohmann::json::object());
    e.seeds = x.value("seeds", d.seeds);
    e.arms = x.value("arms", d.arms);
    e.latent_cases = x.value("latent_cases", d.latent_cases);
    e.latent_k = x.value("latent_k", d.latent_k);
    e.latent_step = x.value("latent_step", d.latent_step);
    e.model.c = e.data.c;
}

/// Test dissections shared by every arm and seed.
inline std::vector<EvalCase> frozen_test_cases(const Dataset& d, const ExperimentConfig& cfg) {
    return make_eval_cases(d.test, cfg.data.test_cases, Rng::mix(cfg.data.seed, 0x7e57), cfg.train.dissection);
}

inline std::vector<EvalCase> frozen_val_cases(const Dataset& d, const ExperimentConfig& cfg) {
    if (d.val.empty()) return {};
    return make_eval_cases(d.val, cfg.data.val_cases, Rng::mix(cfg.data.seed, 0x7a1), cfg.train.dissection);
}

/// Trains one arm for one seed on the dataset's training split.
inline TrainResult train_arm(const Dataset& d, const ExperimentConfig& cfg, Objective arm, std::uint64_t seed) {
    ModelConfig mc = cfg.model;
    mc.init_seed = seed;
    TrainConfig tc = cfg.train;
    tc.objective = arm;
    tc.seed = seed;
    return train(d.train, frozen_val_cases(d, cfg), mc, tc, cfg.loss);
}

struct ArmResult {
    Objective arm;
    std::vector<double> seed_mean_dsc;          ///< per seed, mean target-region DSC
    std::vector<MetricsReport> reports;         ///< all seeds x test cases
    std::vector<int> best_epochs;
};

struct Table1Report {
    std::vector<ArmResult> arms;
    std::vector<std::uint64_t> seeds;

    const ArmResult& arm(Objective o) const {
        for (const auto& a : arms)
            if (a.arm == o) return a;
        throw InvalidArgument("arm " + to_string(o) + " was not run");
    }
};

/// Runs `jobs` callables on up to `threads` workers. Each job is independent,
/// so results do not depend on the thread count.
inline void run_parallel(std::size_t jobs, int threads, const std::function<void(std::size_t)>& fn) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
            try {
                fn(j);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    const int n = std::max(1, std::min<int>(threads, int(jobs)));
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Trains every arm for every seed and scores each on the frozen test cases.
/// `keep` (optional) receives the trained network of each (arm, seed) job.
inline Table1Report table1_experiment(const Dataset& d, const ExperimentConfig& cfg, int threads = 1,
                                      const std::function<void(Objective, std::uint64_t, TrainResult&)>& keep = {}) {
    const auto test_cases = frozen_test_cases(d, cfg);
    const std::size_t n_arms = cfg.arms.size(), n_seeds = cfg.seeds.size();
    std::vector<std::vector<MetricsReport>> reports(n_arms * n_seeds);
    std::vector<int> best(n_arms * n_seeds);
    std::mutex keep_mutex;
    run_parallel(n_arms * n_seeds, threads, [&](std::size_t j) {
        const Objective arm = cfg.arms[j / n_seeds];
        const std::uint64_t seed = cfg.seeds[j % n_seeds];
        log::info("table1: training ", to_string(arm), " seed ", seed);
        TrainResult r = train_arm(d, cfg, arm, seed);
        reports[j] = evaluate_cases(r.net, test_cases);
        best[j] = r.best_epoch;
        if (keep) {
            std::lock_guard lock(keep_mutex);
            keep(arm, seed, r);
        }
    });
    Table1Report out;
    out.seeds = cfg.seeds;
    for (std::size_t a = 0; a < n_arms; ++a) {
        ArmResult ar{cfg.arms[a], {}, {}, {}};
        for (std::size_t s = 0; s < n_seeds; ++s) {
            const auto& rs = reports[a * n_seeds + s];
            std::vector<double> dsc;
            for (const auto& r : rs) dsc.push_back(r.dsc);
            ar.seed_mean_dsc.push_back(mean_of(dsc));
            ar.reports.insert(ar.reports.end(), rs.begin(), rs.end());
            ar.best_epochs.push_back(best[a * n_seeds + s]);
        }
        out.arms.push_back(std::move(ar));
    }
    return out;
}

inline void write_table1_csv(std::ostream& out, const Table1Report& r) {
    std::vector<std::pair<std::string, MetricsAggregate>> rows;
    for (const auto& a : r.arms) rows.emplace_back(to_string(a.arm), aggregate(a.reports));
    write_metrics_csv(out, rows);
}

inline nlohmann::json to_json(const Table1Report& r) {
    nlohmann::json arms = nlohmann::json::array();
    for (const auto& a : r.arms)
        arms.push_back({{"method", to_string(a.arm)},
                        {"seed_mean_dsc", a.seed_mean_dsc},
                        {"best_epochs", a.best_epochs},
                        {"aggregate", to_json(aggregate(a.reports))}});
    return {{"seeds", r.seeds}, {"arms", arms}};
}

// ---- latent deviation -----------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("spearman needs two equal-length samples of size >= 2");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * double(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double ma = mean_of(ra), mb = mean_of(rb);
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

struct LatentDeviationRow {
    int case_index = 0;
    int draw = 0;
    double distance = 0.0;  ///< |z - mu_post|
    double dsc = 0.0;       ///< target-region DSC against Y_0
};

struct LatentDeviationResult {
    std::vector<LatentDeviationRow> rows;
    double spearman_rho = 0.0;
};

/// Posterior mean of P_post(X, Y_0) in evaluation mode.
inline std::vector<double> posterior_mean(nn::CompletionNet<float>& net, const VoxelGrid& x, const VoxelGrid& y) {
    const nn::Tensor<float> xy = nn::concat_channels(nn::to_tensor<float>(x), nn::to_tensor<float>(y));
    const auto [mu, logvar] = net.posterior(xy);
    return std::vector<double>(mu.values().begin(), mu.values().end());
}

/// For every case draws `k` codes z_j = mu_post + (j * step) u_j with random
/// unit directions u_j (j = 0 is the mode itself) and scores each completion.
inline LatentDeviationResult latent_deviation_experiment(nn::CompletionNet<float>& net, const std::vector<EvalCase>& cases,
                                                         int k, double step, std::uint64_t seed) {
    if (!net.probabilistic()) throw ConfigMismatch("latent deviation needs a probabilistic model");
    LatentDeviationResult out;
    const std::size_t L = std::size_t(net.config().latent_dim);
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const EvalCase& c = cases[ci];
        const auto mu = posterior_mean(net, c.x, c.y);
        Rng rng(Rng::mix(seed, ci));
        std::vector<std::vector<double>> zs;
        std::vector<double> dist;
        for (int j = 0; j < k; ++j) {
            std::vector<double> u(L);
            double norm = 0.0;
            do {
                norm = 0.0;
                for (auto& v : u) {
                    v = rng.normal();
                    norm += v * v;
                }
            } while (norm == 0.0);
            norm = std::sqrt(norm);
            const double r = step * double(j);
            std::vector<double> z(L);
            for (std::size_t d = 0; d < L; ++d) z[d] = mu[d] + r * u[d] / norm;
            zs.push_back(std::move(z));
            dist.push_back(r);
        }
        std::vector<const VoxelGrid*> xs(zs.size(), &c.x);
        const auto preds = predict(net, xs, zs);
        for (int j = 0; j < k; ++j)
            out.rows.push_back({int(ci), j, dist[std::size_t(j)], target_region_dsc(preds[std::size_t(j)], c)});
    }
    std::vector<double> a, b;
    for (const auto& r : out.rows) {
        a.push_back(r.distance);
        b.push_back(r.dsc);
    }
    out.spearman_rho = out.rows.size() >= 2 ? spearman(a, b) : 0.0;
    return out;
}

inline void write_latent_csv(std::ostream& out, const LatentDeviationResult& r) {
    out << "case,draw,distance,dsc\n";
    char buf[128];
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.6f,%.6f\n", row.case_index, row.draw, row.distance, row.dsc);
        out << buf;
    }
}

}  // namespace shapecomp
