#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "shapecomp/grid.hpp"
#include "shapecomp/losses.hpp"
#include "shapecomp/nn/layers.hpp"
#include "shapecomp/random.hpp"

namespace shapecomp {

enum class ModelMode { deterministic, probabilistic };

NLOHMANN_JSON_SERIALIZE_ENUM(ModelMode, {{ModelMode::deterministic, "deterministic"},
                                         {ModelMode::probabilistic, "probabilistic"}})

struct ModelConfig {
    int c = 32;
    int base_channels = 8;
    int depth = 4;
    int latent_dim = 8;
    double dropout_p = 0.5;
    ModelMode mode = ModelMode::deterministic;
    int trunk_features = 4;    // feature maps leaving the last up-transition
    int comb_channels = 8;     // kernels per P_comb layer
    int posterior_stages = 4;  // strided stages of the posterior encoder
    std::uint64_t init_seed = 0;

    void validate() const {
        if (c < 8) throw InvalidArgument("model grid size must be >= 8");
        if (depth < 1 || base_channels < 1 || trunk_features < 1 || comb_channels < 1 || posterior_stages < 1)
            throw InvalidArgument("model sizes must be positive");
        if (c % (1 << depth) != 0)
            throw ConfigMismatch("grid size " + std::to_string(c) + " is not divisible by 2^" + std::to_string(depth));
        if (latent_dim < 1) throw InvalidArgument("latent_dim must be >= 1");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidArgument("dropout_p must be in [0, 1)");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
    j = {{"c", m.c},
         {"base_channels", m.base_channels},
         {"depth", m.depth},
         {"latent_dim", m.latent_dim},
         {"dropout_p", m.dropout_p},
         {"mode", m.mode},
         {"trunk_features", m.trunk_features},
         {"comb_channels", m.comb_channels},
         {"posterior_stages", m.posterior_stages},
         {"init_seed", m.init_seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
    const ModelConfig d;
    m.c = j.value("c", d.c);
    m.base_channels = j.value("base_channels", d.base_channels);
    m.depth = j.value("depth", d.depth);
    m.latent_dim = j.value("latent_dim", d.latent_dim);
    m.dropout_p = j.value("dropout_p", d.dropout_p);
    m.mode = j.value("mode", d.mode);
    m.trunk_features = j.value("trunk_features", d.trunk_features);
    m.comb_channels = j.value("comb_channels", d.comb_channels);
    m.posterior_stages = j.value("posterior_stages", d.posterior_stages);
    m.init_seed = j.value("init_seed", d.init_seed);
}

/// z = mu + sigma * eps with eps drawn from a stream seeded by `noise_seed`.
inline std::vector<double> reparameterize(const PosteriorParams& q, std::uint64_t noise_seed) {
    Rng rng(noise_seed);
    std::vector<double> z(q.mu.size());
    for (std::size_t d = 0; d < z.size(); ++d) {
        if (!(q.sigma[d] > 0.0)) throw NonPositiveSigma("reparameterize needs sigma > 0");
        z[d] = q.mu[d] + q.sigma[d] * rng.normal();
    }
    return z;
}

namespace nn {

/// Volume tensor (1, 1, c, c, c) from a binary grid.
template <typename T>
Tensor<T> to_tensor(const VoxelGrid& g) {
    const int c = g.edge();
    Tensor<T> t({1, 1, c, c, c});
    for (std::size_t i = 0; i < g.size(); ++i) t[i] = T(g[i]);
    return t;
}

/// Stacks single-channel grids into (N, 1, c, c, c).
template <typename T>
Tensor<T> stack(const std::vector<const VoxelGrid*>& grids) {
    if (grids.empty()) throw InvalidArgument("cannot stack zero grids");
    const int c = grids[0]->edge();
    Tensor<T> t({int(grids.size()), 1, c, c, c});
    for (std::size_t n = 0; n < grids.size(); ++n) {
        require_same_spec(grids[n]->spec(), grids[0]->spec(), "stack");
        for (std::size_t i = 0; i < grids[n]->size(); ++i) t[n * t.stride0() + i] = T((*grids[n])[i]);
    }
    return t;
}

/// Batch entry `n` of a (N, 1, c, c, c) probability tensor.
template <typename T>
ProbGrid to_prob_grid(const Tensor<T>& t, int n, const GridSpec& spec) {
    std::vector<double> v(t.stride0());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = double(t[std::size_t(n) * t.stride0() + i]);
    return ProbGrid(spec, std::move(v));
}

/// conv -> batch norm -> ELU, optionally followed by dropout.
template <typename T>
struct ConvBnElu {
    Conv3d<T> conv;
    BatchNorm3d<T> bn;
    Elu<T> act;
    Dropout<T> drop{0.0};

    ConvBnElu() = default;
    ConvBnElu(const std::string& name, int cin, int cout, ConvGeom g, double dropout, Rng& rng)
        : conv(name + ".conv", cin, cout, g, false, rng), bn(name + ".bn", cout), drop(dropout) {}

    void collect(ParamList<T>& out) {
        conv.collect(out);
        bn.collect(out);
    }
    Tensor<T> forward(const Tensor<T>& x, const Context& ctx) {
        return drop.forward(act.forward(bn.forward(conv.forward(x), ctx)), ctx);
    }
    Tensor<T> backward(const Tensor<T>& d) { return conv.backward(bn.backward(act.backward(drop.backward(d)))); }
};

template <typename T>
struct UpStage {
    ConvTranspose3d<T> up;
    BatchNorm3d<T> bn;
    Elu<T> act;
    Dropout<T> drop{0.0};
    ConvBnElu<T> refine;
    int up_channels = 0;

    UpStage() = default;
    UpStage(const std::string& name, int cin, int cskip, int cout, double dropout, Rng& rng)
        : up(name + ".up", cin, cskip, ConvGeom{4, 2, 1, 1}, false, rng),
          bn(name + ".bn", cskip),
          drop(dropout),
          refine(name + ".refine", 2 * cskip, cout, ConvGeom{3, 1, 1, 1}, 0.0, rng),
          up_channels(cskip) {}

    void collect(ParamList<T>& out) {
        up.collect(out);
        bn.collect(out);
        refine.collect(out);
    }
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip, const Context& ctx) {
        const Tensor<T> u = drop.forward(act.forward(bn.forward(up.forward(x), ctx)), ctx);
        return refine.forward(concat_channels(u, skip), ctx);
    }
    /// Returns (gradient wrt x, gradient wrt skip).
    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& d) {
        auto [du, dskip] = split_channels(refine.backward(d), up_channels);
        return {up.backward(bn.backward(act.backward(drop.backward(du)))), std::move(dskip)};
    }
};

/// V-Net style trunk, deterministic head and the probabilistic branch
/// (posterior encoder, latent tiling, P_comb, P_gen). Forward calls cache
/// activations; each must be followed by the matching backward before the
/// next forward of the same kind.
template <typename T>
class CompletionNet {
public:
    explicit CompletionNet(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(Rng::mix(cfg_.init_seed, 0x6d6f64656c));
        const int b = cfg_.base_channels, L = cfg_.depth;
        const ConvGeom same{3, 1, 1, 1}, down{3, 2, 1, 1};
        in_conv_ = ConvBnElu<T>("trunk.in", 1, b, same, 0.0, rng);
        for (int l = 1; l <= L; ++l) {
            const int cin = b << (l - 1), cout = b << l;
            const double p = l > L - 2 ? cfg_.dropout_p : 0.0;
            downs_.emplace_back("trunk.down" + std::to_string(l), cin, cout, down, p, rng);
            down_refines_.emplace_back("trunk.down" + std::to_string(l) + ".refine", cout, cout, same, 0.0, rng);
        }
        for (int l = L; l >= 1; --l) {
            const int cin = b << l, cskip = b << (l - 1);
            const int cout = l == 1 ? cfg_.trunk_features : cskip;
            const double p = l > L - 2 ? cfg_.dropout_p : 0.0;
            ups_.emplace_back("trunk.up" + std::to_string(l), cin, cskip, cout, p, rng);
        }
        const ConvGeom gen_geom{2, 1, 1, 0};
        if (cfg_.mode == ModelMode::deterministic) {
            head_ = Conv3d<T>("head.gen", cfg_.trunk_features, 1, gen_geom, true, rng);
        } else {
            comb1_ = Conv3d<T>("comb.1", cfg_.trunk_features + cfg_.latent_dim, cfg_.comb_channels, ConvGeom{1, 1, 0, 0}, true, rng);
            comb2_ = Conv3d<T>("comb.2", cfg_.comb_channels, cfg_.comb_channels, ConvGeom{1, 1, 0, 0}, true, rng);
            head_ = Conv3d<T>("head.gen", cfg_.comb_channels, 1, gen_geom, true, rng);
            int cin = 2;
            for (int s = 0; s < cfg_.posterior_stages; ++s) {
                const int cout = b << s;
                post_convs_.emplace_back("post.conv" + std::to_string(s + 1), cin, cout, down, true, rng);
                post_acts_.emplace_back();
                cin = cout;
            }
            post_mu_ = Linear<T>("post.mu", cin, cfg_.latent_dim, rng);
            post_logvar_ = Linear<T>("post.logvar", cin, cfg_.latent_dim, rng, 0.1);
        }
        collect_all();
    }

    CompletionNet(const CompletionNet& o) : CompletionNet(o.cfg_) { copy_state_from(o); }
    CompletionNet& operator=(const CompletionNet&) = delete;

    const ModelConfig& config() const { return cfg_; }
    bool probabilistic() const { return cfg_.mode == ModelMode::probabilistic; }

    /// All parameters and buffers in a fixed order.
    const ParamList<T>& params() const { return params_; }

    void zero_grad() {
        for (auto* p : params_)
            if (p->trainable()) p->grad.zero();
    }

    void copy_state_from(const CompletionNet& o) {
        if (!(o.cfg_ == cfg_)) throw ConfigMismatch("cannot copy state between different model configs");
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = o.params_[i]->value;
    }

    // ---- trunk -------------------------------------------------------------

    /// (N, 1, c, c, c) -> (N, trunk_features, c, c, c).
    Tensor<T> trunk(const Tensor<T>& x, const Context& ctx) {
        check_input(x, 1);
        std::vector<Tensor<T>> skips;
        Tensor<T> h = in_conv_.forward(x, ctx);
        for (std::size_t l = 0; l < downs_.size(); ++l) {
            skips.push_back(h);
            h = down_refines_[l].forward(downs_[l].forward(h, ctx), ctx);
        }
        bottleneck_shape_ = h.shape();
        for (std::size_t j = 0; j < ups_.size(); ++j) h = ups_[j].forward(h, skips[skips.size() - 1 - j], ctx);
        features_ = h;
        return h;
    }

    void trunk_backward(const Tensor<T>& d_features) {
        Tensor<T> d = d_features;
        std::vector<Tensor<T>> dskips(downs_.size());
        for (std::size_t j = ups_.size(); j-- > 0;) {
            auto [dx, dskip] = ups_[j].backward(d);
            dskips[dskips.size() - 1 - j] = std::move(dskip);
            d = std::move(dx);
        }
        for (std::size_t l = downs_.size(); l-- > 0;) {
            d = downs_[l].backward(down_refines_[l].backward(d));
            d += dskips[l];
        }
        in_conv_.backward(d);
    }

    /// Shape of the deepest feature map of the most recent trunk call.
    const std::vector<int>& last_bottleneck_shape() const { return bottleneck_shape_; }

    /// Features produced by the most recent trunk call.
    const Tensor<T>& last_features() const { return features_; }

    // ---- heads -------------------------------------------------------------

    /// Deterministic head: P_gen convolution then sigmoid.
    Tensor<T> head_deterministic(const Tensor<T>& features) {
        require_mode(ModelMode::deterministic, "head_deterministic");
        return sigmoid_forward(head_.forward(features));
    }
    Tensor<T> head_deterministic_backward(const Tensor<T>& d_prob) { return head_.backward(sigmoid_backward(d_prob)); }

    /// Tiles z (N, latent_dim) over space, applies P_comb and P_gen.
    Tensor<T> tile_and_combine(const Tensor<T>& features, const Tensor<T>& z) {
        require_mode(ModelMode::probabilistic, "tile_and_combine");
        if (z.ndim() != 2 || z.dim(0) != features.dim(0) || z.dim(1) != cfg_.latent_dim)
            throw InvalidArgument("latent codes must be (N, latent_dim)");
        const Tensor<T> tiled = tile_latent(z, features.dim(2), features.dim(3), features.dim(4));
        Tensor<T> h = comb_act1_.forward(comb1_.forward(concat_channels(features, tiled)));
        h = comb_act2_.forward(comb2_.forward(h));
        return sigmoid_forward(head_.forward(h));
    }
    /// Returns (gradient wrt features, gradient wrt z).
    std::pair<Tensor<T>, Tensor<T>> tile_and_combine_backward(const Tensor<T>& d_prob) {
        Tensor<T> d = comb2_.backward(comb_act2_.backward(head_.backward(sigmoid_backward(d_prob))));
        d = comb1_.backward(comb_act1_.backward(d));
        auto [df, dtiled] = split_channels(d, cfg_.trunk_features);
        return {std::move(df), tile_latent_backward(dtiled)};
    }

    // ---- posterior ---------------------------------------------------------

    /// (N, 2, c, c, c) volumes of (X, Y) -> mu and log-variance, each (N, latent_dim).
    std::pair<Tensor<T>, Tensor<T>> posterior(const Tensor<T>& xy) {
        require_mode(ModelMode::probabilistic, "posterior");
        check_input(xy, 2);
        Tensor<T> h = xy;
        for (std::size_t s = 0; s < post_convs_.size(); ++s) h = post_acts_[s].forward(post_convs_[s].forward(h));
        pooled_shape_ = h.shape();
        const Tensor<T> pooled = global_avg_pool(h);
        return {post_mu_.forward(pooled), post_logvar_.forward(pooled)};
    }
    void posterior_backward(const Tensor<T>& d_mu, const Tensor<T>& d_logvar) {
        Tensor<T> dp = post_mu_.backward(d_mu);
        dp += post_logvar_.backward(d_logvar);
        Tensor<T> d = global_avg_pool_backward(dp, pooled_shape_);
        for (std::size_t s = post_convs_.size(); s-- > 0;) d = post_convs_[s].backward(post_acts_[s].backward(d));
    }

    // ---- composed passes ---------------------------------------------------

    /// Deterministic forward: (N, 1, c^3) inputs -> (N, 1, c^3) probabilities.
    Tensor<T> forward_deterministic(const Tensor<T>& x, const Context& ctx) {
        require_mode(ModelMode::deterministic, "forward_deterministic");
        return head_deterministic(trunk(x, ctx));
    }
    void backward_deterministic(const Tensor<T>& d_prob) { trunk_backward(head_deterministic_backward(d_prob)); }

    /// Probabilistic inference with caller-supplied codes z (N, latent_dim).
    Tensor<T> forward_latent(const Tensor<T>& x, const Tensor<T>& z, const Context& ctx) {
        require_mode(ModelMode::probabilistic, "forward_latent");
        return tile_and_combine(trunk(x, ctx), z);
    }
    void backward_latent(const Tensor<T>& d_prob) { trunk_backward(tile_and_combine_backward(d_prob).first); }

    struct TrainOutput {
        Tensor<T> prob;     ///< (K, 1, c^3), one prediction per target
        Tensor<T> mu;       ///< (K, latent_dim)
        Tensor<T> sigma;    ///< (K, latent_dim)
        Tensor<T> z;        ///< (K, latent_dim)
    };

    /// Probabilistic training pass. `x` holds N inputs, `targets` holds K
    /// target volumes where input n owns `counts[n]` consecutive targets, and
    /// `eps` (K, latent_dim) is the reparameterisation noise. The trunk runs
    /// once per input and its features are shared by that input's targets.
    TrainOutput forward_train(const Tensor<T>& x, const Tensor<T>& targets, const std::vector<int>& counts,
                              const Tensor<T>& eps, const Context& ctx) {
        require_mode(ModelMode::probabilistic, "forward_train");
        counts_ = counts;
        const Tensor<T> features = trunk(x, ctx);
        const Tensor<T> xrep = repeat_batch(x, counts);
        if (targets.dim(0) != xrep.dim(0) || eps.dim(0) != xrep.dim(0) || eps.dim(1) != cfg_.latent_dim)
            throw InvalidArgument("forward_train: targets, counts and noise do not align");
        auto [mu, logvar] = posterior(concat_channels(xrep, targets));
        TrainOutput out;
        out.mu = mu;
        out.sigma = Tensor<T>(mu.shape());
        out.z = Tensor<T>(mu.shape());
        for (std::size_t i = 0; i < mu.numel(); ++i) {
            out.sigma[i] = std::exp(T(0.5) * logvar[i]);
            out.z[i] = mu[i] + out.sigma[i] * eps[i];
        }
        eps_ = eps;
        sigma_ = out.sigma;
        out.prob = tile_and_combine(repeat_batch(features, counts), out.z);
        return out;
    }

    /// Backward of forward_train. `d_mu` and `d_sigma` are loss gradients that
    /// act on the posterior directly (the KL term); the path through z is added here.
    void backward_train(const Tensor<T>& d_prob, const Tensor<T>& d_mu, const Tensor<T>& d_sigma) {
        auto [dfeat_rep, dz] = tile_and_combine_backward(d_prob);
        Tensor<T> dmu(dz.shape()), dlogvar(dz.shape());
        for (std::size_t i = 0; i < dz.numel(); ++i) {
            dmu[i] = dz[i] + d_mu[i];
            const T ds = dz[i] * eps_[i] + d_sigma[i];
            dlogvar[i] = ds * T(0.5) * sigma_[i];
        }
        posterior_backward(dmu, dlogvar);
        trunk_backward(sum_repeats(dfeat_rep, counts_));
    }

private:
    void collect_all() {
        in_conv_.collect(params_);
        for (std::size_t l = 0; l < downs_.size(); ++l) {
            downs_[l].collect(params_);
            down_refines_[l].collect(params_);
        }
        for (auto& u : ups_) u.collect(params_);
        if (probabilistic()) {
            for (auto& c : post_convs_) c.collect(params_);
            post_mu_.collect(params_);
            post_logvar_.collect(params_);
            comb1_.collect(params_);
            comb2_.collect(params_);
        }
        head_.collect(params_);
    }

    void check_input(const Tensor<T>& x, int channels) const {
        if (x.ndim() != 5 || x.dim(1) != channels || x.dim(2) != cfg_.c || x.dim(3) != cfg_.c || x.dim(4) != cfg_.c) {
            throw ConfigMismatch("input volume does not match model grid size " + std::to_string(cfg_.c));
        }
    }

    void require_mode(ModelMode m, const char* what) const {
        if (cfg_.mode != m) throw ModeArgumentMismatch(std::string(what) + " is not available in this model mode");
    }

    Tensor<T> sigmoid_forward(const Tensor<T>& logits) {
        prob_ = Tensor<T>(logits.shape());
        for (std::size_t i = 0; i < logits.numel(); ++i) prob_[i] = sigmoid(logits[i]);
        return prob_;
    }
    Tensor<T> sigmoid_backward(const Tensor<T>& d_prob) {
        Tensor<T> d(d_prob.shape());
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] = d_prob[i] * prob_[i] * (T(1) - prob_[i]);
        return d;
    }

    ModelConfig cfg_;
    ConvBnElu<T> in_conv_;
    std::vector<ConvBnElu<T>> downs_, down_refines_;
    std::vector<UpStage<T>> ups_;
    Conv3d<T> head_, comb1_, comb2_;
    Elu<T> comb_act1_, comb_act2_;
    std::vector<Conv3d<T>> post_convs_;
    std::vector<Elu<T>> post_acts_;
    Linear<T> post_mu_, post_logvar_;
    ParamList<T> params_;

    Tensor<T> features_, prob_, eps_, sigma_;
    std::vector<int> pooled_shape_, counts_, bottleneck_shape_;
};

}  // namespace nn
}  // namespace shapecomp
