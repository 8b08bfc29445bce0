#pragma once

#include <cmath>
#include <vector>

#include "json.hpp"

#include "shapecomp/nn/layers.hpp"

namespace shapecomp::nn {

enum class WeightDecayMode { decoupled, l2 };

NLOHMANN_JSON_SERIALIZE_ENUM(WeightDecayMode, {{WeightDecayMode::decoupled, "decoupled"}, {WeightDecayMode::l2, "l2"}})

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
    WeightDecayMode decay_mode = WeightDecayMode::decoupled;
};

/// Adam over the trainable entries of a parameter list. Weight decay is either
/// decoupled (applied to the weights directly) or added to the gradient.
template <typename T>
class Adam {
public:
    Adam(const ParamList<T>& params, AdamConfig cfg = {}) : params_(params), cfg_(cfg) {
        for (auto* p : params_) {
            m_.emplace_back(p->trainable() ? p->value.numel() : 0, 0.0);
            v_.emplace_back(p->trainable() ? p->value.numel() : 0, 0.0);
        }
    }

    long steps() const { return t_; }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Param<T>& p = *params_[k];
            if (!p.trainable()) continue;
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.value.numel(); ++i) {
                double g = double(p.grad[i]);
                const double w = double(p.value[i]);
                if (cfg_.decay_mode == WeightDecayMode::l2) g += cfg_.weight_decay * w;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
                if (cfg_.decay_mode == WeightDecayMode::decoupled) update += cfg_.weight_decay * w;
                p.value[i] = T(w - lr * update);
            }
        }
    }

private:
    ParamList<T> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace shapecomp::nn
