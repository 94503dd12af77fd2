#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "params.hpp"

namespace prefdiff {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Global gradient-norm clip; 0 disables clipping.
    double clip_norm = 1.0;
};

/// Adam with per-parameter moment buffers keyed by parameter name.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const noexcept { return cfg_; }
    std::size_t steps() const noexcept { return t_; }

    /// Applies one update; returns the pre-clip global gradient norm.
    double step(ParameterStore& store, const std::map<std::string, Array>& grads) {
        double sq = 0.0;
        for (const auto& [_, g] : grads)
            for (double v : g.data()) sq += v * v;
        const double norm = std::sqrt(sq);
        const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            Array& p = store.get(name);
            auto [it, fresh] = moments_.try_emplace(name);
            if (fresh) {
                it->second.m.assign(p.size(), 0.0);
                it->second.v.assign(p.size(), 0.0);
            }
            auto& mom = it->second;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i] * clip;
                mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
                mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                p[i] -= cfg_.lr * (mom.m[i] / bc1) / (std::sqrt(mom.v[i] / bc2) + cfg_.eps);
            }
        }
        return norm;
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> moments_;
};

} // namespace prefdiff
