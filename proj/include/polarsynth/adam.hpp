#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "polarsynth/errors.hpp"

namespace polarsynth {

// Adam with a stepwise exponential learning-rate schedule:
// lr(step) = base_lr * decay^(step / decay_every).
struct AdamConfig {
    double base_lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay = 0.995;
    int decay_every = 10;
};

class AdamOptimizer {
public:
    AdamOptimizer() = default;
    AdamOptimizer(size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    double lr() const {
        return cfg_.base_lr * std::pow(cfg_.decay, static_cast<double>(step_ / cfg_.decay_every));
    }
    void set_base_lr(double lr) { cfg_.base_lr = lr; }
    long step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    // One update; `params` and `grad` must both have the state's length.
    void step(std::vector<double>& params, const std::vector<double>& grad) {
        if (params.size() != m_.size() || grad.size() != m_.size())
            throw DomainError("AdamOptimizer: size mismatch");
        double rate = lr();
        ++step_;
        double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            double g = grad[i];
            m_[i] = cfg_.beta1 * m_[i] + (1 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1 - cfg_.beta2) * g * g;
            double mhat = m_[i] / c1, vhat = v_[i] / c2;
            params[i] -= rate * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    // state surface for checkpoints
    std::vector<double>& m() { return m_; }
    std::vector<double>& v() { return v_; }
    const std::vector<double>& m() const { return m_; }
    const std::vector<double>& v() const { return v_; }
    void restore(std::vector<double> m, std::vector<double> v, long step) {
        m_ = std::move(m);
        v_ = std::move(v);
        step_ = step;
    }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    long step_ = 0;
};

} // namespace polarsynth
