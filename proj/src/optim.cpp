#include "dtn/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dtn::optim {

double inverse_sqrt_lr(const AdamConfig& cfg, int step) {
    if (step < 1) throw std::invalid_argument("inverse_sqrt_lr: step must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.lr_scale / std::sqrt(static_cast<double>(cfg.d_model)) *
           std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

void Adam::step(model::ModelParams& params,
                const std::function<bool(const std::string&)>& active) {
    ++t_;
    const double lr = inverse_sqrt_lr(cfg_, t_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& [name, p] : params) {
        if (!p.requires_grad() || !active(name)) continue;
        auto& value = p.data();
        auto& grad = p.grad();
        if (grad.empty()) grad.assign(value.size(), 0.0);
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(value.size(), 0.0);
            v.assign(value.size(), 0.0);
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            grad[i] = 0.0;
        }
    }
}

void Adam::step(model::ModelParams& params) {
    step(params, [](const std::string&) { return true; });
}

}  // namespace dtn::optim
