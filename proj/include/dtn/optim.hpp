#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dtn/model.hpp"

// Adam with the inverse-square-root warmup schedule. Updates are restricted
// by a name predicate so training phases can freeze disjoint parameter
// groups while sharing one optimizer-state container per group.
namespace dtn::optim {

struct AdamConfig {
    double lr_scale = 0.5;
    int warmup_steps = 400;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    int d_model = 64;
};

// lr(step) = lr_scale * d_model^-1/2 * min(step^-1/2, step * warmup^-3/2)
double inverse_sqrt_lr(const AdamConfig& cfg, int step);

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // one step over every parameter with requires_grad for which
    // `active(name)` holds; missing grads count as zero; clears used grads
    void step(model::ModelParams& params,
              const std::function<bool(const std::string&)>& active);
    void step(model::ModelParams& params);

    const AdamConfig& config() const { return cfg_; }
    int steps_taken() const { return t_; }

    // exposed for checkpointing of resumable training state
    int t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;

private:
    AdamConfig cfg_;
};

}  // namespace dtn::optim
