#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "tadp/autodiff.hpp"

namespace tadp::nn {

// One named group of parameters sharing an lr multiplier. The backbone group
// typically runs at a fraction of the head group's rate.
struct ParamGroup {
    std::string name;
    std::vector<Var> params;
    float lr_scale = 1.0f;
    float weight_decay = -1.0f;  // <0 means inherit the optimizer default
};

struct AdamWOptions {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

class AdamW {
  public:
    AdamW(std::vector<ParamGroup> groups, AdamWOptions opts);

    void zero_grad();
    // lr_mult scales the base lr of every group for this step (schedule hook)
    void step(float lr_mult = 1.0f);

    std::int64_t step_count() const { return t_; }
    const std::vector<ParamGroup>& groups() const { return groups_; }
    AdamWOptions& options() { return opts_; }

    // moments keyed by parameter node, exposed for checkpointing
    struct Moments {
        Tensor m;
        Tensor v;
    };
    const std::unordered_map<Node*, Moments>& state() const { return state_; }

  private:
    std::vector<ParamGroup> groups_;
    AdamWOptions opts_;
    std::unordered_map<Node*, Moments> state_;
    std::int64_t t_ = 0;
};

// Linear warmup from warmup_start_factor*base to base over warmup_steps, then
// polynomial decay to zero at total_steps: base * (1 - s/total)^power.
struct LrSchedule {
    std::int64_t warmup_steps = 0;
    float warmup_start_factor = 1e-2f;
    std::int64_t total_steps = 1;
    float power = 1.0f;

    float multiplier(std::int64_t step) const;
};

}  // namespace tadp::nn
