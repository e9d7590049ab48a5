#include "tadp/optim.hpp"

#include <cmath>

#include "tadp/error.hpp"

namespace tadp::nn {

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWOptions opts) : groups_(std::move(groups)), opts_(opts) {
    for (auto& g : groups_)
        for (auto& p : g.params) {
            if (!p->requires_grad) throw ValidationError("AdamW: parameter '" + p->name + "' does not require grad");
            state_[p.get()] = Moments{Tensor::zeros(p->value.shape()), Tensor::zeros(p->value.shape())};
        }
}

void AdamW::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) {
            p->has_grad = false;
            p->grad = Tensor();
        }
}

void AdamW::step(float lr_mult) {
    ++t_;
    float bc1 = 1.0f - std::pow(opts_.beta1, static_cast<float>(t_));
    float bc2 = 1.0f - std::pow(opts_.beta2, static_cast<float>(t_));
    for (auto& g : groups_) {
        float lr = opts_.lr * g.lr_scale * lr_mult;
        float wd = g.weight_decay >= 0.0f ? g.weight_decay : opts_.weight_decay;
        for (auto& p : g.params) {
            if (!p->has_grad) continue;
            auto& st = state_[p.get()];
            float* w = p->value.data();
            const float* gr = p->grad.data();
            float* m = st.m.data();
            float* v = st.v.data();
            std::int64_t n = p->value.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                // decoupled decay: applied to the weight, not folded into the gradient
                w[i] -= lr * wd * w[i];
                m[i] = opts_.beta1 * m[i] + (1.0f - opts_.beta1) * gr[i];
                v[i] = opts_.beta2 * v[i] + (1.0f - opts_.beta2) * gr[i] * gr[i];
                float mhat = m[i] / bc1;
                float vhat = v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
        }
    }
}

float LrSchedule::multiplier(std::int64_t step) const {
    if (warmup_steps > 0 && step < warmup_steps) {
        float frac = static_cast<float>(step) / static_cast<float>(warmup_steps);
        return warmup_start_factor + (1.0f - warmup_start_factor) * frac;
    }
    if (total_steps <= warmup_steps) return 1.0f;
    float progress =
        static_cast<float>(step - warmup_steps) / static_cast<float>(total_steps - warmup_steps);
    if (progress >= 1.0f) return 0.0f;
    return std::pow(1.0f - progress, power);
}

}  // namespace tadp::nn
