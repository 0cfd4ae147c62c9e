#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ncgnn/error.hpp"
#include "ncgnn/model.hpp"
#include "ncgnn/tensor.hpp"

namespace ncgnn {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// First/second moment estimates, one pair per parameter tensor, in
// ModelParams::for_each order.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamState init(const ModelParams& params) {
        AdamState s;
        params.for_each([&](const char*, const Tensor& value, const Tensor&, bool) {
            s.m.emplace_back(value.shape());
            s.v.emplace_back(value.shape());
        });
        return s;
    }
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    bool weight_decay_all = false;  // if set, biases and hop logits decay too
};

// One Adam update over all parameters, reading gradients from the grad slots.
// l2 regularization enters as the coupled gradient term 2 * wd * theta, and by
// default touches only the weight matrices. `step` is 1-based and drives the
// bias correction. Bumps the parameter version.
inline void adam_step(ModelParams& params, AdamState& state, const AdamConfig& cfg,
                      std::size_t step) {
    if (step < 1) throw ValidationError("adam_step: step must be >= 1");
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
    std::size_t slot = 0;
    params.for_each([&](const char* name, Tensor& value, Tensor& grad, bool decays) {
        if (!grad.all_finite())
            throw NumericError(std::string("adam_step: non-finite gradient in ") + name);
        Tensor& m = state.m[slot];
        Tensor& v = state.v[slot];
        const bool wd = cfg.weight_decay != 0.0 && (decays || cfg.weight_decay_all);
        for (std::size_t i = 0; i < value.numel(); ++i) {
            double g = grad[i];
            if (wd) g += 2.0 * cfg.weight_decay * value[i];
            m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g;
            v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps);
        }
        ++slot;
    });
    ++params.version;
}

}  // namespace ncgnn
