#include "oscqat/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace oscqat {

SgdState::SgdState(double lr_, double momentum_) : lr(lr_), momentum(momentum_) {
    if (lr <= 0.0) throw std::invalid_argument("SgdState: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("SgdState: momentum must be in [0,1)");
}

void sgd_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              SgdState& state, const std::vector<const Tensor*>* frozen,
              const std::vector<std::string>* names) {
    if (params.size() != grads.size())
        throw std::invalid_argument("sgd_step: params/grads count mismatch");
    if (state.velocity.size() < params.size()) state.velocity.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *params[p];
        const Tensor& g = *grads[p];
        check_same_shape(w, g, "sgd_step");
        if (!g.all_finite()) {
            std::string name = names && p < names->size() ? (*names)[p]
                                                          : "parameter " + std::to_string(p);
            throw std::runtime_error("sgd_step: non-finite gradient for " + name);
        }
        Tensor& v = state.velocity[p];
        if (v.size() != w.size()) v = Tensor::zeros(w.shape);
        const Tensor* mask = frozen && p < frozen->size() ? (*frozen)[p] : nullptr;
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = state.momentum * v[i] + g[i];
            if (mask && (*mask)[i] != 0.0) continue;
            w[i] -= state.lr * v[i];
        }
    }
}

void sgd_step(Tensor& param, const Tensor& grad, SgdState& state) {
    std::vector<Tensor*> params{&param};
    std::vector<const Tensor*> grads{&grad};
    sgd_step(params, grads, state);
}

CosineSchedule::CosineSchedule(double start_, double end_, std::size_t total_steps_)
    : start(start_), end(end_), total_steps(total_steps_) {
    if (total_steps == 0) throw std::invalid_argument("CosineSchedule: total_steps must be > 0");
}

double CosineSchedule::value(std::size_t step) const {
    if (step >= total_steps) return end;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return start + 0.5 * (end - start) * (1.0 - std::cos(std::numbers::pi * t));
}

}  // namespace oscqat
