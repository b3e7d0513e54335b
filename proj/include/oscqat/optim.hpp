#pragma once

#include <string>
#include <vector>

#include "oscqat/tensor.hpp"

namespace oscqat {

// SGD with momentum: v <- momentum*v + g; w <- w - lr*v.
// With momentum 0 this is plain gradient descent.
struct SgdState {
    double lr = 0.01;
    double momentum = 0.0;
    std::vector<Tensor> velocity;  // one buffer per parameter, lazily sized

    SgdState() = default;
    SgdState(double lr_, double momentum_);
};

// Updates params[i] in place from grads[i]. `frozen` is an optional per-
// parameter mask (same size as the parameter, nonzero = skip update);
// pass nullptr entries for unmasked parameters.
void sgd_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              SgdState& state, const std::vector<const Tensor*>* frozen = nullptr,
              const std::vector<std::string>* names = nullptr);

// Single-tensor convenience wrapper.
void sgd_step(Tensor& param, const Tensor& grad, SgdState& state);

struct CosineSchedule {
    double start = 0.0;
    double end = 0.0;
    std::size_t total_steps = 1;

    CosineSchedule() = default;
    CosineSchedule(double start_, double end_, std::size_t total_steps_);

    // start + 0.5*(end-start)*(1 - cos(pi*step/total)). Steps outside
    // [0, total_steps] clamp to the endpoint value.
    double value(std::size_t step) const;
};

}  // namespace oscqat
