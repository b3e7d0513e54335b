#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "oscqat/autodiff.hpp"
#include "oscqat/optim.hpp"
#include "oscqat/quantizer.hpp"
#include "oscqat/tensor.hpp"

namespace oscqat {

// Per-weight oscillation state. An oscillation event at step t requires an
// integer change whose direction opposes the direction of the previous
// change; the first-ever change counts as an event (sign(0) differs from
// any nonzero sign).
struct OscillationTracker {
    Tensor f;           // frequency EMA, in [0,1]
    Tensor delta_tau;   // sign of last integer change: -1/0/+1
    Tensor w_int_prev;  // integer values at the previous step
    Tensor w_ema_int;   // EMA of integer values
    Tensor frozen;      // 0/1 mask, monotone under freeze_step
    Tensor frozen_int;  // integer value where frozen
    double m = 0.01;    // EMA momentum for both f and w_ema_int

    static OscillationTracker init(const Tensor& w_int0, double m);

    // Records one step; returns the oscillation-event mask o. Does not
    // touch w_ema_int (see update_value_ema / freeze_step).
    Tensor track_step(const Tensor& w_int_new);

    // w_ema_int <- m*w_int + (1-m)*w_ema_int. Called once per step, after
    // any freeze decisions.
    void update_value_ema(const Tensor& w_int);

    double frozen_fraction() const;
};

struct DampenConfig {
    CosineSchedule lambda;  // lambda >= 0 over the whole run
};

struct FreezeConfig {
    CosineSchedule f_th;  // threshold in (0,1) over the whole run
    double m = 0.01;
};

// Dampening regularizer: loss = lambda*sum((w_hat - clip(w, s*n, s*p))^2)
// with the bin centres w_hat treated as constants. Returns (loss, dL/dw).
std::pair<double, Tensor> dampen_loss(const Tensor& w, const QuantizerState& q, double lambda);

// Tape node adding the dampening penalty; produces a scalar. No gradient
// flows to the scale.
Value dampen_penalty(Value w, Value scale, const QuantizerState& q, double lambda);

// Freezes every not-yet-frozen weight whose f exceeds f_th to
// round(w_ema_int), then advances the integer-value EMA with w_int_current.
// Call after track_step for the same iteration.
void freeze_step(OscillationTracker& tracker, double f_th, const Tensor& w_int_current);

// Fraction of weights with f > f_min that are not frozen.
double oscillating_fraction(const OscillationTracker& tracker, double f_min);

// For each oscillating weight (f > f_min, not frozen), samples between the
// integer levels bracketing w_ema_int with probability equal to the
// fractional part. Other weights keep their current integer value.
Tensor sample_oscillating(const OscillationTracker& tracker, const Tensor& w_int_current,
                          const QuantizerState& q, double f_min, std::uint64_t seed);

// One binary decision per oscillating weight.
struct BinaryChoice {
    std::size_t index;  // position in the flattened weight tensor
    double down;        // lower integer level
    double up;          // upper integer level
};

// Simulated annealing over binary assignments (0 = down, 1 = up) with
// single-flip proposals, acceptance min(1, exp(-dLoss/T)) and geometric
// temperature decay. Returns the best assignment seen; its loss never
// exceeds the loss of the initial assignment. t0 == 0 gives a greedy
// hill-climb, t0 < 0 self-calibrates from single-flip loss deltas.
std::vector<int> anneal_binary(const std::vector<BinaryChoice>& choices,
                               const std::function<double(const std::vector<int>&)>& loss_fn,
                               std::size_t budget, std::uint64_t seed, double t0 = -1.0,
                               const std::vector<int>* init = nullptr);

}  // namespace oscqat
