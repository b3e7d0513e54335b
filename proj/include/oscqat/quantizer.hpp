#pragma once

#include <cstdint>

#include "oscqat/autodiff.hpp"
#include "oscqat/tensor.hpp"

namespace oscqat {

// Backward rule applied to the in-range STE gradient. All variants are
// multiplicative scalings and keep the gradient sign.
struct EstimatorKind {
    enum Kind { STE, EWGS, PSG, DSQ } kind = STE;
    double delta = 0.2;    // EWGS
    double epsilon = 1e-3; // PSG
    double temperature = 4.0; // DSQ

    static EstimatorKind ste() { return {STE}; }
    static EstimatorKind ewgs(double delta);
    static EstimatorKind psg(double epsilon);
    static EstimatorKind dsq(double temperature);
    const char* name() const;
};

// Per-tensor uniform quantizer: w_hat = s * clip(round(w/s), n, p).
struct QuantizerState {
    double scale = 1.0;
    long n = 0;  // lower integer threshold
    long p = 0;  // upper integer threshold
    int bits = 8;
    bool is_signed = true;
    bool scale_trainable = true;
    EstimatorKind estimator;

    // Symmetric signed grid: n = -2^(b-1), p = 2^(b-1)-1.
    static QuantizerState signed_symmetric(int bits, double scale = 1.0);
    // Unsigned grid: n = 0, p = 2^b - 1.
    static QuantizerState unsigned_range(int bits, double scale = 1.0);
};

// Round-to-nearest with ties to even, independent of the FP environment.
double round_half_even(double x);

// w_hat = s*w_int with w_int = clip(round(w/s), n, p). Throws on non-finite
// input. w_int_out, when given, receives the integer grid values.
Tensor quantize_forward(const Tensor& w, const QuantizerState& q, Tensor* w_int_out = nullptr);

// Eq-style STE: pass g_out through where n <= w/s <= p, zero outside.
Tensor ste_backward(const Tensor& g_out, const Tensor& w, const QuantizerState& q);

// STE with the estimator's multiplicative in-range scaling applied.
// Rejects configurations whose multiplier could become non-positive.
Tensor estimator_backward(const Tensor& g_out, const Tensor& w, const Tensor& w_hat,
                          const QuantizerState& q);

// Multiplier for a single in-range element (exposed for the toy lab).
double estimator_multiplier(double g, double w, double w_hat, const QuantizerState& q);

// LSQ-style scale gradient: sum of g_out * d(w_hat)/d(s), normalized by
// 1/sqrt(numel * p).
double lsq_scale_gradient(const Tensor& g_out, const Tensor& w, const QuantizerState& q);

// Grid search over 100 candidate scales in max|w|/p * [0.1, 1.2] minimizing
// the quantization MSE. All-zero tensors fall back to s = 1.
double mse_range_init(const Tensor& w, const QuantizerState& q);

// Tape node performing simulated quantization. `scale` is a 1-element
// trainable tensor; its current value overrides q.scale. Elements where
// frozen_mask is nonzero take the value scale*frozen_int and receive no
// weight gradient. Scale gradients are produced only if q.scale_trainable.
Value fake_quantize(Value w, Value scale, const QuantizerState& q,
                    const Tensor* frozen_mask = nullptr, const Tensor* frozen_int = nullptr);

}  // namespace oscqat
