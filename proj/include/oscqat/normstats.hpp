#pragma once

#include <utility>

#include "oscqat/autodiff.hpp"
#include "oscqat/tensor.hpp"

namespace oscqat {

inline constexpr double kVarianceFloor = 1e-12;

// Per-channel batch-norm state. Running statistics follow
//   mu <- (1-momentum)*mu + momentum*mu_batch
// with the unbiased batch variance; variances are floored at kVarianceFloor.
struct NormStats {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    Tensor gamma;         // [C], trainable
    Tensor beta;          // [C], trainable
    double momentum = 0.1;

    static NormStats init(std::size_t channels, double momentum = 0.1);
};

// Training-mode batch norm over [N,C] or [N,C,H,W]: normalizes with the
// current batch statistics. Updates the running stats when update_running
// is set. Batches of size 1 are rejected.
Value batchnorm_train(Value x, Value gamma, Value beta, NormStats& stats,
                      bool update_running = true);

// Inference-mode batch norm using the running statistics.
Value batchnorm_eval(Value x, Value gamma, Value beta, const NormStats& stats);

// Exact per-channel aggregation over any number of batches; finalizes to
// population mean/variance. Used for BN re-estimation and KL diagnostics.
struct ChannelStatsAccumulator {
    Tensor sum;    // [C]
    Tensor sumsq;  // [C]
    double count = 0.0;  // elements per channel

    static ChannelStatsAccumulator init(std::size_t channels);
    void add(const Tensor& x);  // [N,C] or [N,C,H,W]
    // Returns (mean, variance) per channel, variance floored.
    std::pair<Tensor, Tensor> finalize() const;
};

// KL divergence between N(mu1, var1) and N(mu2, var2):
//   log(var2/var1) + (var1 + (mu1-mu2)^2)/(2*var2) - 1/2.
// Throws on non-positive variance.
double kl_drift(double mu1, double var1, double mu2, double var2);

// Per-channel KL drift reduced to (max, mean) across channels.
std::pair<double, double> kl_drift_summary(const Tensor& mu1, const Tensor& var1,
                                           const Tensor& mu2, const Tensor& var2);

}  // namespace oscqat
