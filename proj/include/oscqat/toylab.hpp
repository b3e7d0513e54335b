#pragma once

#include <vector>

#include "oscqat/oscillation.hpp"
#include "oscqat/quantizer.hpp"

namespace oscqat {

// 1D least-squares regression against an optimal weight w_star, optimized
// through the quantizer in expectation form (the data only enters through
// its second moment sigma2).
struct ToyProblem {
    double w_star = 0.8;
    double scale = 1.0;
    double sigma2 = 1.0;
    long n = 0;  // grid bounds, integer domain
    long p = 1;
    EstimatorKind estimator;
    double lambda = 0.0;  // dampening strength, 0 = off
    double eta = 0.2;
    double w0 = 1.3;
    std::size_t iterations = 4000;
    double tracker_m = 0.01;

    QuantizerState quantizer() const;
    void validate() const;
};

// Grid levels bracketing w_star and the decision threshold between them.
struct ToyLevels {
    double w_up;    // q(w_star + s/2)
    double w_down;  // q(w_star - s/2)
    double w_bar;   // (w_up + w_down)/2
};
ToyLevels toy_levels(const ToyProblem& prob);

// d(loss)/d(latent w): the branch gradient sigma2*(level - w_star) composed
// with the estimator's multiplier, plus the dampening term when lambda > 0.
double toy_gradient(double w, const ToyProblem& prob);

struct ToyTrajectory {
    std::vector<double> latent;  // latent weight after each step
    std::vector<long> w_int;     // integer value after each step
    OscillationTracker tracker;
};

// Runs `iterations` plain-GD steps, each backed by one reverse-mode pass
// through the quantizer node. Throws when |w| exceeds 10x the grid span.
ToyTrajectory simulate_trajectory(const ToyProblem& prob);

// One GD step per the closed-form per-method update table (sigma = 1, no
// clipping; requires w strictly between the two levels).
double closed_form_update(double w, const ToyProblem& prob);

// Oscillation cycles per iteration after the burn-in: a full cycle is one
// up change plus one down change, so this counts integer changes divided
// by twice the window length.
double measure_frequency(const std::vector<long>& w_int, std::size_t burn_in);

struct AmplitudeResult {
    double amplitude = 0.0;  // peak-to-peak over the post-burn-in window
    bool oscillating = false;
};
AmplitudeResult measure_amplitude(const std::vector<double>& latent,
                                  const std::vector<long>& w_int, std::size_t burn_in);

}  // namespace oscqat
