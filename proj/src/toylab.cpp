#include "oscqat/toylab.hpp"

#include <cmath>
#include <stdexcept>

namespace oscqat {

QuantizerState ToyProblem::quantizer() const {
    QuantizerState q;
    q.scale = scale;
    q.n = n;
    q.p = p;
    q.bits = 0;  // explicit grid, not derived from a bit-width
    q.scale_trainable = false;
    q.estimator = estimator;
    return q;
}

void ToyProblem::validate() const {
    if (scale <= 0.0) throw std::invalid_argument("ToyProblem: scale must be positive");
    if (sigma2 <= 0.0) throw std::invalid_argument("ToyProblem: sigma2 must be positive");
    if (n >= p) throw std::invalid_argument("ToyProblem: need n < p");
    if (eta <= 0.0) throw std::invalid_argument("ToyProblem: eta must be positive");
    if (iterations == 0) throw std::invalid_argument("ToyProblem: iterations must be positive");
    if (lambda < 0.0) throw std::invalid_argument("ToyProblem: lambda must be >= 0");
    const double lo = scale * static_cast<double>(n), hi = scale * static_cast<double>(p);
    if (w_star <= lo || w_star >= hi)
        throw std::invalid_argument("ToyProblem: w_star must lie strictly inside the grid range");
}

ToyLevels toy_levels(const ToyProblem& prob) {
    const QuantizerState q = prob.quantizer();
    ToyLevels lv;
    lv.w_up = quantize_forward(Tensor::scalar(prob.w_star + prob.scale / 2.0), q)[0];
    lv.w_down = quantize_forward(Tensor::scalar(prob.w_star - prob.scale / 2.0), q)[0];
    lv.w_bar = 0.5 * (lv.w_up + lv.w_down);
    return lv;
}

double toy_gradient(double w, const ToyProblem& prob) {
    const QuantizerState q = prob.quantizer();
    const ToyLevels lv = toy_levels(prob);
    const double level = w >= lv.w_bar ? lv.w_up : lv.w_down;
    const double base = prob.sigma2 * (level - prob.w_star);
    const double w_hat = quantize_forward(Tensor::scalar(w), q)[0];
    double g = base * estimator_multiplier(base, w, w_hat, q);
    if (prob.lambda > 0.0) {
        const double lo = q.scale * static_cast<double>(q.n);
        const double hi = q.scale * static_cast<double>(q.p);
        if (w >= lo && w <= hi) g += prob.lambda * 2.0 * (w - w_hat);
    }
    return g;
}

ToyTrajectory simulate_trajectory(const ToyProblem& prob) {
    prob.validate();
    const QuantizerState q = prob.quantizer();
    const double span = prob.scale * static_cast<double>(prob.p - prob.n);
    const double limit = 10.0 * span + std::abs(prob.w_star);

    // The update table assumes pure rounding with no clipping, so gradients
    // flow through a grid padded far beyond the divergence guard; recorded
    // integer values still use the problem's own grid.
    QuantizerState qg = q;
    const long pad =
        static_cast<long>(std::ceil((limit + std::abs(prob.w0)) / prob.scale)) + 2;
    qg.n = q.n - pad;
    qg.p = q.p + pad;

    double w = prob.w0;
    Tensor w_int0;
    quantize_forward(Tensor::scalar(w), q, &w_int0);
    ToyTrajectory out;
    out.tracker = OscillationTracker::init(w_int0, prob.tracker_m);
    out.latent.reserve(prob.iterations);
    out.w_int.reserve(prob.iterations);

    for (std::size_t t = 0; t < prob.iterations; ++t) {
        // One reverse-mode pass: loss = 0.5*sigma2*(q(w) - w_star)^2 in
        // expectation form, plus the dampening penalty.
        Tape tape;
        Value wv = tape.leaf(Tensor::scalar(w), true);
        Value sv = tape.leaf(Tensor::scalar(prob.scale));
        Value w_hat = fake_quantize(wv, sv, qg);
        Value target = tape.leaf(Tensor::scalar(prob.w_star));
        Value loss = mul_scalar(square(sub(w_hat, target)), 0.5 * prob.sigma2);
        if (prob.lambda > 0.0)
            loss = add(loss, dampen_penalty(wv, sv, qg, prob.lambda));
        tape.backward(loss);
        w -= prob.eta * tape.grad(wv)[0];

        if (std::abs(w) > limit)
            throw std::runtime_error("simulate_trajectory: latent weight diverged at step " +
                                     std::to_string(t));
        Tensor wi;
        quantize_forward(Tensor::scalar(w), q, &wi);
        out.tracker.track_step(wi);
        out.tracker.update_value_ema(wi);
        out.latent.push_back(w);
        out.w_int.push_back(static_cast<long>(wi[0]));
    }
    return out;
}

double closed_form_update(double w, const ToyProblem& prob) {
    prob.validate();
    if (prob.sigma2 != 1.0)
        throw std::invalid_argument("closed_form_update: table assumes sigma = 1");
    const ToyLevels lv = toy_levels(prob);
    if (w <= lv.w_down || w >= lv.w_up)
        throw std::invalid_argument("closed_form_update: w must lie strictly between the levels");
    const bool above = w >= lv.w_bar;
    const double level = above ? lv.w_up : lv.w_down;
    const double base = level - prob.w_star;
    const double eta = prob.eta;
    switch (prob.estimator.kind) {
        case EstimatorKind::STE:
            if (prob.lambda > 0.0)  // dampening row
                return w - eta * (base + 2.0 * prob.lambda * (w - level));
            return w - eta * base;
        case EstimatorKind::PSG: {
            const double dist = above ? lv.w_up - w : w - lv.w_down;
            return w - eta * base * (dist + prob.estimator.epsilon);
        }
        case EstimatorKind::EWGS: {
            const double mult = above ? 1.0 + prob.estimator.delta * (w - lv.w_up)
                                      : 1.0 - prob.estimator.delta * (w - lv.w_down);
            return w - eta * base * mult;
        }
        case EstimatorKind::DSQ:
            throw std::invalid_argument("closed_form_update: no table row for DSQ");
    }
    return w;
}

double measure_frequency(const std::vector<long>& w_int, std::size_t burn_in) {
    if (w_int.size() <= burn_in + 1)
        throw std::invalid_argument("measure_frequency: trajectory shorter than burn-in");
    std::size_t changes = 0;
    for (std::size_t t = burn_in + 1; t < w_int.size(); ++t)
        if (w_int[t] != w_int[t - 1]) ++changes;
    const double window = static_cast<double>(w_int.size() - burn_in - 1);
    return static_cast<double>(changes) / (2.0 * window);
}

AmplitudeResult measure_amplitude(const std::vector<double>& latent,
                                  const std::vector<long>& w_int, std::size_t burn_in) {
    if (latent.size() != w_int.size() || latent.size() <= burn_in + 1)
        throw std::invalid_argument("measure_amplitude: trajectory shorter than burn-in");
    AmplitudeResult r;
    for (std::size_t t = burn_in + 1; t < w_int.size(); ++t)
        if (w_int[t] != w_int[t - 1]) {
            r.oscillating = true;
            break;
        }
    if (!r.oscillating) return r;
    double lo = latent[burn_in], hi = latent[burn_in];
    for (std::size_t t = burn_in; t < latent.size(); ++t) {
        lo = std::min(lo, latent[t]);
        hi = std::max(hi, latent[t]);
    }
    r.amplitude = hi - lo;
    return r;
}

}  // namespace oscqat
