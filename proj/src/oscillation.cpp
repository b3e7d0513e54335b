#include "oscqat/oscillation.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace oscqat {

namespace {

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

OscillationTracker OscillationTracker::init(const Tensor& w_int0, double m) {
    if (m <= 0.0 || m >= 1.0)
        throw std::invalid_argument("OscillationTracker: momentum must be in (0,1)");
    OscillationTracker t;
    t.m = m;
    t.f = Tensor::zeros(w_int0.shape);
    t.delta_tau = Tensor::zeros(w_int0.shape);
    t.w_int_prev = w_int0;
    t.w_ema_int = w_int0;
    t.frozen = Tensor::zeros(w_int0.shape);
    t.frozen_int = Tensor::zeros(w_int0.shape);
    return t;
}

Tensor OscillationTracker::track_step(const Tensor& w_int_new) {
    check_same_shape(w_int_new, w_int_prev, "track_step");
    Tensor o = Tensor::zeros(w_int_new.shape);
    for (std::size_t i = 0; i < w_int_new.size(); ++i) {
        const double d = w_int_new[i] - w_int_prev[i];
        const bool event = d != 0.0 && sgn(d) != delta_tau[i];
        o[i] = event ? 1.0 : 0.0;
        f[i] = m * o[i] + (1.0 - m) * f[i];
        if (event) delta_tau[i] = sgn(d);
        w_int_prev[i] = w_int_new[i];
    }
    return o;
}

void OscillationTracker::update_value_ema(const Tensor& w_int) {
    check_same_shape(w_int, w_ema_int, "update_value_ema");
    for (std::size_t i = 0; i < w_int.size(); ++i)
        w_ema_int[i] = m * w_int[i] + (1.0 - m) * w_ema_int[i];
}

double OscillationTracker::frozen_fraction() const {
    if (frozen.size() == 0) return 0.0;
    double c = 0.0;
    for (double b : frozen.data) c += b != 0.0 ? 1.0 : 0.0;
    return c / static_cast<double>(frozen.size());
}

std::pair<double, Tensor> dampen_loss(const Tensor& w, const QuantizerState& q, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("dampen_loss: lambda must be >= 0");
    Tensor w_hat = quantize_forward(w, q);
    const double lo = q.scale * static_cast<double>(q.n);
    const double hi = q.scale * static_cast<double>(q.p);
    double loss = 0.0;
    Tensor g = Tensor::zeros(w.shape);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = w_hat[i] - std::clamp(w[i], lo, hi);
        loss += lambda * d * d;
        if (w[i] >= lo && w[i] <= hi) g[i] = lambda * 2.0 * (w[i] - w_hat[i]);
    }
    return {loss, std::move(g)};
}

Value dampen_penalty(Value w, Value scale, const QuantizerState& q, double lambda) {
    QuantizerState qs = q;
    qs.scale = scale.val()[0];
    auto [loss, grad] = dampen_loss(w.val(), qs, lambda);
    return w.tape->make_node({w, scale}, Tensor::scalar(loss),
                             [grad](Tape& tp, const Tape::Node& nd) {
                                 Tensor& gw = tp.grad_buf(nd.inputs[0]);
                                 for (std::size_t i = 0; i < grad.size(); ++i)
                                     gw[i] += nd.grad[0] * grad[i];
                             });
}

void freeze_step(OscillationTracker& tracker, double f_th, const Tensor& w_int_current) {
    check_same_shape(w_int_current, tracker.f, "freeze_step");
    for (std::size_t i = 0; i < tracker.f.size(); ++i) {
        if (tracker.frozen[i] == 0.0 && tracker.f[i] > f_th) {
            tracker.frozen[i] = 1.0;
            tracker.frozen_int[i] = round_half_even(tracker.w_ema_int[i]);
        }
    }
    tracker.update_value_ema(w_int_current);
}

double oscillating_fraction(const OscillationTracker& tracker, double f_min) {
    if (tracker.f.size() == 0) return 0.0;
    double c = 0.0;
    for (std::size_t i = 0; i < tracker.f.size(); ++i)
        if (tracker.f[i] > f_min && tracker.frozen[i] == 0.0) c += 1.0;
    return c / static_cast<double>(tracker.f.size());
}

Tensor sample_oscillating(const OscillationTracker& tracker, const Tensor& w_int_current,
                          const QuantizerState& q, double f_min, std::uint64_t seed) {
    check_same_shape(w_int_current, tracker.f, "sample_oscillating");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Tensor out = w_int_current;
    const double nd = static_cast<double>(q.n), pd = static_cast<double>(q.p);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (tracker.frozen[i] != 0.0 || tracker.f[i] <= f_min) continue;
        double lo = std::floor(tracker.w_ema_int[i]);
        lo = std::clamp(lo, nd, pd - 1.0);
        const double frac = std::clamp(tracker.w_ema_int[i] - lo, 0.0, 1.0);
        out[i] = unit(rng) < frac ? lo + 1.0 : lo;
    }
    return out;
}

std::vector<int> anneal_binary(const std::vector<BinaryChoice>& choices,
                               const std::function<double(const std::vector<int>&)>& loss_fn,
                               std::size_t budget, std::uint64_t seed, double t0,
                               const std::vector<int>* init) {
    std::vector<int> state(choices.size(), 0);
    if (init) {
        if (init->size() != choices.size())
            throw std::invalid_argument("anneal_binary: initial state size mismatch");
        state = *init;
    }
    if (choices.empty()) return state;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);

    double current = loss_fn(state);
    std::vector<int> best = state;
    double best_loss = current;

    if (t0 < 0.0) {
        // Calibrate the initial temperature from the scale of single-flip
        // loss changes.
        double acc = 0.0;
        const std::size_t probes = std::min<std::size_t>(choices.size(), 16);
        for (std::size_t i = 0; i < probes; ++i) {
            std::vector<int> probe = state;
            const std::size_t j = pick(rng);
            probe[j] ^= 1;
            acc += std::abs(loss_fn(probe) - current);
        }
        t0 = std::max(acc / static_cast<double>(probes), 1e-12);
    }
    double temp = t0;
    const double t_end = t0 > 0.0 ? t0 * 1e-3 : 0.0;
    const double decay =
        budget > 1 && t0 > 0.0
            ? std::pow(t_end / t0, 1.0 / static_cast<double>(budget - 1))
            : 1.0;

    for (std::size_t it = 0; it < budget; ++it) {
        const std::size_t j = pick(rng);
        std::vector<int> cand = state;
        cand[j] ^= 1;
        const double cand_loss = loss_fn(cand);
        const double d = cand_loss - current;
        const bool accept = d <= 0.0 || (temp > 0.0 && unit(rng) < std::exp(-d / temp));
        if (accept) {
            state = std::move(cand);
            current = cand_loss;
            if (current < best_loss) {
                best_loss = current;
                best = state;
            }
        }
        temp *= decay;
    }
    return best;
}

}  // namespace oscqat
