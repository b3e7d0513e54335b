#include "oscqat/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace oscqat {

EstimatorKind EstimatorKind::ewgs(double delta) {
    if (delta < 0.0) throw std::invalid_argument("EWGS: delta must be >= 0");
    EstimatorKind e{EWGS};
    e.delta = delta;
    return e;
}

EstimatorKind EstimatorKind::psg(double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("PSG: epsilon must be > 0");
    EstimatorKind e{PSG};
    e.epsilon = epsilon;
    return e;
}

EstimatorKind EstimatorKind::dsq(double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("DSQ: temperature must be > 0");
    EstimatorKind e{DSQ};
    e.temperature = temperature;
    return e;
}

const char* EstimatorKind::name() const {
    switch (kind) {
        case STE: return "ste";
        case EWGS: return "ewgs";
        case PSG: return "psg";
        case DSQ: return "dsq";
    }
    return "?";
}

QuantizerState QuantizerState::signed_symmetric(int bits, double scale) {
    if (bits < 2) throw std::invalid_argument("QuantizerState: bit-width must be >= 2");
    if (scale <= 0.0) throw std::invalid_argument("QuantizerState: scale must be positive");
    QuantizerState q;
    q.bits = bits;
    q.is_signed = true;
    q.n = -(1L << (bits - 1));
    q.p = (1L << (bits - 1)) - 1;
    q.scale = scale;
    return q;
}

QuantizerState QuantizerState::unsigned_range(int bits, double scale) {
    if (bits < 2) throw std::invalid_argument("QuantizerState: bit-width must be >= 2");
    if (scale <= 0.0) throw std::invalid_argument("QuantizerState: scale must be positive");
    QuantizerState q;
    q.bits = bits;
    q.is_signed = false;
    q.n = 0;
    q.p = (1L << bits) - 1;
    q.scale = scale;
    return q;
}

double round_half_even(double x) {
    const double f = std::floor(x);
    const double d = x - f;
    if (d < 0.5) return f;
    if (d > 0.5) return f + 1.0;
    return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

Tensor quantize_forward(const Tensor& w, const QuantizerState& q, Tensor* w_int_out) {
    if (q.scale <= 0.0) throw std::invalid_argument("quantize_forward: scale must be positive");
    if (!w.all_finite()) throw std::runtime_error("quantize_forward: non-finite input");
    Tensor out = w;
    Tensor wi;
    if (w_int_out) wi = Tensor::zeros(w.shape);
    const double nd = static_cast<double>(q.n), pd = static_cast<double>(q.p);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double k = std::clamp(round_half_even(w[i] / q.scale), nd, pd);
        out[i] = q.scale * k;
        if (w_int_out) wi[i] = k;
    }
    if (w_int_out) *w_int_out = std::move(wi);
    return out;
}

namespace {

inline bool in_range(double w, const QuantizerState& q) {
    const double r = w / q.scale;
    return r >= static_cast<double>(q.n) && r <= static_cast<double>(q.p);
}

}  // namespace

Tensor ste_backward(const Tensor& g_out, const Tensor& w, const QuantizerState& q) {
    check_same_shape(g_out, w, "ste_backward");
    Tensor g = g_out;
    for (std::size_t i = 0; i < w.size(); ++i)
        if (!in_range(w[i], q)) g[i] = 0.0;
    return g;
}

double estimator_multiplier(double g, double w, double w_hat, const QuantizerState& q) {
    switch (q.estimator.kind) {
        case EstimatorKind::STE:
            return 1.0;
        case EstimatorKind::EWGS: {
            // |w - w_hat| <= s/2 in range, so positivity needs delta*s/2 < 1.
            if (q.estimator.delta * q.scale * 0.5 >= 1.0)
                throw std::invalid_argument(
                    "EWGS: delta too large, gradient multiplier would become non-positive");
            const double sgn = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
            return 1.0 + q.estimator.delta * sgn * (w - w_hat);
        }
        case EstimatorKind::PSG:
            return std::abs(w - w_hat) + q.estimator.epsilon;
        case EstimatorKind::DSQ: {
            // Edge-amplifying tanh-derivative shape, normalized to unit mean
            // over the bin: smallest at the bin centre, largest at the edge.
            const double k = q.estimator.temperature;
            const double u = w / q.scale - round_half_even(w / q.scale);
            const double th = std::tanh(k * (std::abs(u) - 0.5));
            return k / (2.0 * std::tanh(k * 0.5)) * (1.0 - th * th);
        }
    }
    return 1.0;
}

Tensor estimator_backward(const Tensor& g_out, const Tensor& w, const Tensor& w_hat,
                          const QuantizerState& q) {
    check_same_shape(g_out, w, "estimator_backward");
    check_same_shape(w, w_hat, "estimator_backward");
    Tensor g = Tensor::zeros(w.shape);
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!in_range(w[i], q)) continue;
        g[i] = g_out[i] * estimator_multiplier(g_out[i], w[i], w_hat[i], q);
    }
    return g;
}

double lsq_scale_gradient(const Tensor& g_out, const Tensor& w, const QuantizerState& q) {
    check_same_shape(g_out, w, "lsq_scale_gradient");
    const double nd = static_cast<double>(q.n), pd = static_cast<double>(q.p);
    double gs = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double r = w[i] / q.scale;
        double dds;
        if (r < nd)
            dds = nd;
        else if (r > pd)
            dds = pd;
        else
            dds = std::clamp(round_half_even(r), nd, pd) - r;
        gs += g_out[i] * dds;
    }
    const double norm = 1.0 / std::sqrt(static_cast<double>(w.size()) * std::abs(pd));
    return gs * norm;
}

double mse_range_init(const Tensor& w, const QuantizerState& q) {
    if (w.size() == 0) throw std::invalid_argument("mse_range_init: empty tensor");
    double maxabs = 0.0;
    for (double x : w.data) maxabs = std::max(maxabs, std::abs(x));
    if (maxabs == 0.0) return 1.0;
    const double base = maxabs / static_cast<double>(q.p);
    double best_s = base, best_mse = std::numeric_limits<double>::infinity();
    QuantizerState cand = q;
    for (int i = 0; i < 100; ++i) {
        const double factor = 0.1 + (1.2 - 0.1) * static_cast<double>(i) / 99.0;
        cand.scale = base * factor;
        Tensor wq = quantize_forward(w, cand);
        double mse = 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double d = w[j] - wq[j];
            mse += d * d;
        }
        if (mse < best_mse) {
            best_mse = mse;
            best_s = cand.scale;
        }
    }
    return best_s;
}

Value fake_quantize(Value w, Value scale, const QuantizerState& q, const Tensor* frozen_mask,
                    const Tensor* frozen_int) {
    if (scale.val().size() != 1)
        throw std::invalid_argument("fake_quantize: scale must be a single element");
    QuantizerState qs = q;
    qs.scale = scale.val()[0];
    Tensor w_int;
    Tensor out = quantize_forward(w.val(), qs, &w_int);
    if (frozen_mask) {
        for (std::size_t i = 0; i < out.size(); ++i)
            if ((*frozen_mask)[i] != 0.0) {
                out[i] = qs.scale * (*frozen_int)[i];
                w_int[i] = (*frozen_int)[i];
            }
    }
    Tensor frozen_mask_copy = frozen_mask ? *frozen_mask : Tensor();
    return w.tape->make_node(
        {w, scale}, std::move(out),
        [qs, w_int, frozen_mask_copy](Tape& tp, const Tape::Node& nd) {
            const Tensor& wv = tp.node(nd.inputs[0]).value;
            const Tensor& w_hat = nd.value;
            Tensor gw = estimator_backward(nd.grad, wv, w_hat, qs);
            Tensor& gwb = tp.grad_buf(nd.inputs[0]);
            const bool has_frozen = frozen_mask_copy.size() > 0;
            for (std::size_t i = 0; i < gw.size(); ++i) {
                if (has_frozen && frozen_mask_copy[i] != 0.0) continue;
                gwb[i] += gw[i];
            }
            if (qs.scale_trainable) {
                const double norm =
                    1.0 / std::sqrt(static_cast<double>(wv.size()) *
                                    std::abs(static_cast<double>(qs.p)));
                double gs = 0.0;
                const double ndd = static_cast<double>(qs.n), pdd = static_cast<double>(qs.p);
                for (std::size_t i = 0; i < wv.size(); ++i) {
                    double dds;
                    if (has_frozen && frozen_mask_copy[i] != 0.0) {
                        dds = w_int[i];  // w_hat = s * frozen_int
                    } else {
                        const double r = wv[i] / qs.scale;
                        if (r < ndd)
                            dds = ndd;
                        else if (r > pdd)
                            dds = pdd;
                        else
                            dds = w_int[i] - r;
                    }
                    gs += nd.grad[i] * dds;
                }
                tp.grad_buf(nd.inputs[1])[0] += gs * norm;
            }
        });
}

}  // namespace oscqat
