#include "oscqat/normstats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace oscqat {

NormStats NormStats::init(std::size_t channels, double momentum) {
    if (momentum <= 0.0 || momentum >= 1.0)
        throw std::invalid_argument("NormStats: momentum must be in (0,1)");
    NormStats s;
    s.running_mean = Tensor::zeros({channels});
    s.running_var = Tensor::full({channels}, 1.0);
    s.gamma = Tensor::full({channels}, 1.0);
    s.beta = Tensor::zeros({channels});
    s.momentum = momentum;
    return s;
}

namespace {

struct BnDims {
    std::size_t N, C, HW;
};

BnDims bn_dims(const Tensor& x, std::size_t channels) {
    if (x.rank() == 2) {
        if (x.shape[1] != channels)
            throw std::invalid_argument("batchnorm: channel mismatch " + shape_str(x.shape));
        return {x.shape[0], channels, 1};
    }
    if (x.rank() == 4) {
        if (x.shape[1] != channels)
            throw std::invalid_argument("batchnorm: channel mismatch " + shape_str(x.shape));
        return {x.shape[0], channels, x.shape[2] * x.shape[3]};
    }
    throw std::invalid_argument("batchnorm: expected rank 2 or 4, got " + shape_str(x.shape));
}

inline double& elem(Tensor& x, const BnDims& d, std::size_t n, std::size_t c, std::size_t s) {
    return x.data[(n * d.C + c) * d.HW + s];
}
inline double elem(const Tensor& x, const BnDims& d, std::size_t n, std::size_t c, std::size_t s) {
    return x.data[(n * d.C + c) * d.HW + s];
}

}  // namespace

Value batchnorm_train(Value x, Value gamma, Value beta, NormStats& stats, bool update_running) {
    const Tensor& xv = x.val();
    const BnDims d = bn_dims(xv, stats.running_mean.size());
    if (xv.shape[0] < 2)
        throw std::invalid_argument("batchnorm_train: batch size must be >= 2");
    const double m = static_cast<double>(d.N * d.HW);

    Tensor mean = Tensor::zeros({d.C});
    Tensor var = Tensor::zeros({d.C});
    for (std::size_t c = 0; c < d.C; ++c) {
        double s = 0.0;
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t sp = 0; sp < d.HW; ++sp) s += elem(xv, d, n, c, sp);
        mean[c] = s / m;
        double v = 0.0;
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t sp = 0; sp < d.HW; ++sp) {
                const double dd = elem(xv, d, n, c, sp) - mean[c];
                v += dd * dd;
            }
        var[c] = v / m;  // biased, used for normalization
    }

    if (update_running) {
        for (std::size_t c = 0; c < d.C; ++c) {
            const double unbiased = var[c] * m / (m - 1.0);
            stats.running_mean[c] =
                (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * mean[c];
            stats.running_var[c] = std::max(
                (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased,
                kVarianceFloor);
        }
    }

    Tensor denom = Tensor::zeros({d.C});
    for (std::size_t c = 0; c < d.C; ++c) denom[c] = std::sqrt(std::max(var[c], kVarianceFloor));

    const Tensor& gv = gamma.val();
    const Tensor& bv = beta.val();
    Tensor xhat = xv;  // reused in backward
    Tensor out = xv;
    for (std::size_t c = 0; c < d.C; ++c)
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t sp = 0; sp < d.HW; ++sp) {
                const double h = (elem(xv, d, n, c, sp) - mean[c]) / denom[c];
                elem(xhat, d, n, c, sp) = h;
                elem(out, d, n, c, sp) = gv[c] * h + bv[c];
            }

    return x.tape->make_node(
        {x, gamma, beta}, std::move(out),
        [d, xhat, denom, m](Tape& tp, const Tape::Node& nd) {
            const Tensor& gv2 = tp.node(nd.inputs[1]).value;
            Tensor& gx = tp.grad_buf(nd.inputs[0]);
            Tensor& gg = tp.grad_buf(nd.inputs[1]);
            Tensor& gb = tp.grad_buf(nd.inputs[2]);
            for (std::size_t c = 0; c < d.C; ++c) {
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::size_t n = 0; n < d.N; ++n)
                    for (std::size_t sp = 0; sp < d.HW; ++sp) {
                        const double g = elem(nd.grad, d, n, c, sp);
                        sum_g += g;
                        sum_gh += g * elem(xhat, d, n, c, sp);
                    }
                gb[c] += sum_g;
                gg[c] += sum_gh;
                const double mean_g = sum_g / m, mean_gh = sum_gh / m;
                const double k = gv2[c] / denom[c];
                for (std::size_t n = 0; n < d.N; ++n)
                    for (std::size_t sp = 0; sp < d.HW; ++sp) {
                        const double g = elem(nd.grad, d, n, c, sp);
                        elem(gx, d, n, c, sp) +=
                            k * (g - mean_g - elem(xhat, d, n, c, sp) * mean_gh);
                    }
            }
        });
}

Value batchnorm_eval(Value x, Value gamma, Value beta, const NormStats& stats) {
    const Tensor& xv = x.val();
    const BnDims d = bn_dims(xv, stats.running_mean.size());
    const Tensor& gv = gamma.val();
    const Tensor& bv = beta.val();
    Tensor denom = Tensor::zeros({d.C});
    for (std::size_t c = 0; c < d.C; ++c)
        denom[c] = std::sqrt(std::max(stats.running_var[c], kVarianceFloor));
    Tensor out = xv;
    const Tensor mean = stats.running_mean;
    for (std::size_t c = 0; c < d.C; ++c)
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t sp = 0; sp < d.HW; ++sp)
                elem(out, d, n, c, sp) =
                    gv[c] * (elem(xv, d, n, c, sp) - mean[c]) / denom[c] + bv[c];
    return x.tape->make_node({x, gamma, beta}, std::move(out),
                             [d, mean, denom](Tape& tp, const Tape::Node& nd) {
                                 const Tensor& gv2 = tp.node(nd.inputs[1]).value;
                                 const Tensor& xv2 = tp.node(nd.inputs[0]).value;
                                 Tensor& gx = tp.grad_buf(nd.inputs[0]);
                                 Tensor& gg = tp.grad_buf(nd.inputs[1]);
                                 Tensor& gb = tp.grad_buf(nd.inputs[2]);
                                 for (std::size_t c = 0; c < d.C; ++c)
                                     for (std::size_t n = 0; n < d.N; ++n)
                                         for (std::size_t sp = 0; sp < d.HW; ++sp) {
                                             const double g = elem(nd.grad, d, n, c, sp);
                                             gx.data[(n * d.C + c) * d.HW + sp] +=
                                                 g * gv2[c] / denom[c];
                                             gg[c] += g * (elem(xv2, d, n, c, sp) - mean[c]) /
                                                      denom[c];
                                             gb[c] += g;
                                         }
                             });
}

ChannelStatsAccumulator ChannelStatsAccumulator::init(std::size_t channels) {
    ChannelStatsAccumulator a;
    a.sum = Tensor::zeros({channels});
    a.sumsq = Tensor::zeros({channels});
    return a;
}

void ChannelStatsAccumulator::add(const Tensor& x) {
    const BnDims d = bn_dims(x, sum.size());
    for (std::size_t c = 0; c < d.C; ++c)
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t sp = 0; sp < d.HW; ++sp) {
                const double v = elem(x, d, n, c, sp);
                sum[c] += v;
                sumsq[c] += v * v;
            }
    count += static_cast<double>(d.N * d.HW);
}

std::pair<Tensor, Tensor> ChannelStatsAccumulator::finalize() const {
    if (count <= 0.0) throw std::runtime_error("ChannelStatsAccumulator: no data accumulated");
    Tensor mean = Tensor::zeros(sum.shape);
    Tensor var = Tensor::zeros(sum.shape);
    for (std::size_t c = 0; c < sum.size(); ++c) {
        mean[c] = sum[c] / count;
        var[c] = std::max(sumsq[c] / count - mean[c] * mean[c], kVarianceFloor);
    }
    return {std::move(mean), std::move(var)};
}

double kl_drift(double mu1, double var1, double mu2, double var2) {
    if (var1 <= 0.0 || var2 <= 0.0)
        throw std::invalid_argument("kl_drift: variances must be positive");
    const double dm = mu1 - mu2;
    return std::log(var2 / var1) + (var1 + dm * dm) / (2.0 * var2) - 0.5;
}

std::pair<double, double> kl_drift_summary(const Tensor& mu1, const Tensor& var1,
                                           const Tensor& mu2, const Tensor& var2) {
    check_same_shape(mu1, mu2, "kl_drift_summary");
    double mx = 0.0, mn = 0.0;
    for (std::size_t c = 0; c < mu1.size(); ++c) {
        const double kl = kl_drift(mu1[c], var1[c], mu2[c], var2[c]);
        mx = std::max(mx, kl);
        mn += kl;
    }
    return {mx, mu1.size() ? mn / static_cast<double>(mu1.size()) : 0.0};
}

}  // namespace oscqat
