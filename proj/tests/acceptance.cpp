// Acceptance suite: prints one PASS/FAIL line per criterion with the
// measured values and tolerances, exits nonzero if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oscqat/config.hpp"
#include "oscqat/nets.hpp"
#include "oscqat/normstats.hpp"
#include "oscqat/oscillation.hpp"
#include "oscqat/toylab.hpp"
#include "oscqat/trainer.hpp"

using namespace oscqat;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what) {
    std::printf("%s - criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, what.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double now_seconds(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

// ---------------------------------------------------------------- criterion 1

bool criterion1(std::string& msg) {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::size_t checked = 0;
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> us(0.2, 2.0), ufrac(0.1, 0.9), ueta(0.01, 0.3),
        ueps(1e-3, 0.1), ulam(0.1, 1.0), u01(0.0, 1.0);
    for (int method = 0; method < 4; ++method) {
        for (int it = 0; it < 1000; ++it) {
            ToyProblem p;
            p.scale = us(rng);
            p.w_star = ufrac(rng) * p.scale;
            p.eta = ueta(rng);
            p.iterations = 1;
            switch (method) {
                case 0: p.estimator = EstimatorKind::ste(); break;
                case 1: p.estimator = EstimatorKind::psg(ueps(rng)); break;
                case 2: p.estimator = EstimatorKind::ewgs(u01(rng) * 1.8 / p.scale); break;
                case 3:
                    p.estimator = EstimatorKind::ste();
                    p.lambda = ulam(rng);
                    break;
            }
            const double bar = p.scale / 2.0;
            double w;
            do {
                w = u01(rng) * p.scale;
            } while (std::abs(w - bar) < 0.05 * p.scale || w < 0.05 * p.scale ||
                     w > 0.95 * p.scale);
            p.w0 = w;
            const double sim = simulate_trajectory(p).latent.at(0);
            const double oracle = closed_form_update(w, p);
            worst = std::max(worst, std::abs(sim - oracle));
            ++checked;
        }
    }
    const double secs = now_seconds(t0);
    msg = "closed-form oracle equivalence on " + std::to_string(checked) +
          " configs, max |diff| = " + fmt(worst) + " (tol 1e-12), runtime " + fmt(secs) +
          " s (< 5 s)";
    return worst <= 1e-12 && secs < 5.0;
}

// ---------------------------------------------------------------- criterion 2

bool criterion2(std::string& msg) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> xs, ys;
    for (int i = 1; i <= 10; ++i) {
        const double d = 0.05 * i;
        ToyProblem p;
        p.w_star = 1.0 - d;
        p.estimator = EstimatorKind::ste();
        p.eta = 0.2;
        p.iterations = 4000;
        ToyTrajectory t = simulate_trajectory(p);
        xs.push_back(d);
        ys.push_back(measure_frequency(t.w_int, 2000));
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / n;
    const double secs = now_seconds(t0);
    msg = "frequency-vs-distance fit: slope = " + fmt(slope) + " (in [0.9,1.1]), intercept = " +
          fmt(intercept) + " (in [-0.02,0.02]), runtime " + fmt(secs) + " s (< 10 s)";
    return slope >= 0.9 && slope <= 1.1 && std::abs(intercept) <= 0.02 && secs < 10.0;
}

// ---------------------------------------------------------------- criterion 3

bool criterion3(std::string& msg) {
    auto run = [](double eta) {
        ToyProblem p;
        p.w_star = 0.8;
        p.estimator = EstimatorKind::ste();
        p.eta = eta;
        p.iterations = 4000;
        ToyTrajectory t = simulate_trajectory(p);
        return std::make_pair(measure_amplitude(t.latent, t.w_int, 2000).amplitude,
                              measure_frequency(t.w_int, 2000));
    };
    const std::vector<double> etas{0.4, 0.2, 0.1, 0.05};
    std::vector<double> amps, freqs;
    for (double e : etas) {
        auto [a, f] = run(e);
        amps.push_back(a);
        freqs.push_back(f);
    }
    const double fspread =
        *std::max_element(freqs.begin(), freqs.end()) - *std::min_element(freqs.begin(),
                                                                          freqs.end());
    bool monotone = true;
    for (std::size_t i = 1; i < amps.size(); ++i) monotone = monotone && amps[i] < amps[i - 1];
    bool halving = true;
    for (std::size_t i = 1; i < amps.size(); ++i) {
        const double ratio = amps[i] / amps[i - 1];
        halving = halving && std::abs(ratio - 0.5) <= 0.05;  // halves within +-10%
    }
    msg = "lr study: frequency spread = " + fmt(fspread) +
          " (<= 0.02), amplitudes = {" + fmt(amps[0]) + ", " + fmt(amps[1]) + ", " +
          fmt(amps[2]) + ", " + fmt(amps[3]) + "} monotone and halving within +-10%";
    return fspread <= 0.02 && monotone && halving;
}

// ---------------------------------------------------------------- criterion 4

bool criterion4(std::string& msg) {
    auto final_fifth_changes = [](const std::vector<long>& w) {
        std::size_t start = w.size() * 4 / 5, c = 0;
        for (std::size_t i = start; i < w.size(); ++i)
            if (w[i] != w[i - 1]) ++c;
        return c;
    };
    std::vector<std::pair<std::string, EstimatorKind>> persist{
        {"ste", EstimatorKind::ste()},
        {"ewgs", EstimatorKind::ewgs(0.2)},
        {"dsq", EstimatorKind::dsq(4.0)},
    };
    bool ok = true;
    std::string detail;
    for (auto& [name, est] : persist) {
        ToyProblem p;
        p.w_star = 0.8;
        p.estimator = est;
        p.iterations = 4000;
        const std::size_t c = final_fifth_changes(simulate_trajectory(p).w_int);
        detail += name + "=" + std::to_string(c) + " ";
        ok = ok && c >= 1;
    }
    ToyProblem d;
    d.w_star = 0.8;
    d.estimator = EstimatorKind::ste();
    d.lambda = 1.0;  // supercritical: 2*lambda*(s-d) = 1.6 > d = 0.2
    d.iterations = 4000;
    const std::size_t dc = final_fifth_changes(simulate_trajectory(d).w_int);
    detail += "dampen=" + std::to_string(dc);
    ok = ok && dc == 0;
    msg = "integer changes in final 20% of steps: " + detail +
          " (ste/ewgs/dsq >= 1, supercritical dampening == 0)";
    return ok;
}

// ---------------------------------------------------------------- criterion 5

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& x : t.data) x = dist(rng);
    return t;
}

// Central-difference check of every trainable input of a scalar graph.
double max_fd_error(const std::vector<Tensor>& inputs,
                    const std::function<Value(Tape&, const std::vector<Value>&)>& build) {
    auto eval = [&](const std::vector<Tensor>& ins) {
        Tape tape;
        std::vector<Value> leaves;
        for (const Tensor& t : ins) leaves.push_back(tape.leaf(t, true));
        return build(tape, leaves).val()[0];
    };
    Tape tape;
    std::vector<Value> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
    Value out = build(tape, leaves);
    tape.backward(out);
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& g = leaves[k].grad();
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            std::vector<Tensor> plus = inputs, minus = inputs;
            plus[k][i] += h;
            minus[k][i] -= h;
            const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
            const double rel =
                std::abs(g[i] - fd) / std::max(1.0, std::max(std::abs(fd), std::abs(g[i])));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

bool criterion5(std::string& msg) {
    std::mt19937_64 rng(105);
    double worst = 0.0;

    // Dampening gradient on 100 random instances.
    for (int it = 0; it < 100; ++it) {
        QuantizerState q = QuantizerState::signed_symmetric(3);
        std::uniform_real_distribution<double> uscale(0.1, 0.7), ulam(0.05, 2.0);
        q.scale = uscale(rng);
        const double lambda = ulam(rng);
        Tensor w = random_tensor({6}, rng, -3.0 * q.scale, 3.0 * q.scale);
        for (double& x : w.data) {  // stay away from rounding ties
            const double u = x / q.scale - std::floor(x / q.scale);
            if (std::abs(u - 0.5) < 0.02) x += 0.05 * q.scale;
        }
        worst = std::max(worst, max_fd_error({w}, [&](Tape& tape, const std::vector<Value>& v) {
                             Value s = tape.leaf(Tensor::from({1}, {q.scale}));
                             return dampen_penalty(v[0], s, q, lambda);
                         }));
    }

    // Every layer backward on 100 random instances each.
    for (int it = 0; it < 100; ++it) {
        Tensor x = random_tensor({2, 2, 4, 4}, rng);
        Tensor cw = random_tensor({3, 2, 3, 3}, rng);
        Tensor cb = random_tensor({3}, rng);
        worst = std::max(worst, max_fd_error({x, cw, cb},
                                             [](Tape&, const std::vector<Value>& v) {
                                                 return sum(square(
                                                     conv2d(v[0], v[1], v[2], 2, 1)));
                                             }));
        Tensor dw = random_tensor({2, 3, 3}, rng);
        Tensor db = random_tensor({2}, rng);
        worst = std::max(worst, max_fd_error({x, dw, db},
                                             [](Tape&, const std::vector<Value>& v) {
                                                 return sum(square(depthwise_conv2d(
                                                     v[0], v[1], v[2], 1, 1)));
                                             }));
        Tensor lx = random_tensor({3, 5}, rng);
        Tensor lw = random_tensor({4, 5}, rng);
        Tensor lb = random_tensor({4}, rng);
        worst = std::max(worst, max_fd_error({lx, lw, lb},
                                             [](Tape&, const std::vector<Value>& v) {
                                                 return sum(square(linear(v[0], v[1], v[2])));
                                             }));
        Tensor ax = random_tensor({8}, rng, -3.0, 9.0);
        for (double& v : ax.data) {  // keep clear of the relu kinks
            if (std::abs(v) < 1e-2) v += 0.05;
            if (std::abs(v - 6.0) < 1e-2) v += 0.05;
        }
        worst = std::max(worst, max_fd_error({ax}, [](Tape&, const std::vector<Value>& v) {
                             return sum(add(relu(v[0]), relu6(v[0])));
                         }));
        Tensor bx = random_tensor({3, 2, 2, 2}, rng);
        Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
        Tensor beta = random_tensor({2}, rng);
        NormStats stats = NormStats::init(2);
        worst = std::max(worst,
                         max_fd_error({bx, gamma, beta}, [&](Tape&, const std::vector<Value>& v) {
                             return sum(square(batchnorm_train(v[0], v[1], v[2], stats, false)));
                         }));
        Tensor logits = random_tensor({3, 4}, rng, -2.0, 2.0);
        worst = std::max(worst, max_fd_error({logits}, [](Tape&, const std::vector<Value>& v) {
                             return softmax_cross_entropy(v[0], {1, 0, 3});
                         }));
        worst = std::max(worst, max_fd_error({x}, [](Tape&, const std::vector<Value>& v) {
                             return sum(square(global_avg_pool(v[0])));
                         }));
    }
    msg = "finite-difference gradient checks (dampening + all layer kernels, 100 instances "
          "each): max relative error = " +
          fmt(worst) + " (tol 1e-6)";
    return worst <= 1e-6;
}

// ---------------------------------------------------------------- criterion 6

bool criterion6(std::string& msg) {
    bool ok = true;
    std::string detail;

    // Hand trace [2,3,2] with m = 0.1: f = 0.19 after the two transitions.
    OscillationTracker t = OscillationTracker::init(Tensor::from({1}, {2.0}), 0.1);
    t.track_step(Tensor::from({1}, {3.0}));
    t.track_step(Tensor::from({1}, {2.0}));
    detail += "hand f = " + fmt(t.f[0]);
    ok = ok && std::abs(t.f[0] - 0.19) <= 1e-12;

    // Square wave: f_T = 1 - (1-m)^T exactly.
    const double m = 0.03;
    OscillationTracker sq = OscillationTracker::init(Tensor::from({1}, {0.0}), m);
    sq.track_step(Tensor::from({1}, {1.0}));  // first change already counts
    bool square_ok = std::abs(sq.f[0] - m) <= 1e-12;
    for (int T = 2; T <= 500; ++T) {
        sq.track_step(Tensor::from({1}, {T % 2 ? 1.0 : 0.0}));
        square_ok = square_ok && std::abs(sq.f[0] - (1.0 - std::pow(1.0 - m, T))) <= 1e-12;
    }
    detail += ", square-wave law exact over 500 steps: " + std::string(square_ok ? "yes" : "no");
    ok = ok && square_ok;

    // Freezing: the frozen set only grows and frozen integers never move.
    std::mt19937_64 rng(106);
    OscillationTracker fr = OscillationTracker::init(Tensor::zeros({16}), 0.1);
    std::uniform_int_distribution<int> flip(0, 1);
    std::vector<double> frozen_at(16, 0.0);
    bool monotone = true, constant = true;
    double prev_frozen = 0.0;
    for (int step = 0; step < 300; ++step) {
        Tensor w = Tensor::zeros({16});
        for (std::size_t i = 0; i < 16; ++i)
            w[i] = fr.frozen[i] != 0.0 ? fr.frozen_int[i] : static_cast<double>(flip(rng));
        fr.track_step(w);
        freeze_step(fr, 0.2, w);
        double count = 0.0;
        for (std::size_t i = 0; i < 16; ++i) {
            if (fr.frozen[i] != 0.0) {
                count += 1.0;
                if (frozen_at[i] == 0.0)
                    frozen_at[i] = fr.frozen_int[i] + 100.0;  // record first frozen value
                else
                    constant = constant && fr.frozen_int[i] + 100.0 == frozen_at[i];
            }
        }
        monotone = monotone && count >= prev_frozen;
        prev_frozen = count;
    }
    detail += ", frozen set monotone: " + std::string(monotone ? "yes" : "no") +
              ", frozen integers constant: " + std::string(constant ? "yes" : "no") +
              ", frozen count = " + fmt(prev_frozen);
    ok = ok && monotone && constant && prev_frozen > 0.0;

    msg = "tracker/freezer state machine: " + detail + " (hand value 0.19 exact)";
    return ok;
}

// ---------------------------------------------------------------- criterion 7

ExperimentConfig small_config(std::uint64_t seed);

bool criterion7(std::string& msg) {
    bool ok = true;

    const double kl1 = kl_drift(0.3, 1.7, 0.3, 1.7);
    const double kl2 = kl_drift(0.0, 1.0, 1.0, 1.0);
    const double kl3 = kl_drift(0.0, 1.0, 0.0, 4.0);
    const bool hand = kl1 == 0.0 && kl2 == 0.5 && kl3 == std::log(4.0) + 1.0 / 8.0 - 0.5;
    ok = ok && hand;

    // Re-estimation drives on-data KL to ~0 on a small trained model.
    TrainRun run(small_config(301));
    run.prepare();
    run.run(false);
    run.reestimate_bn(6);
    double max_kl = 0.0;
    for (const KlRecord& r : run.kl_report(6)) max_kl = std::max(max_kl, std::abs(r.max_kl));

    // Constructed demo: one oscillating weight feeding a BN channel.
    auto drift_for = [](double step, bool oscillate) {
        NormStats stats = NormStats::init(1);
        ChannelStatsAccumulator acc = ChannelStatsAccumulator::init(1);
        Tensor base = Tensor::zeros({64, 1});
        std::mt19937_64 brng(107);
        std::normal_distribution<double> bdist(0.0, 0.7);
        for (double& v : base.data) v = bdist(brng);
        for (int t = 0; t < 60; ++t) {
            const double level = 0.5 + (oscillate && t % 2 == 0 ? 0.0 : step);
            Tensor x = base;
            for (double& v : x.data) v *= level;
            acc.add(x);
            Tape tape;
            batchnorm_train(tape.leaf(x), tape.leaf(stats.gamma), tape.leaf(stats.beta), stats,
                            true);
        }
        auto [pm, pv] = acc.finalize();
        return kl_drift_summary(pm, pv, stats.running_mean, stats.running_var).first;
    };
    const double kl_3bit = drift_for(1.0 / 8.0, true);
    const double kl_8bit = drift_for(1.0 / 256.0, true);
    const double kl_frozen = drift_for(1.0 / 8.0, false);
    const bool demo = kl_3bit > kl_8bit && kl_3bit > kl_frozen;
    ok = ok && max_kl <= 1e-9 && demo;

    msg = "KL diagnostics: hand cases exact = " + std::string(hand ? "yes" : "no") +
          ", post-re-estimation on-data KL = " + fmt(max_kl) +
          " (<= 1e-9), oscillating demo KL(3-bit) = " + fmt(kl_3bit) + " > KL(8-bit) = " +
          fmt(kl_8bit) + " and > frozen control = " + fmt(kl_frozen);
    return ok;
}

// ---------------------------------------------------------------- criterion 8

// Desk-scale reference recipe, also used by criteria 9-10. High label noise
// and a learning-rate floor keep weights oscillating through the end of the
// run, which is what makes the BN-corruption comparison of criterion 8(a)
// visible above seed noise.
ExperimentConfig desk_config(std::uint64_t seed, int weight_bits) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.model = "toy_dwnet";
    cfg.weight_bits = weight_bits;
    cfg.act_bits = 0;
    cfg.estimator.kind = "ste";
    cfg.optimizer.lr = 0.1;
    cfg.optimizer.lr_end = 0.04;
    cfg.optimizer.momentum = 0.9;
    cfg.optimizer.pretrain_epochs = 4;
    cfg.optimizer.qat_epochs = 15;
    cfg.optimizer.batch_size = 32;
    cfg.dataset.kind = "synthetic";
    cfg.dataset.synthetic.classes = 10;
    cfg.dataset.synthetic.height = 12;
    cfg.dataset.synthetic.width = 12;
    cfg.dataset.synthetic.samples = 512;
    cfg.dataset.synthetic.noise = 0.8;
    cfg.dataset.synthetic.seed = 7;
    cfg.dataset.eval_samples = 1536;
    cfg.bn_reestimate_batches = 8;
    return cfg;
}

// Remedy-comparison recipe for criteria 8(b)/8(c): longer training at lower
// label noise so the tail of the run is near interpolation. There the residual
// per-weight task gradients are small enough that the fixed remedy schedules
// (lambda and freeze-threshold anneals) dominate the oscillation dynamics, as
// they do in long fine-tuning at full scale.
ExperimentConfig remedy_config(std::uint64_t seed) {
    ExperimentConfig cfg = desk_config(seed, 3);
    cfg.optimizer.lr_end = 0.02;
    cfg.optimizer.pretrain_epochs = 16;
    cfg.optimizer.qat_epochs = 30;
    cfg.dataset.synthetic.noise = 0.4;
    return cfg;
}

// Tiny variant for the KL and determinism criteria.
ExperimentConfig small_config(std::uint64_t seed) {
    ExperimentConfig cfg = desk_config(seed, 3);
    cfg.dataset.synthetic.classes = 4;
    cfg.dataset.synthetic.samples = 192;
    cfg.dataset.eval_samples = 192;
    cfg.optimizer.pretrain_epochs = 2;
    cfg.optimizer.qat_epochs = 4;
    return cfg;
}

struct RunOutcome {
    TrainResult result;
};

bool criterion8(std::string& msg) {
    // (a) uses the reference recipe at 3 vs 8 bits; (b)/(c) compare the two
    // remedies against a no-remedy baseline of the remedy recipe.
    enum Variant { Base3, Base8, RBase, RDamp, RFreeze, kVariants };
    const std::vector<std::uint64_t> seeds_a{1, 2, 4}, seeds_r{1, 4, 7};
    auto make = [&](Variant v, std::uint64_t seed) {
        if (v == Base3 || v == Base8) return desk_config(seed, v == Base8 ? 8 : 3);
        ExperimentConfig cfg = remedy_config(seed);
        if (v == RDamp) {
            cfg.remedy.kind = RemedyConfig::Dampen;
            cfg.remedy.lambda_start = 0.0;
            cfg.remedy.lambda_end = 1e-3;
        } else if (v == RFreeze) {
            cfg.remedy.kind = RemedyConfig::Freeze;
            cfg.remedy.fth_start = 0.04;
            cfg.remedy.fth_end = 0.01;
            cfg.remedy.momentum = 0.01;
        }
        return cfg;
    };
    std::vector<std::future<TrainResult>> futs;
    for (int v = 0; v < kVariants; ++v)
        for (std::uint64_t s : (v == Base3 || v == Base8 ? seeds_a : seeds_r))
            futs.push_back(std::async(std::launch::async, [cfg = make(Variant(v), s)]() mutable {
                TrainRun run(std::move(cfg));
                run.prepare();
                return run.run(false);
            }));
    std::vector<std::vector<TrainResult>> res(kVariants);
    std::size_t k = 0;
    for (int v = 0; v < kVariants; ++v)
        for (std::size_t i = 0; i < 3; ++i) res[v].push_back(futs[k++].get());

    auto mean_of = [](const std::vector<TrainResult>& rs, auto proj) {
        double s = 0.0;
        for (const TrainResult& r : rs) s += proj(r);
        return s / static_cast<double>(rs.size());
    };
    auto gap = [](const TrainResult& r) { return r.post_bn_acc - r.pre_bn_acc; };
    auto post = [](const TrainResult& r) { return r.post_bn_acc; };
    auto osc = [](const TrainResult& r) { return r.osc_fraction; };

    bool per_seed_gap = true;
    std::string gaps3;
    for (const TrainResult& r : res[Base3]) {
        per_seed_gap = per_seed_gap && gap(r) >= 0.0;
        gaps3 += fmt(gap(r)) + " ";
    }
    const double gap3 = mean_of(res[Base3], gap), gap8 = mean_of(res[Base8], gap);
    const double osc_base = mean_of(res[RBase], osc);
    const double osc_damp = mean_of(res[RDamp], osc);
    const double osc_freeze = mean_of(res[RFreeze], osc);
    const double post_base = mean_of(res[RBase], post);
    const double post_damp = mean_of(res[RDamp], post);
    const double post_freeze = mean_of(res[RFreeze], post);

    const bool a = per_seed_gap && gap3 > gap8;
    const bool b = osc_damp * 5.0 <= osc_base && osc_freeze * 5.0 <= osc_base;
    const bool c = post_damp >= post_base && post_freeze >= post_base;
    msg = "directional suite (3 seeds each): baseline 3-bit gaps [" + gaps3 +
          "] all >= 0, mean gap 3-bit = " + fmt(gap3) + " > 8-bit = " + fmt(gap8) +
          "; osc fraction base/dampen/freeze = " + fmt(osc_base) + "/" + fmt(osc_damp) + "/" +
          fmt(osc_freeze) + " (>= 5x reduction); post-BN base/dampen/freeze = " +
          fmt(post_base) + "/" + fmt(post_damp) + "/" + fmt(post_freeze) +
          " (remedies >= baseline)";
    return a && b && c;
}

// ---------------------------------------------------------------- criterion 9

bool criterion9(std::string& msg) {
    // Baseline 3-bit checkpoint with tracker state.
    TrainRun run(desk_config(1, 3));
    run.prepare();
    run.run(false);
    auto sites = run.oscillating_sites();
    const std::size_t n_sites = sites.size();
    const std::size_t batches = 4;

    std::vector<int> start = run.current_assignment(sites);
    const double checkpoint_loss = run.loss_with_assignment(sites, start, batches);

    // 100 stochastic samples: per-site Bernoulli on the integer-EMA fraction.
    std::mt19937_64 rng(109);
    double best = std::numeric_limits<double>::infinity(), mean = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> levels(sites.size());
        for (std::size_t i = 0; i < sites.size(); ++i) {
            const QuantizedWeight* qw = sites[i].layer->weight_quantizer();
            const double ema = qw->tracker.w_ema_int[sites[i].index];
            const double p_up = std::clamp(ema - sites[i].down, 0.0, 1.0);
            levels[i] = std::bernoulli_distribution(p_up)(rng) ? 1 : 0;
        }
        const double loss = run.loss_with_assignment(sites, levels, batches);
        best = std::min(best, loss);
        mean += loss / 100.0;
    }

    // Simulated annealing over the same binary choices.
    std::vector<BinaryChoice> choices(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i)
        choices[i] = BinaryChoice{sites[i].index, sites[i].down, sites[i].up};
    auto anneal_loss = [&](const std::vector<int>& levels) {
        return run.loss_with_assignment(sites, levels, batches);
    };
    const std::vector<int> best_assign = anneal_binary(choices, anneal_loss, 2000, 17, -1.0, &start);
    const double annealed_loss = run.loss_with_assignment(sites, best_assign, batches);

    // 10-weight instance vs exhaustive enumeration of all 1024 assignments.
    std::mt19937_64 qrng(110);
    std::uniform_real_distribution<double> uq(-1.0, 1.0);
    std::vector<double> a(10), b(10);
    for (int i = 0; i < 10; ++i) {
        a[i] = uq(qrng);
        b[i] = uq(qrng);
    }
    auto quad = [&](const std::vector<int>& bits) {
        double s = 0.0;
        for (int i = 0; i < 10; ++i) s += bits[i] ? a[i] : b[i];
        double loss = s * s;
        for (int i = 0; i < 10; ++i) loss += (bits[i] ? a[i] : b[i]) * (i % 3 == 0 ? 0.7 : -0.4);
        return loss;
    };
    double brute = std::numeric_limits<double>::infinity();
    for (int mask = 0; mask < 1024; ++mask) {
        std::vector<int> bits(10);
        for (int i = 0; i < 10; ++i) bits[i] = (mask >> i) & 1;
        brute = std::min(brute, quad(bits));
    }
    std::vector<BinaryChoice> small_choices(10);
    for (std::size_t i = 0; i < 10; ++i) small_choices[i] = BinaryChoice{i, 0.0, 1.0};
    const double small_loss = quad(anneal_binary(small_choices, quad, 20000, 23));

    const bool ordering = annealed_loss <= best + 1e-12 && best <= mean + 1e-12;
    const bool exact = std::abs(small_loss - brute) <= 1e-12;
    msg = "sampling/annealing on a checkpoint with " + std::to_string(n_sites) +
          " oscillating weights (>= 20): annealed = " + fmt(annealed_loss) +
          " <= best-of-100 = " + fmt(best) + " <= mean = " + fmt(mean) +
          " (checkpoint loss " + fmt(checkpoint_loss) + "); 10-weight annealer = " +
          fmt(small_loss) + " matches exhaustive optimum = " + fmt(brute);
    return n_sites >= 20 && ordering && exact;
}

// --------------------------------------------------------------- criterion 10

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

bool criterion10(std::string& msg) {
    const fs::path base = fs::temp_directory_path() / "oscqat_acceptance_det";
    fs::remove_all(base);
    auto run_once = [&](const std::string& tag) {
        ExperimentConfig cfg = small_config(42);
        cfg.out_dir = (base / tag).string();
        fs::create_directories(cfg.out_dir);
        TrainRun run(cfg);
        run.prepare();
        run.run(true);
        return cfg.out_dir;
    };
    const std::string d1 = run_once("a"), d2 = run_once("b");
    const bool metrics_same =
        slurp(fs::path(d1) / "metrics.jsonl") == slurp(fs::path(d2) / "metrics.jsonl");
    const bool ckpt_same =
        slurp(fs::path(d1) / "checkpoint.oqat") == slurp(fs::path(d2) / "checkpoint.oqat");
    const std::size_t bytes = slurp(fs::path(d1) / "checkpoint.oqat").size();
    fs::remove_all(base);
    msg = "determinism: metrics logs byte-identical = " + std::string(metrics_same ? "yes" : "no") +
          ", checkpoints byte-identical = " + std::string(ckpt_same ? "yes" : "no") + " (" +
          std::to_string(bytes) + " bytes compared)";
    return metrics_same && ckpt_same;
}

}  // namespace

int main(int argc, char** argv) {
    // Optional arguments select a subset of criteria (debugging aid).
    std::vector<bool> want(11, argc <= 1);
    for (int i = 1; i < argc; ++i) {
        const int c = std::atoi(argv[i]);
        if (c >= 1 && c <= 10) want[c] = true;
    }
    std::string msg;
    using Fn = std::function<bool(std::string&)>;
    const std::vector<Fn> criteria{
        criterion1, criterion2, criterion3, criterion4, criterion5,
        criterion6, criterion7,
        criterion8,
        criterion9, criterion10,
    };
    int ran = 0;
    for (int c = 1; c <= 10; ++c) {
        if (!want[c]) continue;
        report(c, criteria[c - 1](msg), msg);
        ++ran;
    }

    if (g_failures) {
        std::printf("%d of %d criteria FAILED\n", g_failures, ran);
        return 1;
    }
    std::printf("all %d criteria passed\n", ran);
    return 0;
}
