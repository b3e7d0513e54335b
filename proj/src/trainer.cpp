#include "oscqat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <list>
#include <numeric>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace oscqat {

namespace {

using nlohmann::json;

constexpr double kMinScale = 1e-8;

// Internal signal: non-finite loss. run() converts it into an abort that
// still writes the last good state.
struct NanAbort {
    std::size_t step;
};

std::vector<LayerSpec> model_specs(const ExperimentConfig& cfg, std::size_t in_ch,
                                   std::size_t classes) {
    if (cfg.model == "toy_resnet")
        return toy_resnet_specs(in_ch, classes, cfg.weight_bits, cfg.act_bits);
    return toy_dwnet_specs(in_ch, classes, cfg.weight_bits, cfg.act_bits);
}

// (oscillating fraction, frozen fraction) over all tracked weights.
std::pair<double, double> model_osc_stats(Model& model, double threshold) {
    std::size_t osc = 0, frozen = 0, total = 0;
    for (Layer* l : model.quantized_layers()) {
        QuantizedWeight* qw = l->weight_quantizer();
        if (!qw->tracking) continue;
        const OscillationTracker& t = qw->tracker;
        for (std::size_t i = 0; i < t.f.size(); ++i) {
            ++total;
            if (t.frozen[i] != 0.0)
                ++frozen;
            else if (t.f[i] > threshold)
                ++osc;
        }
    }
    if (total == 0) return {0.0, 0.0};
    return {static_cast<double>(osc) / static_cast<double>(total),
            static_cast<double>(frozen) / static_cast<double>(total)};
}

// Training can drive a learned step size toward zero, where every weight
// saturates the clipping range and batch norm silently rescales the
// near-constant outputs; that regime trains but breaks eval-mode stats.
// Keep each scale within a fixed factor of its calibration anchor.
constexpr double kScaleTrust = 16.0;

double clamp_scale(double s, double ref) {
    s = std::max(s, kMinScale);
    if (ref > 0.0) s = std::min(std::max(s, ref / kScaleTrust), ref * kScaleTrust);
    return s;
}

void clamp_scales(Model& model, bool quantize) {
    if (!quantize) return;
    for (Layer* l : model.quantized_layers()) {
        QuantizedWeight* qw = l->weight_quantizer();
        qw->scale[0] = clamp_scale(qw->scale[0], qw->scale_ref);
        qw->q.scale = qw->scale[0];
    }
    model.for_each_layer([](Layer& l) {
        ActQuantizer* act = nullptr;
        if (auto* c = dynamic_cast<ConvLayer*>(&l))
            act = c->act.get();
        else if (auto* lin = dynamic_cast<LinearLayer*>(&l))
            act = lin->act.get();
        if (act && act->initialized) {
            act->scale[0] = clamp_scale(act->scale[0], act->scale_ref);
            act->q.scale = act->scale[0];
        }
    });
}

}  // namespace

TrainRun::TrainRun(ExperimentConfig config) : cfg(std::move(config)) {}

void TrainRun::prepare() {
    if (prepared_) return;
    if (cfg.dataset.kind == "idx") {
        train_set = load_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
        eval_set = load_idx(cfg.dataset.eval_images_path, cfg.dataset.eval_labels_path);
        if (train_set.num_classes != eval_set.num_classes)
            eval_set.num_classes = train_set.num_classes =
                std::max(train_set.num_classes, eval_set.num_classes);
    } else {
        SyntheticSpec spec = cfg.dataset.synthetic;
        const std::size_t train_n = spec.samples;
        spec.samples = train_n + cfg.dataset.eval_samples;
        Dataset full = make_synthetic(spec);
        auto take = [&](std::size_t first, std::size_t count) {
            Dataset d;
            auto [imgs, labels] = full.batch_range(first, count);
            d.images = std::move(imgs);
            d.labels = std::move(labels);
            d.num_classes = full.num_classes;
            return d;
        };
        train_set = take(0, train_n);
        eval_set = take(train_n, cfg.dataset.eval_samples);
    }
    model = build_model(model_specs(cfg, train_set.channels(), train_set.num_classes),
                        train_set.channels(), train_set.height(), train_set.width(), cfg.seed);
    const EstimatorKind est = cfg.estimator.to_kind();
    for (Layer* l : model.quantized_layers()) l->weight_quantizer()->q.estimator = est;
    prepared_ = true;
}

void TrainRun::sync_quantizer_scales() {
    for (Layer* l : model.quantized_layers()) {
        QuantizedWeight* qw = l->weight_quantizer();
        qw->q.scale = qw->scale[0];
    }
}

void TrainRun::enable_tracking() {
    const double m =
        cfg.remedy.kind == RemedyConfig::Freeze ? cfg.remedy.momentum : cfg.tracker_momentum;
    for (Layer* l : model.quantized_layers()) {
        QuantizedWeight* qw = l->weight_quantizer();
        if (qw->tracking) continue;
        qw->q.scale = qw->scale[0];
        Tensor w_int;
        quantize_forward(*l->weight_tensor(), qw->q, &w_int);
        qw->tracker = OscillationTracker::init(w_int, m);
        qw->tracking = true;
    }
}

std::vector<std::pair<std::string, Tensor>> TrainRun::snapshot_state() {
    std::vector<std::pair<std::string, Tensor>> snap;
    for (auto& [name, t] : model.state_tensors()) snap.emplace_back(name, *t);
    return snap;
}

double TrainRun::train_epoch(std::size_t epoch, bool quantize, SgdState& opt, std::size_t& step,
                             const CosineSchedule* lr_s, const CosineSchedule* lambda_s,
                             const CosineSchedule* fth_s, std::ostream* metrics) {
    const std::size_t bs = cfg.optimizer.batch_size;
    const std::size_t nb = train_set.size() / bs;
    if (nb == 0) throw ConfigError("config: batch_size exceeds the training set");
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + epoch + (quantize ? 1u << 20 : 0u));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                     order.begin() + static_cast<std::ptrdiff_t>((b + 1) * bs));
        auto [xb, yb] = train_set.batch(idx);

        Tape tape;
        ForwardCtx ctx(tape);
        ctx.training = true;
        ctx.quantize = quantize;
        ctx.update_bn_running = true;
        Value x = tape.leaf(std::move(xb));
        Value loss = softmax_cross_entropy(model.forward(ctx, x), yb);

        double lambda = 0.0;
        if (quantize && lambda_s) {
            lambda = lambda_s->value(step);
            if (lambda > 0.0) {
                for (Layer* l : model.quantized_layers()) {
                    QuantizedWeight* qw = l->weight_quantizer();
                    Value wleaf{}, sleaf{};
                    for (auto& [t, v] : ctx.leaf_map) {
                        if (t == l->weight_tensor()) wleaf = v;
                        if (t == &qw->scale) sleaf = v;
                    }
                    if (wleaf.tape && sleaf.tape)
                        loss = add(loss, dampen_penalty(wleaf, sleaf, qw->q, lambda));
                }
            }
        }

        const double loss_v = loss.val().data[0];
        if (!std::isfinite(loss_v)) throw NanAbort{step};
        tape.backward(loss);

        if (lr_s) opt.lr = lr_s->value(step);
        auto infos = model.params();
        std::vector<Tensor*> ps;
        std::vector<const Tensor*> gs, fz;
        std::vector<std::string> names;
        std::list<Tensor> zero_store;
        for (ParamInfo& info : infos) {
            ps.push_back(info.tensor);
            fz.push_back(info.frozen);
            names.push_back(info.name);
            const Value* leaf = nullptr;
            for (auto& [t, v] : ctx.leaf_map)
                if (t == info.tensor) leaf = &v;
            if (leaf)
                gs.push_back(&leaf->grad());
            else
                gs.push_back(&zero_store.emplace_back(Tensor::zeros(info.tensor->shape)));
        }
        sgd_step(ps, gs, opt, &fz, &names);
        clamp_scales(model, quantize);

        double fth = 0.0;
        if (quantize) {
            if (fth_s) fth = fth_s->value(step);
            for (Layer* l : model.quantized_layers()) {
                QuantizedWeight* qw = l->weight_quantizer();
                if (!qw->tracking) continue;
                Tensor& w = *l->weight_tensor();
                Tensor w_int;
                quantize_forward(w, qw->q, &w_int);
                for (std::size_t i = 0; i < w_int.size(); ++i)
                    if (qw->tracker.frozen[i] != 0.0) w_int[i] = qw->tracker.frozen_int[i];
                qw->tracker.track_step(w_int);
                if (fth_s) {
                    const Tensor before = qw->tracker.frozen;
                    freeze_step(qw->tracker, fth, w_int);
                    for (std::size_t i = 0; i < w.size(); ++i)
                        if (qw->tracker.frozen[i] != 0.0 && before[i] == 0.0)
                            w[i] = qw->q.scale * qw->tracker.frozen_int[i];
                } else {
                    qw->tracker.update_value_ema(w_int);
                }
            }
        }

        if (metrics) {
            json j{{"type", "step"},
                   {"phase", quantize ? "qat" : "pretrain"},
                   {"step", step},
                   {"epoch", epoch},
                   {"loss", loss_v},
                   {"lr", opt.lr}};
            if (quantize) {
                auto [osc, frozen] = model_osc_stats(model, cfg.osc_threshold);
                j["osc_fraction"] = osc;
                j["frozen_fraction"] = frozen;
                if (lambda_s) j["lambda"] = lambda;
                if (fth_s) j["f_th"] = fth;
            }
            *metrics << j.dump() << '\n';
        }
        loss_sum += loss_v;
        ++step;
    }
    return loss_sum / static_cast<double>(nb);
}

TrainResult TrainRun::run(bool write_artifacts) {
    prepare();
    namespace fs = std::filesystem;
    std::ofstream metrics;
    if (write_artifacts) {
        fs::create_directories(cfg.out_dir);
        std::ofstream cfg_out(fs::path(cfg.out_dir) / "config.json");
        cfg_out << cfg.to_json().dump(2) << '\n';
        metrics.open(fs::path(cfg.out_dir) / "metrics.jsonl");
        if (!metrics) throw std::runtime_error(cfg.out_dir + ": cannot write metrics.jsonl");
    }
    std::ostream* mptr = write_artifacts ? &metrics : nullptr;

    auto last_good = snapshot_state();
    const auto checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.oqat").string();
    auto abort_with = [&](const NanAbort& a) -> void {
        std::string where = checkpoint_path;
        if (write_artifacts) {
            std::vector<std::pair<std::string, Tensor*>> ptrs;
            for (auto& [name, t] : last_good) ptrs.emplace_back(name, &t);
            save_checkpoint(checkpoint_path, ptrs);
        }
        throw std::runtime_error("training aborted: non-finite loss at step " +
                                 std::to_string(a.step) +
                                 (write_artifacts ? "; last good state written to " + where : ""));
    };

    try {
        // Phase 1: full-precision pretraining at a constant learning rate.
        SgdState pre_opt(cfg.optimizer.lr, cfg.optimizer.momentum);
        std::size_t step = 0;
        for (std::size_t e = 0; e < cfg.optimizer.pretrain_epochs; ++e) {
            const double avg =
                train_epoch(e, false, pre_opt, step, nullptr, nullptr, nullptr, mptr);
            last_good = snapshot_state();
            if (mptr) {
                *mptr << json{{"type", "epoch"},
                              {"phase", "pretrain"},
                              {"epoch", e},
                              {"train_loss", avg},
                              {"eval_acc", evaluate_accuracy(false)}}
                             .dump()
                      << '\n';
            }
        }

        // Phase 2: quantizer range calibration + oscillation tracking.
        for (Layer* l : model.quantized_layers()) {
            QuantizedWeight* qw = l->weight_quantizer();
            qw->scale[0] = mse_range_init(*l->weight_tensor(), qw->q);
            qw->scale_ref = qw->scale[0];
            qw->q.scale = qw->scale[0];
        }
        enable_tracking();
        last_good = snapshot_state();

        // Phase 3: QAT with cosine learning-rate decay and the remedy
        // schedules spanning the whole quantized phase.
        const std::size_t nb = train_set.size() / cfg.optimizer.batch_size;
        const std::size_t total = std::max<std::size_t>(1, cfg.optimizer.qat_epochs * nb);
        CosineSchedule lr_s(cfg.optimizer.lr, cfg.optimizer.lr_end, total);
        CosineSchedule lambda_s(cfg.remedy.lambda_start, cfg.remedy.lambda_end, total);
        CosineSchedule fth_s(cfg.remedy.fth_start, cfg.remedy.fth_end, total);
        const CosineSchedule* lam_p = cfg.remedy.kind == RemedyConfig::Dampen ? &lambda_s : nullptr;
        const CosineSchedule* fth_p = cfg.remedy.kind == RemedyConfig::Freeze ? &fth_s : nullptr;

        SgdState qat_opt(cfg.optimizer.lr, cfg.optimizer.momentum);
        step = 0;
        for (std::size_t e = 0; e < cfg.optimizer.qat_epochs; ++e) {
            const double avg = train_epoch(e, true, qat_opt, step, &lr_s, lam_p, fth_p, mptr);
            last_good = snapshot_state();
            if (mptr) {
                *mptr << json{{"type", "epoch"},
                              {"phase", "qat"},
                              {"epoch", e},
                              {"train_loss", avg},
                              {"eval_acc", evaluate_accuracy(true)}}
                             .dump()
                      << '\n';
            }
        }
    } catch (const NanAbort& a) {
        abort_with(a);
    }

    // Phase 4: report, re-estimate BN, report again.
    result = TrainResult{};
    result.pre_bn_acc = evaluate_accuracy(true);
    result.kl_before = kl_report(cfg.bn_reestimate_batches);
    reestimate_bn(cfg.bn_reestimate_batches);
    result.post_bn_acc = evaluate_accuracy(true);
    result.kl_after = kl_report(cfg.bn_reestimate_batches);
    const std::size_t nb = std::max<std::size_t>(1, train_set.size() / cfg.optimizer.batch_size);
    result.final_train_loss = fixed_batch_loss(std::min<std::size_t>(10, nb));
    auto [osc, frozen] = model_osc_stats(model, cfg.osc_threshold);
    result.osc_fraction = osc;
    result.frozen_fraction = frozen;

    if (write_artifacts) {
        save(checkpoint_path);
        json kb = json::array(), ka = json::array();
        for (const KlRecord& r : result.kl_before)
            kb.push_back({{"layer", r.layer}, {"max_kl", r.max_kl}, {"mean_kl", r.mean_kl}});
        for (const KlRecord& r : result.kl_after)
            ka.push_back({{"layer", r.layer}, {"max_kl", r.max_kl}, {"mean_kl", r.mean_kl}});
        metrics << json{{"type", "result"},
                        {"pre_bn_acc", result.pre_bn_acc},
                        {"post_bn_acc", result.post_bn_acc},
                        {"final_train_loss", result.final_train_loss},
                        {"osc_fraction", result.osc_fraction},
                        {"frozen_fraction", result.frozen_fraction},
                        {"kl_before", kb},
                        {"kl_after", ka}}
                       .dump()
                << '\n';
    }
    return result;
}

double TrainRun::evaluate_accuracy(bool quantize) {
    const std::size_t bs = cfg.optimizer.batch_size;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < eval_set.size(); first += bs) {
        const std::size_t count = std::min(bs, eval_set.size() - first);
        auto [xb, yb] = eval_set.batch_range(first, count);
        Tape tape;
        ForwardCtx ctx(tape);
        ctx.training = false;
        ctx.quantize = quantize;
        ctx.update_bn_running = false;
        Value logits = model.forward(ctx, tape.leaf(std::move(xb)));
        const Tensor& lv = logits.val();
        const std::size_t classes = lv.shape[1];
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (lv[i * classes + c] > lv[i * classes + best]) best = c;
            if (static_cast<int>(best) == yb[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

double TrainRun::fixed_batch_loss(std::size_t num_batches) {
    double total = 0.0;
    for (std::size_t b = 0; b < num_batches; ++b) {
        auto [xb, yb] = reestimation_batch(b);
        Tape tape;
        ForwardCtx ctx(tape);
        ctx.training = false;
        ctx.quantize = true;
        ctx.update_bn_running = false;
        Value loss = softmax_cross_entropy(model.forward(ctx, tape.leaf(std::move(xb))), yb);
        total += loss.val().data[0];
    }
    return total / static_cast<double>(num_batches);
}

std::pair<Tensor, std::vector<int>> TrainRun::reestimation_batch(std::size_t i) const {
    const std::size_t bs = cfg.optimizer.batch_size;
    const std::size_t nb = std::max<std::size_t>(1, train_set.size() / bs);
    return train_set.batch_range((i % nb) * bs, std::min(bs, train_set.size()));
}

std::unordered_map<std::string, std::pair<Tensor, Tensor>> TrainRun::population_bn_stats(
    std::size_t batches) {
    std::unordered_map<std::string, ChannelStatsAccumulator> acc;
    for (std::size_t b = 0; b < batches; ++b) {
        auto [xb, yb] = reestimation_batch(b);
        (void)yb;
        Tape tape;
        ForwardCtx ctx(tape);
        ctx.training = true;  // batch-statistics normalization, as in training
        ctx.quantize = true;
        ctx.update_bn_running = false;
        ctx.bn_collect = &acc;
        model.forward(ctx, tape.leaf(std::move(xb)));
    }
    std::unordered_map<std::string, std::pair<Tensor, Tensor>> out;
    for (auto& [name, a] : acc) out.emplace(name, a.finalize());
    return out;
}

std::vector<KlRecord> TrainRun::kl_report(std::size_t batches) {
    auto pop = population_bn_stats(batches);
    std::vector<KlRecord> out;
    for (BatchNormLayer* bn : model.bn_layers()) {
        auto it = pop.find(bn->name);
        if (it == pop.end()) continue;
        auto [mx, mean] = kl_drift_summary(it->second.first, it->second.second,
                                           bn->stats.running_mean, bn->stats.running_var);
        out.push_back({bn->name, mx, mean});
    }
    return out;
}

bool TrainRun::reestimate_bn(std::size_t batches) {
    auto bns = model.bn_layers();
    if (bns.empty()) return false;
    auto pop = population_bn_stats(batches);
    for (BatchNormLayer* bn : bns) {
        auto it = pop.find(bn->name);
        if (it == pop.end()) continue;
        bn->stats.running_mean = it->second.first;
        bn->stats.running_var = it->second.second;
    }
    return true;
}

std::vector<TrainRun::OscSite> TrainRun::oscillating_sites() {
    sync_quantizer_scales();
    std::vector<OscSite> out;
    for (Layer* l : model.quantized_layers()) {
        QuantizedWeight* qw = l->weight_quantizer();
        if (!qw->tracking) continue;
        const OscillationTracker& t = qw->tracker;
        const double lo = static_cast<double>(qw->q.n);
        const double hi = static_cast<double>(qw->q.p) - 1.0;
        for (std::size_t i = 0; i < t.f.size(); ++i) {
            if (t.frozen[i] != 0.0 || t.f[i] <= cfg.osc_threshold) continue;
            const double down = std::clamp(std::floor(t.w_ema_int[i]), lo, hi);
            out.push_back({l, i, down, down + 1.0});
        }
    }
    return out;
}

std::vector<int> TrainRun::current_assignment(const std::vector<OscSite>& sites) {
    sync_quantizer_scales();
    std::vector<int> levels(sites.size(), 0);
    for (std::size_t k = 0; k < sites.size(); ++k) {
        const OscSite& s = sites[k];
        const double scale = s.layer->weight_quantizer()->q.scale;
        const double u = (*s.layer->weight_tensor())[s.index] / scale;
        levels[k] = std::abs(u - s.up) < std::abs(u - s.down) ? 1 : 0;
    }
    return levels;
}

void TrainRun::apply_assignment(const std::vector<OscSite>& sites, const std::vector<int>& levels) {
    sync_quantizer_scales();
    for (std::size_t k = 0; k < sites.size(); ++k) {
        const OscSite& s = sites[k];
        const double scale = s.layer->weight_quantizer()->q.scale;
        (*s.layer->weight_tensor())[s.index] = scale * (levels[k] ? s.up : s.down);
    }
}

double TrainRun::loss_with_assignment(const std::vector<OscSite>& sites,
                                      const std::vector<int>& levels, std::size_t batches) {
    std::vector<double> saved(sites.size());
    for (std::size_t k = 0; k < sites.size(); ++k)
        saved[k] = (*sites[k].layer->weight_tensor())[sites[k].index];
    apply_assignment(sites, levels);
    const double loss = fixed_batch_loss(batches);
    for (std::size_t k = 0; k < sites.size(); ++k)
        (*sites[k].layer->weight_tensor())[sites[k].index] = saved[k];
    return loss;
}

void TrainRun::save(const std::string& path) { save_checkpoint(path, model.state_tensors()); }

void TrainRun::restore(const std::string& path) {
    prepare();
    enable_tracking();
    auto loaded = load_checkpoint(path);
    try {
        restore_into(loaded, model.state_tensors());
    } catch (const std::runtime_error& e) {
        if (std::string(e.what()).find(".osc_") != std::string::npos)
            throw std::runtime_error(std::string(e.what()) +
                                     " (checkpoint lacks oscillation-tracker state; produce it "
                                     "with the train subcommand)");
        throw;
    }
    sync_quantizer_scales();
    model.for_each_layer([](Layer& l) {
        ActQuantizer* act = nullptr;
        if (auto* c = dynamic_cast<ConvLayer*>(&l))
            act = c->act.get();
        else if (auto* lin = dynamic_cast<LinearLayer*>(&l))
            act = lin->act.get();
        if (act) {
            act->initialized = true;
            act->q.scale = act->scale[0];
        }
    });
}

}  // namespace oscqat
