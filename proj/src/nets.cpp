#include "oscqat/nets.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace oscqat {

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          int wbits, int abits) {
    LayerSpec s;
    s.kind = Conv;
    s.in_ch = in;
    s.out_ch = out;
    s.kernel = k;
    s.stride = stride;
    s.weight_bits = wbits;
    s.act_bits = abits;
    return s;
}

LayerSpec LayerSpec::depthwise(std::size_t ch, std::size_t k, std::size_t stride, int wbits,
                               int abits) {
    LayerSpec s;
    s.kind = DepthwiseConv;
    s.in_ch = ch;
    s.out_ch = ch;
    s.kernel = k;
    s.stride = stride;
    s.weight_bits = wbits;
    s.act_bits = abits;
    return s;
}

LayerSpec LayerSpec::pointwise(std::size_t in, std::size_t out, int wbits, int abits) {
    LayerSpec s;
    s.kind = PointwiseConv;
    s.in_ch = in;
    s.out_ch = out;
    s.kernel = 1;
    s.stride = 1;
    s.weight_bits = wbits;
    s.act_bits = abits;
    return s;
}

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out, int wbits, int abits) {
    LayerSpec s;
    s.kind = Linear;
    s.in_ch = in;
    s.out_ch = out;
    s.weight_bits = wbits;
    s.act_bits = abits;
    return s;
}

LayerSpec LayerSpec::bn(std::size_t ch) {
    LayerSpec s;
    s.kind = BatchNorm;
    s.in_ch = s.out_ch = ch;
    return s;
}

LayerSpec LayerSpec::relu() {
    LayerSpec s;
    s.kind = Relu;
    return s;
}

LayerSpec LayerSpec::relu6() {
    LayerSpec s;
    s.kind = Relu6;
    return s;
}

LayerSpec LayerSpec::residual(std::vector<LayerSpec> body) {
    LayerSpec s;
    s.kind = ResidualBlock;
    s.body = std::move(body);
    return s;
}

Value ForwardCtx::leaf_for(Tensor& t, bool trainable) {
    Value v = tape.leaf(t, trainable);
    leaf_map.emplace_back(&t, v);
    return v;
}

namespace {

Value maybe_quantize_act(ForwardCtx& ctx, Value x, ActQuantizer* act) {
    if (!act || !ctx.quantize) return x;
    if (!act->initialized) {
        act->scale[0] = mse_range_init(x.val(), act->q);
        act->scale_ref = act->scale[0];
        act->initialized = true;
    }
    QuantizerState q = act->q;
    Value sleaf = ctx.leaf_for(act->scale);
    return fake_quantize(x, sleaf, q, nullptr, nullptr);
}

Value quantize_weight(ForwardCtx& ctx, Tensor& w, QuantizedWeight& qw) {
    Value wleaf = ctx.leaf_for(w);
    if (!ctx.quantize) return wleaf;
    Value sleaf = ctx.leaf_for(qw.scale);
    return fake_quantize(wleaf, sleaf, qw.q, qw.frozen_mask(), qw.frozen_int());
}

}  // namespace

Value ConvLayer::forward(ForwardCtx& ctx, Value x) {
    x = maybe_quantize_act(ctx, x, act.get());
    Value wq = quantize_weight(ctx, w, qw);
    Value b = ctx.leaf_for(bias);
    if (kind == LayerSpec::DepthwiseConv) return depthwise_conv2d(x, wq, b, stride, pad);
    return conv2d(x, wq, b, stride, pad);
}

void ConvLayer::collect_params(std::vector<ParamInfo>& out) {
    out.push_back({name + ".w", &w, qw.frozen_mask()});
    out.push_back({name + ".bias", &bias, nullptr});
    if (qw.q.scale_trainable) out.push_back({name + ".w_scale", &qw.scale, nullptr});
    if (act) out.push_back({name + ".act_scale", &act->scale, nullptr});
}

void ConvLayer::collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
    if (qw.tracking) {
        out.emplace_back(name + ".osc_f", &qw.tracker.f);
        out.emplace_back(name + ".osc_delta_tau", &qw.tracker.delta_tau);
        out.emplace_back(name + ".osc_w_int_prev", &qw.tracker.w_int_prev);
        out.emplace_back(name + ".osc_w_ema_int", &qw.tracker.w_ema_int);
        out.emplace_back(name + ".osc_frozen", &qw.tracker.frozen);
        out.emplace_back(name + ".osc_frozen_int", &qw.tracker.frozen_int);
    }
}

std::size_t ConvLayer::fanin_per_output() const {
    if (kind == LayerSpec::DepthwiseConv) return kernel * kernel;
    return in_ch * kernel * kernel;
}

Value LinearLayer::forward(ForwardCtx& ctx, Value x) {
    if (x.val().rank() == 4) x = global_avg_pool(x);
    x = maybe_quantize_act(ctx, x, act.get());
    Value wq = quantize_weight(ctx, w, qw);
    Value b = ctx.leaf_for(bias);
    return linear(x, wq, b);
}

void LinearLayer::collect_params(std::vector<ParamInfo>& out) {
    out.push_back({name + ".w", &w, qw.frozen_mask()});
    out.push_back({name + ".bias", &bias, nullptr});
    if (qw.q.scale_trainable) out.push_back({name + ".w_scale", &qw.scale, nullptr});
    if (act) out.push_back({name + ".act_scale", &act->scale, nullptr});
}

void LinearLayer::collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
    if (qw.tracking) {
        out.emplace_back(name + ".osc_f", &qw.tracker.f);
        out.emplace_back(name + ".osc_delta_tau", &qw.tracker.delta_tau);
        out.emplace_back(name + ".osc_w_int_prev", &qw.tracker.w_int_prev);
        out.emplace_back(name + ".osc_w_ema_int", &qw.tracker.w_ema_int);
        out.emplace_back(name + ".osc_frozen", &qw.tracker.frozen);
        out.emplace_back(name + ".osc_frozen_int", &qw.tracker.frozen_int);
    }
}

Value BatchNormLayer::forward(ForwardCtx& ctx, Value x) {
    if (ctx.bn_collect) {
        auto [it, inserted] = ctx.bn_collect->try_emplace(
            name, ChannelStatsAccumulator::init(stats.running_mean.size()));
        it->second.add(x.val());
    }
    Value g = ctx.leaf_for(stats.gamma);
    Value b = ctx.leaf_for(stats.beta);
    if (ctx.training) return batchnorm_train(x, g, b, stats, ctx.update_bn_running);
    return batchnorm_eval(x, g, b, stats);
}

void BatchNormLayer::collect_params(std::vector<ParamInfo>& out) {
    out.push_back({name + ".gamma", &stats.gamma, nullptr});
    out.push_back({name + ".beta", &stats.beta, nullptr});
}

void BatchNormLayer::collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(name + ".running_mean", &stats.running_mean);
    out.emplace_back(name + ".running_var", &stats.running_var);
}

Value ActivationLayer::forward(ForwardCtx& ctx, Value x) {
    (void)ctx;
    return clipped6 ? relu6(x) : relu(x);
}

Value ResidualBlockLayer::forward(ForwardCtx& ctx, Value x) {
    Value y = x;
    for (auto& l : body) y = l->forward(ctx, y);
    return skip ? add(y, x) : y;
}

void ResidualBlockLayer::collect_params(std::vector<ParamInfo>& out) {
    for (auto& l : body) l->collect_params(out);
}

void ResidualBlockLayer::collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
    for (auto& l : body) l->collect_state(out);
}

Value Model::forward(ForwardCtx& ctx, Value x) {
    for (auto& l : layers) x = l->forward(ctx, x);
    return x;
}

std::vector<ParamInfo> Model::params() {
    std::vector<ParamInfo> out;
    for (auto& l : layers) l->collect_params(out);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::state_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (const ParamInfo& p : params()) out.emplace_back(p.name, p.tensor);
    for (auto& l : layers) l->collect_state(out);
    return out;
}

void Model::for_each_layer(const std::function<void(Layer&)>& fn) {
    std::function<void(Layer&)> walk = [&](Layer& l) {
        fn(l);
        if (auto* rb = dynamic_cast<ResidualBlockLayer*>(&l))
            for (auto& inner : rb->body) walk(*inner);
    };
    for (auto& l : layers) walk(*l);
}

std::vector<ConvLayer*> Model::conv_layers() {
    std::vector<ConvLayer*> out;
    for_each_layer([&](Layer& l) {
        if (auto* c = dynamic_cast<ConvLayer*>(&l)) out.push_back(c);
    });
    return out;
}

std::vector<BatchNormLayer*> Model::bn_layers() {
    std::vector<BatchNormLayer*> out;
    for_each_layer([&](Layer& l) {
        if (auto* b = dynamic_cast<BatchNormLayer*>(&l)) out.push_back(b);
    });
    return out;
}

std::vector<Layer*> Model::quantized_layers() {
    std::vector<Layer*> out;
    for_each_layer([&](Layer& l) {
        if (l.weight_quantizer() && l.weight_tensor()) out.push_back(&l);
    });
    return out;
}

namespace {

struct ShapeState {
    bool spatial = true;
    std::size_t ch = 0, h = 0, w = 0;
    std::size_t features = 0;
};

void kaiming_uniform(Tensor& w, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : w.data) x = dist(rng);
}

std::unique_ptr<Layer> build_layer(const LayerSpec& spec, ShapeState& st, std::size_t index,
                                   std::mt19937_64& rng, const std::string& prefix);

void shape_error(std::size_t index, const std::string& what) {
    throw std::invalid_argument("build_model: layer " + std::to_string(index) + ": " + what);
}

std::unique_ptr<Layer> build_conv(const LayerSpec& spec, ShapeState& st, std::size_t index,
                                  std::mt19937_64& rng, const std::string& prefix) {
    if (!st.spatial) shape_error(index, "conv after flatten");
    if (spec.in_ch != st.ch)
        shape_error(index, "expects " + std::to_string(spec.in_ch) + " input channels, got " +
                               std::to_string(st.ch));
    auto l = std::make_unique<ConvLayer>();
    l->kind = spec.kind;
    l->in_ch = spec.in_ch;
    l->out_ch = spec.out_ch;
    l->kernel = spec.kernel;
    l->stride = spec.stride;
    l->pad = (spec.kernel - 1) / 2;
    l->name = prefix;
    if (spec.kind == LayerSpec::DepthwiseConv) {
        if (spec.out_ch != spec.in_ch) shape_error(index, "depthwise conv must keep channels");
        l->w = Tensor::zeros({spec.in_ch, spec.kernel, spec.kernel});
    } else {
        l->w = Tensor::zeros({spec.out_ch, spec.in_ch, spec.kernel, spec.kernel});
    }
    l->bias = Tensor::zeros({spec.out_ch});
    kaiming_uniform(l->w, l->fanin_per_output(), rng);
    l->qw.q = QuantizerState::signed_symmetric(spec.weight_bits);
    if (spec.act_bits > 0) {
        l->act = std::make_unique<ActQuantizer>();
        l->act->q = QuantizerState::unsigned_range(spec.act_bits);
    }
    st.ch = spec.out_ch;
    st.h = (st.h + 2 * l->pad - spec.kernel) / spec.stride + 1;
    st.w = (st.w + 2 * l->pad - spec.kernel) / spec.stride + 1;
    return l;
}

std::unique_ptr<Layer> build_layer(const LayerSpec& spec, ShapeState& st, std::size_t index,
                                   std::mt19937_64& rng, const std::string& prefix) {
    switch (spec.kind) {
        case LayerSpec::Conv:
        case LayerSpec::DepthwiseConv:
        case LayerSpec::PointwiseConv:
            return build_conv(spec, st, index, rng, prefix);
        case LayerSpec::Linear: {
            std::size_t in = st.spatial ? st.ch : st.features;  // spatial input goes through GAP
            if (spec.in_ch != in)
                shape_error(index, "linear expects " + std::to_string(spec.in_ch) +
                                       " input features, got " + std::to_string(in));
            auto l = std::make_unique<LinearLayer>();
            l->in_features = spec.in_ch;
            l->out_features = spec.out_ch;
            l->name = prefix;
            l->w = Tensor::zeros({spec.out_ch, spec.in_ch});
            l->bias = Tensor::zeros({spec.out_ch});
            kaiming_uniform(l->w, spec.in_ch, rng);
            l->qw.q = QuantizerState::signed_symmetric(spec.weight_bits);
            if (spec.act_bits > 0) {
                l->act = std::make_unique<ActQuantizer>();
                l->act->q = QuantizerState::unsigned_range(spec.act_bits);
            }
            st.spatial = false;
            st.features = spec.out_ch;
            return l;
        }
        case LayerSpec::BatchNorm: {
            if (spec.in_ch != st.ch && !(spec.in_ch == st.features && !st.spatial))
                shape_error(index, "batch norm channel mismatch");
            auto l = std::make_unique<BatchNormLayer>();
            l->stats = NormStats::init(spec.in_ch);
            l->name = prefix;
            return l;
        }
        case LayerSpec::Relu:
        case LayerSpec::Relu6: {
            auto l = std::make_unique<ActivationLayer>();
            l->clipped6 = spec.kind == LayerSpec::Relu6;
            l->name = prefix;
            return l;
        }
        case LayerSpec::ResidualBlock: {
            auto l = std::make_unique<ResidualBlockLayer>();
            l->name = prefix;
            const ShapeState before = st;
            std::size_t sub = 0;
            for (const LayerSpec& inner : spec.body)
                l->body.push_back(
                    build_layer(inner, st, index, rng, prefix + "." + std::to_string(sub++)));
            l->skip = st.spatial && before.spatial && st.ch == before.ch && st.h == before.h &&
                      st.w == before.w;
            return l;
        }
    }
    shape_error(index, "unknown layer kind");
    return nullptr;
}

}  // namespace

Model build_model(const std::vector<LayerSpec>& specs, std::size_t in_ch, std::size_t in_h,
                  std::size_t in_w, std::uint64_t seed) {
    Model m;
    m.in_ch = in_ch;
    m.in_h = in_h;
    m.in_w = in_w;
    ShapeState st{true, in_ch, in_h, in_w, 0};
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < specs.size(); ++i)
        m.layers.push_back(build_layer(specs[i], st, i, rng, "layer" + std::to_string(i)));
    m.num_classes = st.spatial ? st.ch : st.features;

    // First and last weight-carrying layers stay at 8 bits.
    auto quant = m.quantized_layers();
    for (Layer* edge : {quant.empty() ? nullptr : quant.front(),
                        quant.empty() ? nullptr : quant.back()}) {
        if (!edge) continue;
        QuantizedWeight* qw = edge->weight_quantizer();
        if (qw->q.bits != 8) {
            std::fprintf(stderr,
                         "build_model: warning: %s requested %d-bit weights; first/last layers "
                         "are built at 8 bits\n",
                         edge->name.c_str(), qw->q.bits);
            qw->q = QuantizerState::signed_symmetric(8);
        }
    }
    return m;
}

std::vector<LayerSpec> toy_dwnet_specs(std::size_t in_ch, std::size_t classes, int wb, int ab) {
    auto inverted_residual = [&](std::size_t in, std::size_t mid, std::size_t out,
                                 std::size_t stride) {
        return LayerSpec::residual({
            LayerSpec::pointwise(in, mid, wb, ab),
            LayerSpec::bn(mid),
            LayerSpec::relu6(),
            LayerSpec::depthwise(mid, 3, stride, wb, ab),
            LayerSpec::bn(mid),
            LayerSpec::relu6(),
            LayerSpec::pointwise(mid, out, wb, ab),
            LayerSpec::bn(out),
        });
    };
    return {
        LayerSpec::conv(in_ch, 8, 3, 1, wb, ab),
        LayerSpec::bn(8),
        LayerSpec::relu6(),
        inverted_residual(8, 32, 16, 2),
        inverted_residual(16, 48, 16, 1),  // stride 1, same channels: skip engages
        inverted_residual(16, 64, 24, 2),
        LayerSpec::relu6(),
        LayerSpec::linear(24, classes, wb, ab),
    };
}

std::vector<LayerSpec> toy_resnet_specs(std::size_t in_ch, std::size_t classes, int wb, int ab) {
    auto block = [&](std::size_t ch) {
        return LayerSpec::residual({
            LayerSpec::conv(ch, ch, 3, 1, wb, ab),
            LayerSpec::bn(ch),
            LayerSpec::relu(),
            LayerSpec::conv(ch, ch, 3, 1, wb, ab),
            LayerSpec::bn(ch),
        });
    };
    return {
        LayerSpec::conv(in_ch, 8, 3, 1, wb, ab),
        LayerSpec::bn(8),
        LayerSpec::relu(),
        block(8),
        LayerSpec::relu(),
        block(8),
        LayerSpec::relu(),
        LayerSpec::linear(8, classes, wb, ab),
    };
}

}  // namespace oscqat
