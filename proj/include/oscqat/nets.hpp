#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "oscqat/autodiff.hpp"
#include "oscqat/normstats.hpp"
#include "oscqat/oscillation.hpp"
#include "oscqat/quantizer.hpp"

namespace oscqat {

struct LayerSpec {
    enum Kind { Conv, DepthwiseConv, PointwiseConv, Linear, BatchNorm, Relu, Relu6, ResidualBlock };
    Kind kind = Conv;
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    int weight_bits = 8;
    int act_bits = 0;  // 0 disables activation quantization for this layer
    std::vector<LayerSpec> body;  // ResidualBlock only

    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          int wbits, int abits = 0);
    static LayerSpec depthwise(std::size_t ch, std::size_t k, std::size_t stride, int wbits,
                               int abits = 0);
    static LayerSpec pointwise(std::size_t in, std::size_t out, int wbits, int abits = 0);
    static LayerSpec linear(std::size_t in, std::size_t out, int wbits, int abits = 0);
    static LayerSpec bn(std::size_t ch);
    static LayerSpec relu();
    static LayerSpec relu6();
    static LayerSpec residual(std::vector<LayerSpec> body);
};

// Per-tensor weight quantizer plus oscillation state.
struct QuantizedWeight {
    Tensor scale = Tensor::from({1}, {1.0});
    // Trust-region anchor for the trained scale (0 = unanchored): keeps the
    // learned step size within a fixed factor of its calibrated init so the
    // degenerate all-weights-clipped regime stays unreachable.
    double scale_ref = 0.0;
    QuantizerState q;
    OscillationTracker tracker;
    bool tracking = false;

    const Tensor* frozen_mask() const { return tracking ? &tracker.frozen : nullptr; }
    const Tensor* frozen_int() const { return tracking ? &tracker.frozen_int : nullptr; }
};

// LSQ-style activation quantizer; scale initialized from the first tensor
// it sees.
struct ActQuantizer {
    Tensor scale = Tensor::from({1}, {1.0});
    double scale_ref = 0.0;  // trust-region anchor, see QuantizedWeight
    QuantizerState q;
    bool initialized = false;
};

struct ParamInfo {
    std::string name;
    Tensor* tensor = nullptr;
    const Tensor* frozen = nullptr;  // optional per-element skip mask
};

class Model;

struct ForwardCtx {
    Tape& tape;
    bool training = true;
    bool quantize = false;           // simulated quantization on/off
    bool update_bn_running = true;
    // Filled during forward: which leaf holds each parameter tensor.
    std::vector<std::pair<Tensor*, Value>> leaf_map;
    // When set, per-layer BN input statistics are accumulated here.
    std::unordered_map<std::string, ChannelStatsAccumulator>* bn_collect = nullptr;

    explicit ForwardCtx(Tape& t) : tape(t) {}
    Value leaf_for(Tensor& t, bool trainable = true);
};

class Layer {
  public:
    std::string name;
    virtual ~Layer() = default;
    virtual Value forward(ForwardCtx& ctx, Value x) = 0;
    virtual void collect_params(std::vector<ParamInfo>& out) { (void)out; }
    // Extra non-trainable state (running stats, tracker tensors) for
    // checkpointing.
    virtual void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) { (void)out; }
    virtual QuantizedWeight* weight_quantizer() { return nullptr; }
    virtual Tensor* weight_tensor() { return nullptr; }
    // Number of weights contributing to one output channel; 0 for layers
    // without weights.
    virtual std::size_t fanin_per_output() const { return 0; }
};

class ConvLayer : public Layer {
  public:
    LayerSpec::Kind kind;  // Conv, DepthwiseConv or PointwiseConv
    std::size_t in_ch, out_ch, kernel, stride, pad;
    Tensor w;
    Tensor bias;
    QuantizedWeight qw;
    std::unique_ptr<ActQuantizer> act;

    Value forward(ForwardCtx& ctx, Value x) override;
    void collect_params(std::vector<ParamInfo>& out) override;
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) override;
    QuantizedWeight* weight_quantizer() override { return &qw; }
    Tensor* weight_tensor() override { return &w; }
    std::size_t fanin_per_output() const override;
};

class LinearLayer : public Layer {
  public:
    std::size_t in_features, out_features;
    Tensor w;  // [out, in]
    Tensor bias;
    QuantizedWeight qw;
    std::unique_ptr<ActQuantizer> act;

    Value forward(ForwardCtx& ctx, Value x) override;
    void collect_params(std::vector<ParamInfo>& out) override;
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) override;
    QuantizedWeight* weight_quantizer() override { return &qw; }
    Tensor* weight_tensor() override { return &w; }
    std::size_t fanin_per_output() const override { return in_features; }
};

class BatchNormLayer : public Layer {
  public:
    NormStats stats;

    Value forward(ForwardCtx& ctx, Value x) override;
    void collect_params(std::vector<ParamInfo>& out) override;
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) override;
};

class ActivationLayer : public Layer {
  public:
    bool clipped6 = false;
    Value forward(ForwardCtx& ctx, Value x) override;
};

class ResidualBlockLayer : public Layer {
  public:
    std::vector<std::unique_ptr<Layer>> body;
    bool skip = false;

    Value forward(ForwardCtx& ctx, Value x) override;
    void collect_params(std::vector<ParamInfo>& out) override;
    void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) override;
};

class Model {
  public:
    std::vector<std::unique_ptr<Layer>> layers;
    std::size_t in_ch = 1, in_h = 16, in_w = 16;
    std::size_t num_classes = 0;

    Value forward(ForwardCtx& ctx, Value x);
    std::vector<ParamInfo> params();
    std::vector<std::pair<std::string, Tensor*>> state_tensors();  // params + extras
    void for_each_layer(const std::function<void(Layer&)>& fn);
    std::vector<ConvLayer*> conv_layers();
    std::vector<BatchNormLayer*> bn_layers();
    // Layers with a weight quantizer, in forward order.
    std::vector<Layer*> quantized_layers();
};

// Validates the LayerSpec list, applies the quantization wiring rules (weight
// quantizer on every weight, activation quantizer on every non-BN layer
// input with act bits > 0, first and last weights forced to 8 bits) and
// initializes weights Kaiming-uniform from the seed.
Model build_model(const std::vector<LayerSpec>& specs, std::size_t in_ch, std::size_t in_h,
                  std::size_t in_w, std::uint64_t seed);

// Desk-scale model zoo.
std::vector<LayerSpec> toy_dwnet_specs(std::size_t in_ch, std::size_t classes, int weight_bits,
                                       int act_bits);
std::vector<LayerSpec> toy_resnet_specs(std::size_t in_ch, std::size_t classes, int weight_bits,
                                        int act_bits);

}  // namespace oscqat
