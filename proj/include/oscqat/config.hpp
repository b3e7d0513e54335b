#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "oscqat/dataset.hpp"
#include "oscqat/quantizer.hpp"

namespace oscqat {

// Invalid configuration; the CLI maps this to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EstimatorConfig {
    std::string kind = "ste";
    double delta = 0.2;        // ewgs
    double epsilon = 1e-3;     // psg
    double temperature = 4.0;  // dsq

    EstimatorKind to_kind() const;
};

struct RemedyConfig {
    enum Kind { None, Dampen, Freeze } kind = None;
    double lambda_start = 0.0, lambda_end = 1e-3;  // dampen
    double fth_start = 0.04, fth_end = 0.01;       // freeze
    double momentum = 0.01;                        // freeze integer/frequency EMA

    const char* name() const;
};

struct OptimizerConfig {
    double lr = 0.01;
    double lr_end = 0.0;  // cosine-annealed floor for the QAT phase
    double momentum = 0.9;
    std::size_t pretrain_epochs = 10;
    std::size_t qat_epochs = 20;
    std::size_t batch_size = 64;
};

struct DatasetConfig {
    std::string kind = "synthetic";  // "synthetic" | "idx"
    SyntheticSpec synthetic;
    std::size_t eval_samples = 512;
    std::string images_path, labels_path;  // idx
    std::string eval_images_path, eval_labels_path;
};

struct ExperimentConfig {
    std::string model = "toy_dwnet";  // "toy_dwnet" | "toy_resnet"
    DatasetConfig dataset;
    int weight_bits = 3;
    int act_bits = 0;  // 0 = weight-only quantization
    EstimatorConfig estimator;
    RemedyConfig remedy;
    OptimizerConfig optimizer;
    std::size_t bn_reestimate_batches = 50;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    double osc_threshold = 0.005;  // "oscillating" means f above this
    double tracker_momentum = 0.01;

    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig from_file(const std::string& path);
    nlohmann::json to_json() const;
};

}  // namespace oscqat
