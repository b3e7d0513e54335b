#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "oscqat/checkpoint.hpp"
#include "oscqat/config.hpp"
#include "oscqat/dataset.hpp"
#include "oscqat/nets.hpp"
#include "oscqat/oscillation.hpp"

namespace oscqat {

struct KlRecord {
    std::string layer;
    double max_kl = 0.0;
    double mean_kl = 0.0;
};

struct TrainResult {
    double pre_bn_acc = 0.0;
    double post_bn_acc = 0.0;
    double final_train_loss = 0.0;
    double osc_fraction = 0.0;     // f > osc_threshold among unfrozen weights
    double frozen_fraction = 0.0;
    std::vector<KlRecord> kl_before, kl_after;
};

// One experiment: dataset + model + the full QAT pipeline. Also the
// substrate for the post-training subcommands (re-estimation, sampling,
// annealing), which reconstruct a run from its checkpoint.
class TrainRun {
  public:
    explicit TrainRun(ExperimentConfig config);

    // Loads the dataset and builds the (untrained) model.
    void prepare();

    // Full pipeline: FP pretrain, quantizer init, QAT with the configured
    // remedy, BN re-estimation. Writes metrics/checkpoint/config to
    // cfg.out_dir when write_artifacts is set.
    TrainResult run(bool write_artifacts = true);

    double evaluate_accuracy(bool quantize);
    // Eval-mode cross-entropy over the leading train batches (the fixed
    // batch set used by sampling/annealing comparisons).
    double fixed_batch_loss(std::size_t num_batches);

    // Exact per-channel stats of every BN layer's input over `batches`
    // deterministic re-estimation batches.
    std::unordered_map<std::string, std::pair<Tensor, Tensor>> population_bn_stats(
        std::size_t batches);
    std::vector<KlRecord> kl_report(std::size_t batches);
    // Replaces running BN stats with the population aggregates. Returns
    // false (no-op) when the model has no BN layers.
    bool reestimate_bn(std::size_t batches);

    // One oscillating weight and its two candidate integer levels.
    struct OscSite {
        Layer* layer = nullptr;
        std::size_t index = 0;
        double down = 0.0;
        double up = 0.0;
    };
    std::vector<OscSite> oscillating_sites();
    // Closest levels to the current integer values, as an anneal start.
    std::vector<int> current_assignment(const std::vector<OscSite>& sites);
    double loss_with_assignment(const std::vector<OscSite>& sites,
                                const std::vector<int>& levels, std::size_t batches);
    void apply_assignment(const std::vector<OscSite>& sites, const std::vector<int>& levels);

    void enable_tracking();
    void save(const std::string& path);
    // Requires prepare(); rebuilds quantizer/tracker state from the file.
    void restore(const std::string& path);

    ExperimentConfig cfg;
    Dataset train_set, eval_set;
    Model model;
    TrainResult result;

  private:
    bool prepared_ = false;
    std::pair<Tensor, std::vector<int>> reestimation_batch(std::size_t i) const;
    double train_epoch(std::size_t epoch, bool quantize, SgdState& opt, std::size_t& step,
                       const CosineSchedule* lr_s, const CosineSchedule* lambda_s,
                       const CosineSchedule* fth_s, std::ostream* metrics);
    void sync_quantizer_scales();
    std::vector<std::pair<std::string, Tensor>> snapshot_state();
};

}  // namespace oscqat
