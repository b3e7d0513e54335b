// osc-qat: experiment runner for the oscillation-aware quantization lab.
//
// Subcommands: toy, train, reestimate-bn, sample, anneal, analyze.
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "oscqat/config.hpp"
#include "oscqat/toylab.hpp"
#include "oscqat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oscqat;

namespace {

// OSC_QAT_THREADS bounds parallelism of independent sweep points
// (0 = one thread per hardware core; unset = serial).
unsigned thread_budget() {
    const char* env = std::getenv("OSC_QAT_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 0) throw ConfigError("OSC_QAT_THREADS must be a non-negative integer");
    if (v == 0) return std::max(1u, std::thread::hardware_concurrency());
    return static_cast<unsigned>(v);
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const unsigned threads = std::min<std::size_t>(thread_budget(), count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) fn(i);
        });
    for (auto& th : pool) th.join();
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error(path.string() + ": cannot open for writing");
    f.precision(12);
    return f;
}

// Replays the integer trajectory through a fresh tracker so the CSV can
// carry the frequency EMA at every step.
void write_trajectory_csv(const ToyProblem& prob, const ToyTrajectory& traj,
                          const fs::path& path) {
    Tensor wi0;
    quantize_forward(Tensor::scalar(prob.w0), prob.quantizer(), &wi0);
    OscillationTracker tr = OscillationTracker::init(wi0, prob.tracker_m);
    std::ofstream f = open_out(path);
    f << "step,latent_w,w_int,f_ema\n";
    for (std::size_t t = 0; t < traj.latent.size(); ++t) {
        const Tensor wi = Tensor::scalar(static_cast<double>(traj.w_int[t]));
        tr.track_step(wi);
        tr.update_value_ema(wi);
        f << t << ',' << traj.latent[t] << ',' << traj.w_int[t] << ',' << tr.f[0] << '\n';
    }
}

struct ToyOptions {
    std::string estimator;  // empty = all experiment families
    std::string sweep;      // "", "frequency", "lr"
    double dampen = 0.0;
    double eta = 0.2;
    double w_star = 0.8;
    double w0 = 1.3;
    std::size_t iterations = 4000;
    double delta = 0.2, epsilon = 1e-3, temperature = 4.0;
    std::string out = ".";
};

ToyProblem base_problem(const ToyOptions& o, const std::string& estimator) {
    EstimatorConfig ec;
    ec.kind = estimator;
    ec.delta = o.delta;
    ec.epsilon = o.epsilon;
    ec.temperature = o.temperature;
    ToyProblem p;
    p.estimator = ec.to_kind();
    p.lambda = o.dampen;
    p.eta = o.eta;
    p.w_star = o.w_star;
    p.w0 = o.w0;
    p.iterations = o.iterations;
    return p;
}

void run_toy_trajectory(const ToyOptions& o, const std::string& estimator, double lambda,
                        const std::string& tag) {
    ToyProblem p = base_problem(o, estimator);
    p.lambda = lambda;
    const ToyTrajectory traj = simulate_trajectory(p);
    const fs::path path = fs::path(o.out) / ("toy_" + tag + ".csv");
    write_trajectory_csv(p, traj, path);
    const std::size_t burn = p.iterations / 10;
    std::cout << json{{"trajectory", path.string()},
                      {"estimator", estimator},
                      {"lambda", lambda},
                      {"frequency", measure_frequency(traj.w_int, burn)},
                      {"final_f_ema", traj.tracker.f[0]}}
                     .dump()
              << '\n';
}

void run_toy_frequency_sweep(const ToyOptions& o) {
    std::vector<double> ds;
    for (int i = 1; i <= 10; ++i) ds.push_back(0.05 * i);
    std::vector<double> freq(ds.size());
    parallel_for(ds.size(), [&](std::size_t i) {
        ToyProblem p = base_problem(o, "ste");
        p.w_star = 1.0 - ds[i];  // distance d below the upper grid level
        const ToyTrajectory traj = simulate_trajectory(p);
        freq[i] = measure_frequency(traj.w_int, p.iterations / 10);
    });
    const fs::path path = fs::path(o.out) / "toy_frequency_sweep.csv";
    std::ofstream f = open_out(path);
    f << "d_over_s,frequency\n";
    for (std::size_t i = 0; i < ds.size(); ++i) f << ds[i] << ',' << freq[i] << '\n';
    std::cout << json{{"sweep", path.string()}}.dump() << '\n';
}

void run_toy_lr_sweep(const ToyOptions& o) {
    const std::vector<double> lrs{0.4, 0.2, 0.1, 0.05};
    std::vector<AmplitudeResult> amp(lrs.size());
    std::vector<double> freq(lrs.size());
    parallel_for(lrs.size(), [&](std::size_t i) {
        ToyProblem p = base_problem(o, "ste");
        p.eta = lrs[i];
        const ToyTrajectory traj = simulate_trajectory(p);
        const std::size_t burn = p.iterations / 10;
        amp[i] = measure_amplitude(traj.latent, traj.w_int, burn);
        freq[i] = measure_frequency(traj.w_int, burn);
    });
    const fs::path path = fs::path(o.out) / "toy_lr_sweep.csv";
    std::ofstream f = open_out(path);
    f << "lr,amplitude,frequency\n";
    for (std::size_t i = 0; i < lrs.size(); ++i)
        f << lrs[i] << ',' << amp[i].amplitude << ',' << freq[i] << '\n';
    std::cout << json{{"sweep", path.string()}}.dump() << '\n';
}

void run_toy(const ToyOptions& o) {
    fs::create_directories(o.out);
    if (o.sweep == "frequency") return run_toy_frequency_sweep(o);
    if (o.sweep == "lr") return run_toy_lr_sweep(o);
    if (!o.sweep.empty()) throw ConfigError("unknown sweep: " + o.sweep);
    if (!o.estimator.empty()) {
        std::string tag = o.estimator;
        if (o.dampen > 0.0) tag += "_dampen";
        return run_toy_trajectory(o, o.estimator, o.dampen, tag);
    }
    // No flags: emit every experiment family.
    for (const char* est : {"ste", "ewgs", "dsq"}) run_toy_trajectory(o, est, 0.0, est);
    run_toy_trajectory(o, "ste", 1.0, "ste_dampen");
    run_toy_frequency_sweep(o);
    run_toy_lr_sweep(o);
}

ExperimentConfig load_config(const std::string& path, std::int64_t seed_override,
                             const std::string& out_override) {
    ExperimentConfig cfg = ExperimentConfig::from_file(path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (!out_override.empty()) cfg.out_dir = out_override;
    return cfg;
}

json kl_json(const std::vector<KlRecord>& recs) {
    json out = json::array();
    for (const KlRecord& r : recs)
        out.push_back({{"layer", r.layer}, {"max_kl", r.max_kl}, {"mean_kl", r.mean_kl}});
    return out;
}

void run_train(const ExperimentConfig& cfg) {
    TrainRun run(cfg);
    const TrainResult r = run.run(true);
    std::cout << json{{"out_dir", cfg.out_dir},
                      {"pre_bn_acc", r.pre_bn_acc},
                      {"post_bn_acc", r.post_bn_acc},
                      {"final_train_loss", r.final_train_loss},
                      {"osc_fraction", r.osc_fraction},
                      {"frozen_fraction", r.frozen_fraction}}
                     .dump()
              << '\n';
}

void run_reestimate(const ExperimentConfig& cfg, const std::string& checkpoint) {
    TrainRun run(cfg);
    run.prepare();
    run.restore(checkpoint);
    if (run.model.bn_layers().empty()) {
        std::cerr << "reestimate-bn: warning: model has no batch-norm layers; nothing to do\n";
        std::cout << json{{"reestimated", false}}.dump() << '\n';
        return;
    }
    const auto before = run.kl_report(cfg.bn_reestimate_batches);
    run.reestimate_bn(cfg.bn_reestimate_batches);
    const auto after = run.kl_report(cfg.bn_reestimate_batches);
    fs::create_directories(cfg.out_dir);
    const fs::path out = fs::path(cfg.out_dir) / "checkpoint.oqat";
    run.save(out.string());
    std::cout << json{{"reestimated", true},
                      {"checkpoint", out.string()},
                      {"kl_before", kl_json(before)},
                      {"kl_after", kl_json(after)}}
                     .dump()
              << '\n';
}

void run_sample(const ExperimentConfig& cfg, const std::string& checkpoint, std::size_t trials,
                std::uint64_t seed, std::size_t batches) {
    TrainRun run(cfg);
    run.prepare();
    run.restore(checkpoint);
    const auto sites = run.oscillating_sites();
    const double base = run.fixed_batch_loss(batches);
    std::vector<double> losses;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t t = 0; t < trials; ++t) {
        std::vector<int> levels(sites.size());
        for (std::size_t k = 0; k < sites.size(); ++k) {
            const OscillationTracker& tr = sites[k].layer->weight_quantizer()->tracker;
            const double p_up =
                std::clamp(tr.w_ema_int[sites[k].index] - sites[k].down, 0.0, 1.0);
            levels[k] = unif(rng) < p_up ? 1 : 0;
        }
        losses.push_back(sites.empty() ? base : run.loss_with_assignment(sites, levels, batches));
    }
    const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) /
                        static_cast<double>(losses.size());
    double var = 0.0;
    for (double l : losses) var += (l - mean) * (l - mean);
    var /= static_cast<double>(losses.size());
    std::cout << json{{"mode", "sample"},
                      {"checkpoint_loss", base},
                      {"num_oscillating", sites.size()},
                      {"trials", trials},
                      {"mean_loss", mean},
                      {"std_loss", std::sqrt(var)},
                      {"best_loss", *std::min_element(losses.begin(), losses.end())}}
                     .dump()
              << '\n';
}

void run_anneal(const ExperimentConfig& cfg, const std::string& checkpoint, std::size_t budget,
                std::uint64_t seed, std::size_t batches, bool apply) {
    TrainRun run(cfg);
    run.prepare();
    run.restore(checkpoint);
    const auto sites = run.oscillating_sites();
    const double base = run.fixed_batch_loss(batches);
    double final_loss = base;
    if (!sites.empty()) {
        std::vector<BinaryChoice> choices;
        for (const auto& s : sites) choices.push_back({s.index, s.down, s.up});
        const std::vector<int> init = run.current_assignment(sites);
        if (budget == 0) budget = 50 * sites.size();
        const std::vector<int> best = anneal_binary(
            choices, [&](const std::vector<int>& a) { return run.loss_with_assignment(sites, a, batches); },
            budget, seed, -1.0, &init);
        final_loss = run.loss_with_assignment(sites, best, batches);
        if (apply) {
            run.apply_assignment(sites, best);
            fs::create_directories(cfg.out_dir);
            run.save((fs::path(cfg.out_dir) / "checkpoint.oqat").string());
        }
    }
    std::cout << json{{"mode", "anneal"},
                      {"checkpoint_loss", base},
                      {"num_oscillating", sites.size()},
                      {"budget", budget},
                      {"annealed_loss", final_loss}}
                     .dump()
              << '\n';
}

void run_analyze(const ExperimentConfig& cfg, const std::string& checkpoint, std::size_t batches) {
    TrainRun run(cfg);
    run.prepare();
    run.restore(checkpoint);
    json layers = json::array();
    std::size_t osc = 0, frozen = 0, total = 0;
    for (Layer* l : run.model.quantized_layers()) {
        const QuantizedWeight* qw = l->weight_quantizer();
        const OscillationTracker& t = qw->tracker;
        std::size_t losc = 0, lfro = 0;
        double fsum = 0.0;
        for (std::size_t i = 0; i < t.f.size(); ++i) {
            fsum += t.f[i];
            if (t.frozen[i] != 0.0)
                ++lfro;
            else if (t.f[i] > cfg.osc_threshold)
                ++losc;
        }
        const auto n = static_cast<double>(t.f.size());
        layers.push_back({{"layer", l->name},
                          {"weights", t.f.size()},
                          {"fanin_per_output", l->fanin_per_output()},
                          {"osc_fraction", losc / n},
                          {"frozen_fraction", lfro / n},
                          {"mean_f", fsum / n}});
        osc += losc;
        frozen += lfro;
        total += t.f.size();
    }
    std::cout << json{{"layers", layers},
                      {"osc_fraction", total ? static_cast<double>(osc) / total : 0.0},
                      {"frozen_fraction", total ? static_cast<double>(frozen) / total : 0.0},
                      {"kl", kl_json(run.kl_report(batches))},
                      {"eval_acc", run.evaluate_accuracy(true)}}
                     .dump()
              << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantization-aware-training oscillation laboratory"};
    app.require_subcommand(1);

    ToyOptions toy;
    CLI::App* toy_cmd = app.add_subcommand("toy", "1D toy-problem trajectories and sweeps");
    toy_cmd->add_option("--estimator", toy.estimator, "ste|ewgs|psg|dsq (default: all families)");
    toy_cmd->add_option("--sweep", toy.sweep, "frequency|lr");
    toy_cmd->add_option("--dampen", toy.dampen, "dampening strength lambda");
    toy_cmd->add_option("--eta", toy.eta, "learning rate");
    toy_cmd->add_option("--w-star", toy.w_star, "optimum");
    toy_cmd->add_option("--w0", toy.w0, "initial latent weight");
    toy_cmd->add_option("--iterations", toy.iterations, "GD steps");
    toy_cmd->add_option("--delta", toy.delta, "EWGS delta");
    toy_cmd->add_option("--epsilon", toy.epsilon, "PSG epsilon");
    toy_cmd->add_option("--temperature", toy.temperature, "DSQ temperature");
    toy_cmd->add_option("--out", toy.out, "output directory");

    std::string config_path, out_override, checkpoint;
    std::int64_t seed_override = -1;
    std::size_t trials = 100, budget = 0, batches = 10;
    std::int64_t tool_seed = -1;
    bool apply = false;

    auto add_common = [&](CLI::App* cmd, bool needs_checkpoint) {
        cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
        cmd->add_option("--seed", seed_override, "override config seed");
        cmd->add_option("--out", out_override, "override output directory");
        if (needs_checkpoint)
            cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    };

    CLI::App* train_cmd = app.add_subcommand("train", "full QAT pipeline");
    add_common(train_cmd, false);
    CLI::App* re_cmd = app.add_subcommand("reestimate-bn", "re-estimate BN statistics");
    add_common(re_cmd, true);
    CLI::App* sample_cmd = app.add_subcommand("sample", "stochastic rounding of oscillating weights");
    add_common(sample_cmd, true);
    sample_cmd->add_option("--trials", trials, "number of stochastic samples");
    sample_cmd->add_option("--sample-seed", tool_seed, "sampler RNG seed (default: config seed)");
    sample_cmd->add_option("--batches", batches, "fixed batches for the loss");
    CLI::App* anneal_cmd = app.add_subcommand("anneal", "binary optimization of oscillating weights");
    add_common(anneal_cmd, true);
    anneal_cmd->add_option("--budget", budget, "proposal budget (0 = 50x oscillating weights)");
    anneal_cmd->add_option("--anneal-seed", tool_seed, "annealer RNG seed (default: config seed)");
    anneal_cmd->add_option("--batches", batches, "fixed batches for the loss");
    anneal_cmd->add_flag("--apply", apply, "write the optimized checkpoint to the output dir");
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "oscillation/KL report from a checkpoint");
    add_common(analyze_cmd, true);
    analyze_cmd->add_option("--batches", batches, "batches for KL estimation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (toy_cmd->parsed()) {
            run_toy(toy);
            return 0;
        }
        const ExperimentConfig cfg = load_config(config_path, seed_override, out_override);
        const std::uint64_t rng_seed =
            tool_seed >= 0 ? static_cast<std::uint64_t>(tool_seed) : cfg.seed;
        if (train_cmd->parsed())
            run_train(cfg);
        else if (re_cmd->parsed())
            run_reestimate(cfg, checkpoint);
        else if (sample_cmd->parsed())
            run_sample(cfg, checkpoint, trials, rng_seed, batches);
        else if (anneal_cmd->parsed())
            run_anneal(cfg, checkpoint, budget, rng_seed, batches, apply);
        else if (analyze_cmd->parsed())
            run_analyze(cfg, checkpoint, batches);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
