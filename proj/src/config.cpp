#include "oscqat/config.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace oscqat {

using nlohmann::json;

EstimatorKind EstimatorConfig::to_kind() const {
    if (kind == "ste") return EstimatorKind::ste();
    if (kind == "ewgs") return EstimatorKind::ewgs(delta);
    if (kind == "psg") return EstimatorKind::psg(epsilon);
    if (kind == "dsq") return EstimatorKind::dsq(temperature);
    throw ConfigError("unknown estimator kind: " + kind);
}

const char* RemedyConfig::name() const {
    switch (kind) {
        case None: return "none";
        case Dampen: return "dampen";
        case Freeze: return "freeze";
    }
    return "?";
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    try {
        ExperimentConfig c;
        if (!j.contains("seed")) throw ConfigError("config: seed is mandatory");
        c.seed = j.at("seed").get<std::uint64_t>();
        c.model = get_or<std::string>(j, "model", c.model);
        if (c.model != "toy_dwnet" && c.model != "toy_resnet")
            throw ConfigError("config: unknown model " + c.model);
        c.weight_bits = get_or<int>(j, "weight_bits", c.weight_bits);
        c.act_bits = get_or<int>(j, "act_bits", c.act_bits);
        if (c.weight_bits < 2) throw ConfigError("config: weight_bits must be >= 2");
        if (c.act_bits < 0) throw ConfigError("config: act_bits must be >= 0");
        c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);
        c.bn_reestimate_batches =
            get_or<std::size_t>(j, "bn_reestimate_batches", c.bn_reestimate_batches);
        c.osc_threshold = get_or<double>(j, "osc_threshold", c.osc_threshold);
        c.tracker_momentum = get_or<double>(j, "tracker_momentum", c.tracker_momentum);

        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            c.dataset.kind = get_or<std::string>(d, "kind", c.dataset.kind);
            if (c.dataset.kind == "synthetic") {
                c.dataset.synthetic.classes =
                    get_or<std::size_t>(d, "classes", c.dataset.synthetic.classes);
                c.dataset.synthetic.height =
                    get_or<std::size_t>(d, "height", c.dataset.synthetic.height);
                c.dataset.synthetic.width =
                    get_or<std::size_t>(d, "width", c.dataset.synthetic.width);
                c.dataset.synthetic.samples =
                    get_or<std::size_t>(d, "train_samples", c.dataset.synthetic.samples);
                c.dataset.synthetic.noise = get_or<double>(d, "noise", c.dataset.synthetic.noise);
                c.dataset.synthetic.seed =
                    get_or<std::uint64_t>(d, "seed", c.dataset.synthetic.seed);
                c.dataset.eval_samples =
                    get_or<std::size_t>(d, "eval_samples", c.dataset.eval_samples);
            } else if (c.dataset.kind == "idx") {
                c.dataset.images_path = d.at("images").get<std::string>();
                c.dataset.labels_path = d.at("labels").get<std::string>();
                c.dataset.eval_images_path = d.at("eval_images").get<std::string>();
                c.dataset.eval_labels_path = d.at("eval_labels").get<std::string>();
            } else {
                throw ConfigError("config: unknown dataset kind " + c.dataset.kind);
            }
        }

        if (j.contains("estimator")) {
            const json& e = j.at("estimator");
            c.estimator.kind = get_or<std::string>(e, "kind", c.estimator.kind);
            c.estimator.delta = get_or<double>(e, "delta", c.estimator.delta);
            c.estimator.epsilon = get_or<double>(e, "epsilon", c.estimator.epsilon);
            c.estimator.temperature = get_or<double>(e, "temperature", c.estimator.temperature);
            c.estimator.to_kind();  // validate
        }

        if (j.contains("remedy")) {
            const json& r = j.at("remedy");
            const std::string kind = get_or<std::string>(r, "kind", "none");
            if (kind == "none") {
                c.remedy.kind = RemedyConfig::None;
            } else if (kind == "dampen") {
                c.remedy.kind = RemedyConfig::Dampen;
                c.remedy.lambda_start = get_or<double>(r, "lambda_start", c.remedy.lambda_start);
                c.remedy.lambda_end = get_or<double>(r, "lambda_end", c.remedy.lambda_end);
                if (c.remedy.lambda_start < 0.0 || c.remedy.lambda_end < 0.0)
                    throw ConfigError("config: dampening lambda must be >= 0");
            } else if (kind == "freeze") {
                c.remedy.kind = RemedyConfig::Freeze;
                c.remedy.fth_start = get_or<double>(r, "fth_start", c.remedy.fth_start);
                c.remedy.fth_end = get_or<double>(r, "fth_end", c.remedy.fth_end);
                c.remedy.momentum = get_or<double>(r, "momentum", c.remedy.momentum);
                if (c.remedy.fth_start <= 0.0 || c.remedy.fth_start >= 1.0 ||
                    c.remedy.fth_end <= 0.0 || c.remedy.fth_end >= 1.0)
                    throw ConfigError("config: freeze threshold must be in (0,1)");
            } else {
                throw ConfigError("config: unknown remedy kind " + kind);
            }
        }

        if (j.contains("optimizer")) {
            const json& o = j.at("optimizer");
            c.optimizer.lr = get_or<double>(o, "lr", c.optimizer.lr);
            c.optimizer.lr_end = get_or<double>(o, "lr_end", c.optimizer.lr_end);
            if (c.optimizer.lr_end < 0.0) throw ConfigError("config: lr_end must be >= 0");
            c.optimizer.momentum = get_or<double>(o, "momentum", c.optimizer.momentum);
            c.optimizer.pretrain_epochs =
                get_or<std::size_t>(o, "pretrain_epochs", c.optimizer.pretrain_epochs);
            c.optimizer.qat_epochs = get_or<std::size_t>(o, "qat_epochs", c.optimizer.qat_epochs);
            c.optimizer.batch_size = get_or<std::size_t>(o, "batch_size", c.optimizer.batch_size);
            if (c.optimizer.lr <= 0.0) throw ConfigError("config: lr must be positive");
            if (c.optimizer.batch_size < 2)
                throw ConfigError("config: batch_size must be >= 2 (batch norm)");
        }
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return from_json(j);
}

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["model"] = model;
    j["weight_bits"] = weight_bits;
    j["act_bits"] = act_bits;
    j["out_dir"] = out_dir;
    j["bn_reestimate_batches"] = bn_reestimate_batches;
    j["osc_threshold"] = osc_threshold;
    j["tracker_momentum"] = tracker_momentum;
    j["dataset"] = {{"kind", dataset.kind}};
    if (dataset.kind == "synthetic") {
        j["dataset"]["classes"] = dataset.synthetic.classes;
        j["dataset"]["height"] = dataset.synthetic.height;
        j["dataset"]["width"] = dataset.synthetic.width;
        j["dataset"]["train_samples"] = dataset.synthetic.samples;
        j["dataset"]["eval_samples"] = dataset.eval_samples;
        j["dataset"]["noise"] = dataset.synthetic.noise;
        j["dataset"]["seed"] = dataset.synthetic.seed;
    } else {
        j["dataset"]["images"] = dataset.images_path;
        j["dataset"]["labels"] = dataset.labels_path;
        j["dataset"]["eval_images"] = dataset.eval_images_path;
        j["dataset"]["eval_labels"] = dataset.eval_labels_path;
    }
    j["estimator"] = {{"kind", estimator.kind},
                      {"delta", estimator.delta},
                      {"epsilon", estimator.epsilon},
                      {"temperature", estimator.temperature}};
    j["remedy"] = {{"kind", remedy.name()}};
    if (remedy.kind == RemedyConfig::Dampen) {
        j["remedy"]["lambda_start"] = remedy.lambda_start;
        j["remedy"]["lambda_end"] = remedy.lambda_end;
    } else if (remedy.kind == RemedyConfig::Freeze) {
        j["remedy"]["fth_start"] = remedy.fth_start;
        j["remedy"]["fth_end"] = remedy.fth_end;
        j["remedy"]["momentum"] = remedy.momentum;
    }
    j["optimizer"] = {{"lr", optimizer.lr},
                      {"lr_end", optimizer.lr_end},
                      {"momentum", optimizer.momentum},
                      {"pretrain_epochs", optimizer.pretrain_epochs},
                      {"qat_epochs", optimizer.qat_epochs},
                      {"batch_size", optimizer.batch_size}};
    return j;
}

}  // namespace oscqat
