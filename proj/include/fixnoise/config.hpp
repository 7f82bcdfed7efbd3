#pragma once

#include <set>
#include <string>

#include "json.hpp"

#include "fixnoise/domains.hpp"
#include "fixnoise/metrics.hpp"
#include "fixnoise/nets.hpp"
#include "fixnoise/trainer.hpp"

namespace fixnoise {

struct DatasetSettings {
    std::string source_preset = "similar-source";
    std::string target_preset = "similar-target";
    std::size_t source_count = 2000;
    std::size_t target_count = 1000;
    std::uint64_t seed = 7;

    bool operator==(const DatasetSettings&) const = default;
};

/// Everything one pipeline run needs. `out` is the output root; every file a
/// command writes goes below it.
struct ExperimentConfig {
    DatasetSettings dataset;
    GeneratorConfig generator;
    TrainConfig source_train;
    TrainConfig transfer;
    EvalConfig metrics;
    bool anchor_zero = false;
    std::string out = "runs/default";

    void validate() const {
        generator.validate();
        source_train.validate();
        transfer.validate();
        metrics.validate();
        domain_preset(dataset.source_preset, static_cast<std::size_t>(generator.final_resolution));
        domain_preset(dataset.target_preset, static_cast<std::size_t>(generator.final_resolution));
        if (dataset.source_count == 0 || dataset.target_count == 0) throw ConfigError("dataset counts must be >= 1");
        if (dataset.target_count < metrics.feature_dim + 1) {
            throw ConfigError("target_count must be >= feature_dim + 1 = " + std::to_string(metrics.feature_dim + 1) +
                              " for target FID");
        }
        if (out.empty()) throw ConfigError("output root is empty");
    }

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const DatasetSettings& d) {
    j = {{"source_preset", d.source_preset},
         {"target_preset", d.target_preset},
         {"source_count", d.source_count},
         {"target_count", d.target_count},
         {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSettings& d) {
    detail::reject_unknown(j, {"source_preset", "target_preset", "source_count", "target_count", "seed"}, "dataset");
    d.source_preset = j.value("source_preset", d.source_preset);
    d.target_preset = j.value("target_preset", d.target_preset);
    d.source_count = j.value("source_count", d.source_count);
    d.target_count = j.value("target_count", d.target_count);
    d.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"dataset", c.dataset},     {"generator", c.generator}, {"source_train", c.source_train},
         {"transfer", c.transfer},   {"metrics", c.metrics},     {"anchor_zero", c.anchor_zero},
         {"out", c.out}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    detail::reject_unknown(j, {"dataset", "generator", "source_train", "transfer", "metrics", "anchor_zero", "out"},
                           "experiment config");
    try {
        if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
        if (j.contains("generator")) j.at("generator").get_to(c.generator);
        if (j.contains("source_train")) j.at("source_train").get_to(c.source_train);
        if (j.contains("transfer")) j.at("transfer").get_to(c.transfer);
        if (j.contains("metrics")) {
            detail::reject_unknown(j.at("metrics"), {"alphas", "n", "seed", "extractor_seed", "feature_dim", "chunk"}, "metrics");
            j.at("metrics").get_to(c.metrics);
        }
        c.anchor_zero = j.value("anchor_zero", c.anchor_zero);
        c.out = j.value("out", c.out);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
    c.validate();
}

/// Desk defaults: 16x16 "similar" pair, FixNoise transfer, ~10 minutes on
/// one core.
inline ExperimentConfig default_experiment() {
    ExperimentConfig c;
    c.generator.final_resolution = 16;
    c.generator.z_dim = 32;
    c.generator.w_dim = 32;
    c.generator.channels = {{4, 32}, {8, 32}, {16, 16}};
    c.generator.noise_strength_init = 0.1;
    for (TrainConfig* t : {&c.source_train, &c.transfer}) {
        t->ema_halflife_images = 2000;
        t->log_interval = 100;
    }
    c.source_train.total_images = 60'000;
    c.transfer.total_images = 30'000;
    c.transfer.mode = parse_mode("fixnoise");
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    // Missing keys keep their desk defaults.
    ExperimentConfig c = default_experiment();
    from_json(j, c);
    return c;
}

}  // namespace fixnoise
