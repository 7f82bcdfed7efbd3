#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "json.hpp"

#include "fixnoise/config.hpp"
#include "fixnoise/domains.hpp"
#include "fixnoise/metrics.hpp"
#include "fixnoise/trainer.hpp"

namespace fixnoise {

inline std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_file_bytes(path, j.dump(2) + "\n"); }

/// Opens a JSONL log; training hooks write one record per logged step.
class JsonlLog {
public:
    explicit JsonlLog(const std::string& path) : out_(path, std::ios::trunc) {
        if (!out_) throw IoError("cannot write " + path);
    }
    std::ostream* stream() { return &out_; }

private:
    std::ofstream out_;
};

/// Loads a dataset and stacks it into one [N x 3 x R x R] batch.
inline Tensor load_dataset_batch(const std::string& path) { return stack_images(load_dataset(path).images); }

struct PipelineOutputs {
    std::string source_data;
    std::string target_data;
    std::string source_ckpt;
    std::string target_ckpt;
    std::string report_json;
    std::string report_csv;
    MetricReport report;
};

/// dataset -> pretrain -> transfer -> eval, everything under cfg.out.
inline PipelineOutputs run_pipeline(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
    cfg.validate();
    ensure_dir(cfg.out);
    write_json(join_path(cfg.out, "effective_config.json"), cfg);
    const auto res = static_cast<std::size_t>(cfg.generator.final_resolution);
    auto say = [&](const std::string& s) {
        if (progress != nullptr) *progress << s << std::endl;
    };

    PipelineOutputs out;
    out.source_data = join_path(cfg.out, "data/source");
    out.target_data = join_path(cfg.out, "data/target");
    generate_domain_dataset(domain_preset(cfg.dataset.source_preset, res), cfg.dataset.seed, cfg.dataset.source_count,
                            out.source_data);
    generate_domain_dataset(domain_preset(cfg.dataset.target_preset, res), cfg.dataset.seed, cfg.dataset.target_count,
                            out.target_data);
    say("datasets written under " + join_path(cfg.out, "data"));

    const Tensor source_images = load_dataset_batch(out.source_data);
    const Tensor target_images = load_dataset_batch(out.target_data);

    out.source_ckpt = join_path(cfg.out, "source.fxnz");
    {
        JsonlLog log(join_path(cfg.out, "source_metrics.jsonl"));
        TrainHooks hooks;
        hooks.metrics_log = log.stream();
        hooks.snapshot_dir = cfg.out;
        save_checkpoint(pretrain_source(cfg.generator, cfg.source_train, source_images, hooks, cfg.anchor_zero), out.source_ckpt);
    }
    say("source checkpoint " + out.source_ckpt);

    const Checkpoint source = load_checkpoint(out.source_ckpt);
    out.target_ckpt = join_path(cfg.out, "target.fxnz");
    {
        JsonlLog log(join_path(cfg.out, "transfer_metrics.jsonl"));
        TrainHooks hooks;
        hooks.metrics_log = log.stream();
        hooks.snapshot_dir = cfg.out;
        save_checkpoint(transfer(cfg.transfer, source, target_images, hooks, sha256_file(out.source_ckpt)), out.target_ckpt);
    }
    say("target checkpoint " + out.target_ckpt);

    out.report = eval_protocol(generator_from_checkpoint(source), generator_from_checkpoint(load_checkpoint(out.target_ckpt)),
                               target_images, cfg.metrics);
    out.report_json = join_path(cfg.out, "report.json");
    out.report_csv = join_path(cfg.out, "report.csv");
    write_json(out.report_json, out.report);
    write_file_bytes(out.report_csv, out.report.to_csv());
    say("report " + out.report_csv);
    return out;
}

}  // namespace fixnoise
