#pragma once

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fixnoise/config.hpp"
#include "fixnoise/gradsuite.hpp"
#include "fixnoise/grid.hpp"
#include "fixnoise/pipeline.hpp"
#include "fixnoise/png.hpp"
#include "fixnoise/surgery.hpp"

namespace fixnoise {

namespace cli {

/// Options shared by the training verbs; unset values keep the config file's.
struct TrainOverrides {
    std::optional<std::uint64_t> images;
    std::optional<int> batch;
    std::optional<std::uint64_t> seed;
};

inline void apply(TrainConfig& t, const TrainOverrides& o) {
    if (o.images) t.total_images = *o.images;
    if (o.batch) t.batch_size = *o.batch;
    if (o.seed) t.seed = *o.seed;
}

inline ExperimentConfig base_config(const std::string& config_path) {
    return config_path.empty() ? default_experiment() : load_experiment_config(config_path);
}

/// Writes the effective config and the invoking command into `out`.
inline void echo(const std::string& out, const nlohmann::json& config, const std::string& verb, const nlohmann::json& inputs) {
    ensure_dir(out);
    write_json(join_path(out, "effective_config.json"), config);
    write_json(join_path(out, "command.json"), {{"verb", verb}, {"inputs", inputs}, {"threads", worker_threads()}});
}

inline Tensor dataset_or_synthesize(const std::string& data, const std::string& preset, std::size_t count, std::uint64_t seed,
                                    const GeneratorConfig& g, const std::string& fallback_dir, std::ostream& out) {
    if (!data.empty()) return load_dataset_batch(data);
    const auto res = static_cast<std::size_t>(g.final_resolution);
    generate_domain_dataset(domain_preset(preset, res), seed, count, fallback_dir);
    out << "dataset " << join_path(fallback_dir, kManifestName) << "\n";
    return load_dataset_batch(fallback_dir);
}

inline std::string ladder_help() {
    return "Swap index i counts synthesis layers in forward order, feature convolutions and tRGB layers interleaved: "
           "b4.conv1, b4.torgb, b8.conv0, b8.conv1, b8.torgb, b16.conv0, ... The first i layers (with their style "
           "affines and noise strengths) come from the source; i = 0 is the target.";
}

inline int fail(std::ostream& err, const std::string& msg, int code) {
    err << "error: " << msg << "\n";
    return code;
}

}  // namespace cli

/// Entry point of the `fixnoise` tool. Returns the process exit code:
/// 0 ok, 2 usage or config, 3 numeric failure, 4 I/O or format.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"FixNoise transfer learning for small style-based generators"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every verb");

    std::string config_path, out_dir, data, source_ckpt, target_ckpt, ckpt, preset, mode, space;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    int resolution = 16;
    double lambda_fm = 0.0;
    bool anchor_zero = false, ui2i = false, source_mapping = false;
    std::vector<double> alphas{1.0, 0.75, 0.5, 0.25, 0.0};
    std::size_t swap_i = 0;
    cli::TrainOverrides train;
    std::optional<std::uint64_t> eval_seed, extractor_seed;

    auto* ds = app.add_subcommand("dataset", "Render a synthetic domain into PNGs plus a manifest");
    ds->add_option("--preset", preset, "Domain preset")->required()->check(CLI::IsMember(domain_preset_names()));
    ds->add_option("--n", n, "Image count")->default_val(2000);
    ds->add_option("--seed", seed, "Content seed")->default_val(7);
    ds->add_option("--resolution", resolution, "Image side in pixels")->default_val(16);
    ds->add_option("--out", out_dir, "Output directory")->required();

    auto add_train_flags = [&](CLI::App* c) {
        c->add_option("--config", config_path, "Experiment config (JSON); flags override it");
        c->add_option("--data", data, "Dataset directory or manifest; synthesized from the config preset when omitted");
        c->add_option("--images", train.images, "Training budget in images");
        c->add_option("--batch", train.batch, "Minibatch size");
        c->add_option("--seed", train.seed, "Training seed");
        c->add_option("--out", out_dir, "Output directory")->required();
    };
    auto* ts = app.add_subcommand("train-source", "Pretrain a source generator");
    add_train_flags(ts);
    ts->add_flag("--anchor-zero", anchor_zero, "Use the all-zero anchor point instead of a seeded Gaussian draw");

    auto* tr = app.add_subcommand("transfer", "Fine-tune a source checkpoint on a target domain");
    add_train_flags(tr);
    tr->add_option("--source-ckpt", source_ckpt, "Source checkpoint")->required();
    tr->add_option("--mode", mode, "fixnoise | plain | freezeg=<i> | freeze-mapping");
    tr->add_option("--lambda-fm", lambda_fm, "Feature-matching weight");
    tr->add_option("--space", space, "Matching space: intermediate_h | rgb | image_space");

    auto* gen = app.add_subcommand("generate", "Render a noise-interpolation grid");
    gen->add_option("--ckpt", ckpt, "Generator checkpoint")->required();
    gen->add_option("--alphas", alphas, "Interpolation weights, comma separated")->delimiter(',');
    gen->add_option("--n", n, "Rows (latents)")->default_val(4);
    gen->add_option("--seed", seed, "Latent and noise seed")->default_val(0);
    gen->add_option("--source-ckpt", source_ckpt, "Adds the source's anchored output as the first column");
    gen->add_option("--out", out_dir, "Output directory")->required();

    auto* sw = app.add_subcommand("swap", "Layer-swap two checkpoints");
    sw->footer(cli::ladder_help());
    sw->add_option("--source-ckpt", source_ckpt, "Source checkpoint")->required();
    sw->add_option("--target-ckpt", target_ckpt, "Target checkpoint")->required();
    sw->add_option("--i", swap_i, "Number of ladder layers taken from the source")->required();
    sw->add_flag("--source-mapping", source_mapping, "Take the mapping network from the source");
    sw->add_flag("--ui2i", ui2i, "Compose with a freeze-mapping target (implies the source mapping)");
    sw->add_option("--out", out_dir, "Output directory")->required();

    auto* ev = app.add_subcommand("eval", "FID, KID and perceptual distance across the alpha grid");
    ev->add_option("--config", config_path, "Experiment config (JSON); its metrics block is the base");
    ev->add_option("--source-ckpt", source_ckpt, "Source checkpoint")->required();
    ev->add_option("--target-ckpt", target_ckpt, "Target checkpoint")->required();
    ev->add_option("--data", data, "Target dataset directory or manifest")->required();
    ev->add_option("--alphas", alphas, "Interpolation weights, comma separated")->delimiter(',');
    ev->add_option("--n", n, "Generated samples per alpha");
    ev->add_option("--seed", eval_seed, "Latent and noise seed");
    ev->add_option("--extractor-seed", extractor_seed, "Feature extractor seed");
    ev->add_option("--out", out_dir, "Output directory")->required();

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");

    auto* run = app.add_subcommand("run", "dataset -> train-source -> transfer -> eval in one go");
    run->add_option("--config", config_path, "Experiment config (JSON)");
    run->add_option("--out", out_dir, "Output directory (overrides the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << e.what() << "\n";
            return 0;
        }
        return cli::fail(err, e.what(), 2);
    }

    try {
        if (ds->parsed()) {
            if (n == 0) throw UsageError("--n must be >= 1");
            const DomainSpec spec = domain_preset(preset, static_cast<std::size_t>(resolution));
            cli::echo(out_dir, spec, "dataset", {{"preset", preset}, {"n", n}, {"seed", seed}, {"resolution", resolution}});
            generate_domain_dataset(spec, seed, n, out_dir);
            out << join_path(out_dir, kManifestName) << "\n";
            return 0;
        }
        if (ts->parsed()) {
            ExperimentConfig cfg = cli::base_config(config_path);
            cli::apply(cfg.source_train, train);
            if (anchor_zero) cfg.anchor_zero = true;
            cfg.out = out_dir;
            cfg.validate();
            cli::echo(out_dir, cfg, "train-source", {{"config", config_path}, {"data", data}});
            const Tensor images = cli::dataset_or_synthesize(data, cfg.dataset.source_preset, cfg.dataset.source_count,
                                                             cfg.dataset.seed, cfg.generator, join_path(out_dir, "data/source"), out);
            JsonlLog log(join_path(out_dir, "metrics.jsonl"));
            TrainHooks hooks;
            hooks.metrics_log = log.stream();
            hooks.snapshot_dir = out_dir;
            const std::string path = join_path(out_dir, "source.fxnz");
            save_checkpoint(pretrain_source(cfg.generator, cfg.source_train, images, hooks, cfg.anchor_zero), path);
            out << path << "\n";
            return 0;
        }
        if (tr->parsed()) {
            ExperimentConfig cfg = cli::base_config(config_path);
            cli::apply(cfg.transfer, train);
            if (!mode.empty()) cfg.transfer.mode = parse_mode(mode);
            if (tr->count("--lambda-fm") > 0) cfg.transfer.loss.lambda_fm = lambda_fm;
            if (!space.empty()) cfg.transfer.loss.matching_space = parse_matching_space(space);
            cfg.out = out_dir;
            const Checkpoint source = load_checkpoint(source_ckpt);
            cfg.generator = checkpoint_generator_config(source);
            cfg.validate();
            cli::echo(out_dir, cfg, "transfer", {{"config", config_path}, {"data", data}, {"source_ckpt", source_ckpt}});
            const Tensor images = cli::dataset_or_synthesize(data, cfg.dataset.target_preset, cfg.dataset.target_count,
                                                             cfg.dataset.seed, cfg.generator, join_path(out_dir, "data/target"), out);
            JsonlLog log(join_path(out_dir, "metrics.jsonl"));
            TrainHooks hooks;
            hooks.metrics_log = log.stream();
            hooks.snapshot_dir = out_dir;
            const std::string path = join_path(out_dir, "target.fxnz");
            save_checkpoint(transfer(cfg.transfer, source, images, hooks, sha256_file(source_ckpt)), path);
            out << path << "\n";
            return 0;
        }
        if (gen->parsed()) {
            const GeneratorModel g = generator_from_checkpoint(load_checkpoint(ckpt));
            std::optional<GeneratorModel> s;
            if (!source_ckpt.empty()) s = generator_from_checkpoint(load_checkpoint(source_ckpt));
            nlohmann::json inputs = {{"ckpt", ckpt}, {"alphas", alphas}, {"n", n}, {"seed", seed}, {"source_ckpt", source_ckpt}};
            const GridResult grid = interpolation_grid(g, alphas, n, seed, s ? &*s : nullptr);
            cli::echo(out_dir, inputs, "generate", inputs);
            ensure_dir(join_path(out_dir, "cells"));
            for (std::size_t r = 0; r < grid.rows; ++r) {
                for (std::size_t c = 0; c < grid.cols; ++c) {
                    char name[64];
                    std::snprintf(name, sizeof name, "cells/r%03zu_c%02zu.png", r, c);
                    write_png(join_path(out_dir, name), grid.cells[r * grid.cols + c]);
                }
            }
            write_json(join_path(out_dir, "grid.json"), {{"rows", grid.rows}, {"columns", grid.column_labels}});
            const std::string path = join_path(out_dir, "grid.png");
            write_png(path, tile_images(grid.cells, grid.rows, grid.cols));
            out << path << "\n";
            return 0;
        }
        if (sw->parsed()) {
            const Checkpoint s = load_checkpoint(source_ckpt), t = load_checkpoint(target_ckpt);
            const MappingFrom mapping = source_mapping ? MappingFrom::source : MappingFrom::target;
            const Checkpoint h = ui2i ? ui2i_compose(s, t, swap_i) : layer_swap_checkpoints(s, t, swap_i, mapping);
            cli::echo(out_dir, h.metadata.at("hybrid"), "swap",
                      {{"source_ckpt", source_ckpt}, {"target_ckpt", target_ckpt}, {"i", swap_i}, {"ui2i", ui2i},
                       {"source_mapping", source_mapping}});
            const std::string path = join_path(out_dir, "hybrid.fxnz");
            save_checkpoint(h, path);
            out << "source layers: " << h.metadata.at("hybrid").at("source_layers").dump() << "\n" << path << "\n";
            return 0;
        }
        if (ev->parsed()) {
            EvalConfig ecfg = cli::base_config(config_path).metrics;
            if (ev->count("--alphas") > 0) ecfg.alphas = alphas;
            if (ev->count("--n") > 0) ecfg.n = n;
            if (eval_seed) ecfg.seed = *eval_seed;
            if (extractor_seed) ecfg.extractor_seed = *extractor_seed;
            ecfg.validate();
            cli::echo(out_dir, ecfg, "eval", {{"config", config_path}, {"source_ckpt", source_ckpt}, {"target_ckpt", target_ckpt}, {"data", data}});
            const MetricReport report = eval_protocol(generator_from_checkpoint(load_checkpoint(source_ckpt)),
                                                      generator_from_checkpoint(load_checkpoint(target_ckpt)),
                                                      load_dataset_batch(data), ecfg);
            write_json(join_path(out_dir, "report.json"), report);
            write_file_bytes(join_path(out_dir, "report.csv"), report.to_csv());
            out << report.to_csv() << join_path(out_dir, "report.csv") << "\n";
            return 0;
        }
        if (gc->parsed()) {
            bool ok = true;
            out << std::left << std::setw(24) << "check" << std::setw(11) << "kind" << std::setw(14) << "max_rel_err"
                << std::setw(10) << "tol" << "result\n";
            for (const auto& row : run_gradient_suite()) {
                ok = ok && row.passed();
                out << std::left << std::setw(24) << row.name << std::setw(11) << row.kind << std::setw(14)
                    << std::setprecision(3) << row.result.max_rel_error << std::setw(10) << row.tolerance
                    << (row.passed() ? "PASS" : "FAIL") << "\n";
            }
            return ok ? 0 : 3;
        }
        if (run->parsed()) {
            ExperimentConfig cfg = cli::base_config(config_path);
            if (!out_dir.empty()) cfg.out = out_dir;
            cli::echo(cfg.out, cfg, "run", {{"config", config_path}});
            const PipelineOutputs res = run_pipeline(cfg, &out);
            out << res.report.to_csv();
            return 0;
        }
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        if (!e.snapshot_path().empty()) err << "snapshot: " << e.snapshot_path() << "\n";
        return e.exit_code();
    } catch (const Error& e) {
        return cli::fail(err, e.what(), e.exit_code());
    } catch (const std::filesystem::filesystem_error& e) {
        return cli::fail(err, e.what(), 4);
    }
    return cli::fail(err, "no verb given", 2);
}

}  // namespace fixnoise
