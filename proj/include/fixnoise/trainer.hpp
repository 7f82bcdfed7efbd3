#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixnoise/checkpoint.hpp"
#include "fixnoise/nets.hpp"
#include "fixnoise/objectives.hpp"

namespace fixnoise {

// ---------------------------------------------------------------------------
// Configuration

enum class TransferMode { plain, fixnoise, freeze_g, freeze_mapping };

struct ModeSpec {
    TransferMode mode = TransferMode::plain;
    int freeze_layers = 0;  // FreezeG(i): first i ladder layers

    bool operator==(const ModeSpec&) const = default;
};

inline std::string to_string(const ModeSpec& m) {
    switch (m.mode) {
        case TransferMode::plain: return "plain";
        case TransferMode::fixnoise: return "fixnoise";
        case TransferMode::freeze_g: return "freezeg=" + std::to_string(m.freeze_layers);
        case TransferMode::freeze_mapping: return "freeze-mapping";
    }
    return "?";
}

inline ModeSpec parse_mode(const std::string& s) {
    if (s == "plain") return {TransferMode::plain, 0};
    if (s == "fixnoise") return {TransferMode::fixnoise, 0};
    if (s == "freeze-mapping") return {TransferMode::freeze_mapping, 0};
    if (s.rfind("freezeg=", 0) == 0) {
        const std::string digits = s.substr(8);
        if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) {
            throw UsageError("freezeg needs a non-negative layer count, got '" + s + "'");
        }
        return {TransferMode::freeze_g, std::stoi(digits)};
    }
    throw UsageError("unknown mode '" + s + "' (expected fixnoise, plain, freezeg=<i> or freeze-mapping)");
}

struct TrainConfig {
    int batch_size = 16;
    std::uint64_t total_images = 200'000;
    double learning_rate = 0.0025;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double ema_halflife_images = 10'000;
    /// EMA half-life is capped at rampup * images_seen (0 disables the cap).
    double ema_rampup = 0.05;
    LossConfig loss;
    ModeSpec mode;
    std::uint64_t seed = 0;
    int log_interval = 10;

    std::uint64_t total_steps() const {
        return (total_images + static_cast<std::uint64_t>(batch_size) - 1) / static_cast<std::uint64_t>(batch_size);
    }

    void validate() const {
        if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
        if (total_images == 0) throw ConfigError("total_images must be positive");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(ema_halflife_images > 0.0)) throw ConfigError("ema_halflife_images must be positive");
        if (!(ema_rampup >= 0.0)) throw ConfigError("ema_rampup must be >= 0");
        if (mode.freeze_layers < 0) throw ConfigError("freeze layer count must be >= 0");
        if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
        loss.validate();
    }

    bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"batch_size", c.batch_size},
         {"total_images", c.total_images},
         {"learning_rate", c.learning_rate},
         {"adam_betas", {c.beta1, c.beta2}},
         {"adam_eps", c.adam_eps},
         {"ema_halflife_images", c.ema_halflife_images},
         {"ema_rampup", c.ema_rampup},
         {"loss", c.loss},
         {"mode", to_string(c.mode)},
         {"seed", c.seed},
         {"log_interval", c.log_interval}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const std::set<std::string> known = {"batch_size", "total_images", "learning_rate", "adam_betas",
                                                "adam_eps", "ema_halflife_images", "ema_rampup", "loss",
                                                "mode", "seed", "log_interval"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown training config key '" + key + "'");
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_images = j.value("total_images", c.total_images);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("adam_betas")) {
        const auto& b = j.at("adam_betas");
        if (!b.is_array() || b.size() != 2) throw ConfigError("adam_betas must be a two-element array");
        c.beta1 = b[0].get<double>();
        c.beta2 = b[1].get<double>();
    }
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.ema_halflife_images = j.value("ema_halflife_images", c.ema_halflife_images);
    c.ema_rampup = j.value("ema_rampup", c.ema_rampup);
    if (j.contains("loss")) c.loss = j.at("loss").get<LossConfig>();
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.validate();
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

/// Adam with bias correction. Parameters listed in `frozen` are skipped
/// entirely, so their payloads never change.
struct Adam {
    double lr = 0.0025;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double eps = 1e-8;
    std::uint64_t t = 0;
    ParameterStore m;
    ParameterStore v;

    static Adam for_params(const ParameterStore& params, double lr, double beta1, double beta2, double eps) {
        Adam a{lr, beta1, beta2, eps, 0, {}, {}};
        for (const auto& [name, p] : params) {
            a.m.add(name, Tensor::zeros(p.shape()));
            a.v.add(name, Tensor::zeros(p.shape()));
        }
        return a;
    }

    void step(ParameterStore& params, const std::set<std::string>& frozen = {}) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, p] : params) {
            if (frozen.count(name) || !p.has_grad()) continue;
            auto g = p.grad();
            auto mm = m.at(name).mutable_data();
            auto vv = v.at(name).mutable_data();
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
                vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
            }
        }
        quantize_f32(params);
        quantize_f32(m);
        quantize_f32(v);
    }
};

/// 0.5^(batch / halflife).
inline double ema_decay(double batch, double halflife_images) {
    if (std::isinf(halflife_images)) return 1.0;
    return std::pow(0.5, batch / halflife_images);
}

/// ema <- ema * decay + g * (1 - decay). Both endpoints are exact: decay 1
/// keeps ema, decay 0 copies g.
inline void ema_update(ParameterStore& ema, const ParameterStore& g, double decay, const std::set<std::string>& frozen = {}) {
    if (!ema.same_layout(g)) throw DimensionError("EMA and generator parameter sets differ");
    if (!(decay >= 0.0 && decay <= 1.0)) throw ContractError("EMA decay must lie in [0, 1]");
    auto it = g.begin();
    for (auto& [name, e] : ema) {
        const auto src = (it++)->second.data();
        if (frozen.count(name)) continue;
        auto dst = e.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = dst[i] * decay + src[i] * (1.0 - decay);
    }
    quantize_f32(ema);
}

// ---------------------------------------------------------------------------
// Training state and checkpoints

struct TrainState {
    TrainConfig config;
    GeneratorModel g;
    GeneratorModel g_ema;
    DiscriminatorModel d;
    Adam opt_g;
    Adam opt_d;
    std::uint64_t step = 0;
    std::uint64_t images_seen = 0;
    nlohmann::json provenance = nlohmann::json::object();
};

inline std::set<std::string> frozen_parameters(const GeneratorConfig& cfg, const ModeSpec& mode) {
    std::set<std::string> out;
    if (mode.mode == TransferMode::freeze_g) {
        const auto layers = synthesis_ladder(cfg).size();
        if (static_cast<std::size_t>(mode.freeze_layers) > layers) {
            throw ConfigError("freezeg=" + std::to_string(mode.freeze_layers) + " exceeds the " + std::to_string(layers) +
                              "-layer synthesis ladder");
        }
        for (std::size_t i = 0; i < static_cast<std::size_t>(mode.freeze_layers); ++i) {
            for (auto& n : ladder_parameter_names(cfg, i)) out.insert(n);
        }
    } else if (mode.mode == TransferMode::freeze_mapping) {
        for (auto& n : mapping_parameter_names(cfg)) out.insert(n);
    }
    return out;
}

inline Checkpoint state_to_checkpoint(const TrainState& s) {
    Checkpoint c;
    c.metadata = s.provenance;
    c.metadata["generator_config"] = s.g.config;
    c.metadata["anchor_seed"] = s.g.anchor_seed;
    c.metadata["anchor_zero"] = s.g.anchor_zero;
    c.metadata["train_config"] = s.config;
    c.metadata["mode"] = to_string(s.config.mode);
    c.metadata["step"] = s.step;
    c.metadata["images_seen"] = s.images_seen;
    c.metadata["opt_g_t"] = s.opt_g.t;
    c.metadata["opt_d_t"] = s.opt_d.t;
    c.metadata["reference_budget"] = {{"batch_size", 64}, {"images", "2000k-12000k"}};
    c.set_section("G", s.g.params.clone());
    c.set_section("G_ema", s.g_ema.params.clone());
    c.set_section("D", s.d.params.clone());
    c.set_section("G.adam_m", s.opt_g.m.clone());
    c.set_section("G.adam_v", s.opt_g.v.clone());
    c.set_section("D.adam_m", s.opt_d.m.clone());
    c.set_section("D.adam_v", s.opt_d.v.clone());
    return c;
}

inline GeneratorConfig checkpoint_generator_config(const Checkpoint& c) {
    if (!c.metadata.contains("generator_config")) throw ConfigError("checkpoint metadata lacks generator_config");
    return c.metadata.at("generator_config").get<GeneratorConfig>();
}

namespace detail {

inline void assign_store(ParameterStore& dst, const ParameterStore& src, const std::string& what) {
    if (!dst.same_layout(src)) throw ConfigError("checkpoint section " + what + " does not match the configured architecture");
    for (const auto& name : dst.names()) dst.copy_from(src, name);
}

}  // namespace detail

/// Generator stored in `section` ("G" or "G_ema"), with the checkpoint's anchor.
inline GeneratorModel generator_from_checkpoint(const Checkpoint& c, const std::string& section = "G_ema") {
    if (!c.metadata.contains("anchor_seed")) throw ConfigError("checkpoint metadata lacks anchor_seed");
    GeneratorModel g = GeneratorModel::create(checkpoint_generator_config(c), 0, c.metadata.at("anchor_seed").get<std::uint64_t>());
    g.anchor_zero = c.metadata.value("anchor_zero", false);
    detail::assign_store(g.params, c.section(section), section);
    return g;
}

inline DiscriminatorModel discriminator_from_checkpoint(const Checkpoint& c) {
    DiscriminatorModel d = DiscriminatorModel::create(checkpoint_generator_config(c), 0);
    detail::assign_store(d.params, c.section("D"), "D");
    return d;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainHooks {
    std::ostream* metrics_log = nullptr;  // JSONL, one record per logged step
    std::string snapshot_dir;             // NaN snapshots land here when set
    std::function<void(const nlohmann::json&)> on_log;
    std::function<void(const TrainState&)> on_checkpoint;
    std::uint64_t checkpoint_interval = 0;  // in steps; 0 disables
};

namespace detail {

/// Streams of one training run. Named streams are independent, so e.g.
/// computing the anchored term never shifts the latent draws.
struct TrainStreams {
    Rng latents;
    Rng noise;
    std::uint64_t data_seed;

    explicit TrainStreams(std::uint64_t seed)
        : latents(derive_seed(seed, "latents")), noise(derive_seed(seed, "noise")), data_seed(derive_seed(seed, "data_order")) {}
};

/// Epoch-wise shuffled index stream over the dataset.
class DataOrder {
public:
    DataOrder(std::uint64_t seed, std::size_t count) : seed_(seed), count_(count) {}

    std::size_t next() {
        if (pos_ == order_.size()) refill();
        return order_[pos_++];
    }

private:
    void refill() {
        order_.resize(count_);
        for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
        Rng rng(derive_seed(seed_, "epoch", epoch_++));
        rng.shuffle(order_);
        pos_ = 0;
    }

    std::uint64_t seed_;
    std::size_t count_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

inline Tensor gather_rows(const Tensor& data, const std::vector<std::size_t>& rows) {
    const std::size_t per = data.numel() / data.dim(0);
    std::vector<double> out;
    out.reserve(rows.size() * per);
    for (std::size_t r : rows) out.insert(out.end(), data.data().begin() + r * per, data.data().begin() + (r + 1) * per);
    Shape shape = data.shape();
    shape[0] = rows.size();
    return Tensor::from_data(std::move(shape), std::move(out));
}

inline void check_dataset(const Tensor& data, const GeneratorConfig& cfg) {
    const auto r = static_cast<std::size_t>(cfg.final_resolution);
    if (!data.defined() || data.rank() != 4 || data.dim(0) == 0) throw ConfigError("training dataset is empty");
    if (data.dim(1) != 3 || data.dim(2) != r || data.dim(3) != r) {
        throw ConfigError("dataset images " + shape_str(data.shape()) + " do not match resolution " + std::to_string(r));
    }
}

inline std::string write_snapshot(const TrainState& s, const TrainHooks& hooks, const nlohmann::json& losses) {
    if (hooks.snapshot_dir.empty()) return {};
    std::filesystem::create_directories(hooks.snapshot_dir);
    Checkpoint c = state_to_checkpoint(s);
    c.metadata["nan_abort"] = losses;
    const std::string path = (std::filesystem::path(hooks.snapshot_dir) / "nan_snapshot.fxnz").string();
    save_checkpoint(c, path);
    return path;
}

}  // namespace detail

/// Shared adversarial loop for source pretraining and transfer. `source`
/// is G_s (required by FixNoise, optional elsewhere for logging L_fm).
inline TrainState run_training(TrainState state, const Tensor& dataset, const GeneratorModel* source, const TrainHooks& hooks) {
    const auto& cfg = state.config;
    cfg.validate();
    detail::check_dataset(dataset, state.g.config);
    const bool fixnoise = cfg.mode.mode == TransferMode::fixnoise;
    if (fixnoise && source == nullptr) throw ConfigError("fixnoise mode requires a source generator");
    const auto frozen = frozen_parameters(state.g.config, cfg.mode);
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    const double lambda = cfg.loss.lambda_fm;

    detail::TrainStreams streams(cfg.seed);
    detail::DataOrder order(streams.data_seed, dataset.dim(0));
    const std::uint64_t steps = cfg.total_steps();

    // One generator step, one discriminator step (lazy R1), one EMA update.
    auto train_step = [&](nlohmann::json& record, bool log_now) {
        const Tensor z = sample_latents(streams.latents, state.g.config, batch);
        const NoiseBundle noise = random_noise(streams.noise, state.g, batch);
        state.g.params.zero_grad();
        state.d.params.zero_grad();
        const Tensor fake = generate(state.g, z, noise).image;
        const Tensor g_adv = adversarial_g_loss(discriminate(state.d, fake));
        Tensor g_total = g_adv;
        std::optional<double> fm_value;
        if (fixnoise && lambda > 0.0) {
            const Tensor fm = fixnoise_fm_term(*source, state.g, z, cfg.loss.matching_space);
            fm_value = fm.item();
            g_total = add(g_adv, scale(fm, lambda));
        } else if (source != nullptr && log_now) {
            NoGradGuard no_grad;
            fm_value = fixnoise_fm_term(*source, state.g, z, cfg.loss.matching_space).item();
        }
        record["g_adv"] = g_adv.item();
        record["g_total"] = g_total.item();
        if (fm_value) record["fm_loss"] = *fm_value;
        if (!std::isfinite(g_total.item())) throw NumericError("non-finite generator loss");
        g_total.backward();
        state.opt_g.step(state.g.params, frozen);

        state.d.params.zero_grad();
        Tensor fake_d;
        {
            NoGradGuard no_grad;
            const Tensor zd = sample_latents(streams.latents, state.g.config, batch);
            fake_d = generate(state.g, zd, random_noise(streams.noise, state.g, batch)).image;
        }
        std::vector<std::size_t> rows(batch);
        for (auto& r : rows) r = order.next();
        const Tensor real = detail::gather_rows(dataset, rows);
        Tensor d_loss = adversarial_d_loss(discriminate(state.d, real), discriminate(state.d, fake_d));
        record["d_loss"] = d_loss.item();
        if (cfg.loss.r1_gamma > 0.0 && state.step % static_cast<std::uint64_t>(cfg.loss.r1_interval) == 0) {
            const Tensor r1 = r1_penalty(state.d, real, cfg.loss.r1_gamma);
            record["r1"] = r1.item();
            d_loss = add(d_loss, scale(r1, static_cast<double>(cfg.loss.r1_interval)));
        }
        if (!std::isfinite(d_loss.item())) throw NumericError("non-finite discriminator loss");
        d_loss.backward();
        state.opt_d.step(state.d.params);

        state.images_seen += batch;
        double halflife = cfg.ema_halflife_images;
        if (cfg.ema_rampup > 0.0) halflife = std::min(halflife, static_cast<double>(state.images_seen) * cfg.ema_rampup);
        ema_update(state.g_ema.params, state.g.params, ema_decay(static_cast<double>(batch), halflife), frozen);
        ++state.step;
    };

    for (std::uint64_t step = 0; step < steps; ++step) {
        nlohmann::json record = {{"step", state.step}, {"images", state.images_seen}};
        const bool log_now = step % static_cast<std::uint64_t>(cfg.log_interval) == 0 || step + 1 == steps;
        try {
            train_step(record, log_now);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step),
                               detail::write_snapshot(state, hooks, record));
        }
        if (log_now) {
            if (hooks.metrics_log != nullptr) *hooks.metrics_log << record.dump() << '\n';
            if (hooks.on_log) hooks.on_log(record);
        }
        if (hooks.checkpoint_interval != 0 && state.step % hooks.checkpoint_interval == 0 && hooks.on_checkpoint) {
            hooks.on_checkpoint(state);
        }
    }
    if (hooks.metrics_log != nullptr) hooks.metrics_log->flush();
    return state;
}

namespace detail {

/// The discriminator optimizer absorbs lazy regularization by scaling lr
/// and betas with interval / (interval + 1).
inline Adam discriminator_adam(const TrainConfig& cfg, const ParameterStore& params) {
    const double ratio = static_cast<double>(cfg.loss.r1_interval) / static_cast<double>(cfg.loss.r1_interval + 1);
    return Adam::for_params(params, cfg.learning_rate * ratio, std::pow(cfg.beta1, ratio), std::pow(cfg.beta2, ratio), cfg.adam_eps);
}

}  // namespace detail

/// Trains a source generator from scratch. The anchor recorded in the
/// checkpoint is a seeded Gaussian draw, or all zeros with `anchor_zero`.
inline Checkpoint pretrain_source(const GeneratorConfig& gcfg, TrainConfig cfg, const Tensor& dataset, const TrainHooks& hooks = {},
                                  bool anchor_zero = false) {
    cfg.mode = {};
    cfg.validate();
    TrainState s;
    s.config = cfg;
    s.g = GeneratorModel::create(gcfg, derive_seed(cfg.seed, "init", 0), derive_seed(cfg.seed, "anchor"));
    s.g.anchor_zero = anchor_zero;
    quantize_f32(s.g.params);
    s.g_ema = s.g.clone();
    s.d = DiscriminatorModel::create(gcfg, derive_seed(cfg.seed, "init", 1));
    quantize_f32(s.d.params);
    s.opt_g = Adam::for_params(s.g.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    s.opt_d = detail::discriminator_adam(cfg, s.d.params);
    s.provenance = {{"role", "source"}, {"dataset_images", dataset.defined() && dataset.rank() > 0 ? dataset.dim(0) : 0}};
    return state_to_checkpoint(run_training(std::move(s), dataset, nullptr, hooks));
}

/// Fine-tunes a source checkpoint on a target dataset. G, G_ema and D start
/// from the source (G and G_ema from the source's G_ema, which is also the
/// fixed G_s); optimizer moments start at zero.
inline Checkpoint transfer(TrainConfig cfg, const Checkpoint& source_ckpt, const Tensor& target_dataset, const TrainHooks& hooks = {},
                           const std::string& source_hash = {}) {
    cfg.validate();
    if (!source_ckpt.metadata.contains("anchor_seed")) throw ConfigError("source checkpoint has no anchor_seed");
    const GeneratorModel source = generator_from_checkpoint(source_ckpt, "G_ema");
    (void)frozen_parameters(source.config, cfg.mode);
    TrainState s;
    s.config = cfg;
    s.g = source.clone();
    s.g_ema = source.clone();
    s.d = discriminator_from_checkpoint(source_ckpt);
    s.opt_g = Adam::for_params(s.g.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    s.opt_d = detail::discriminator_adam(cfg, s.d.params);
    s.provenance = {{"role", "target"},
                    {"source_hash", source_hash},
                    {"source_step", source_ckpt.metadata.value("step", std::uint64_t{0})},
                    {"dataset_images", target_dataset.defined() && target_dataset.rank() > 0 ? target_dataset.dim(0) : 0}};
    return state_to_checkpoint(run_training(std::move(s), target_dataset, &source, hooks));
}

}  // namespace fixnoise
