#pragma once

#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixnoise/checkpoint.hpp"
#include "fixnoise/nets.hpp"
#include "fixnoise/trainer.hpp"

namespace fixnoise {

enum class MappingFrom { target, source };

/// Swap indices run over the synthesis ladder in forward order
/// (b4.conv1, b4.torgb, b8.conv0, b8.conv1, b8.torgb, ...); i in [0, size].
inline std::size_t swappable_layers(const GeneratorConfig& cfg) { return synthesis_ladder(cfg).size(); }

/// Parameters the hybrid takes from the source for a given i. Grows by
/// inclusion with i.
inline std::set<std::string> source_owned_parameters(const GeneratorConfig& cfg, std::size_t i, MappingFrom mapping) {
    if (i > swappable_layers(cfg)) {
        throw ConfigError("swap index " + std::to_string(i) + " exceeds the " + std::to_string(swappable_layers(cfg)) +
                          "-layer ladder");
    }
    std::set<std::string> out;
    for (std::size_t k = 0; k < i; ++k)
        for (auto& n : ladder_parameter_names(cfg, k)) out.insert(n);
    if (mapping == MappingFrom::source)
        for (auto& n : mapping_parameter_names(cfg)) out.insert(n);
    return out;
}

/// First i ladder layers (with their style affines) from `source`, the rest
/// and, by default, the mapping network from `target`. The hybrid keeps the
/// target's anchor.
inline GeneratorModel layer_swap(const GeneratorModel& source, const GeneratorModel& target, std::size_t i,
                                 MappingFrom mapping = MappingFrom::target) {
    if (!(source.config == target.config)) throw ConfigError("layer_swap: source and target generator configs differ");
    if (!source.params.same_layout(target.params)) throw ConfigError("layer_swap: parameter layouts differ");
    const auto owned = source_owned_parameters(target.config, i, mapping);
    GeneratorModel hybrid = target.clone();
    for (const auto& name : owned) hybrid.params.copy_from(source.params, name);
    return hybrid;
}

namespace detail {

inline nlohmann::json ladder_names_json(const GeneratorConfig& cfg, std::size_t i) {
    nlohmann::json names = nlohmann::json::array();
    const auto ladder = synthesis_ladder(cfg);
    for (std::size_t k = 0; k < i; ++k) names.push_back(ladder[k].prefix);
    return names;
}

inline Checkpoint hybrid_checkpoint(const GeneratorModel& hybrid, const Checkpoint& source, const Checkpoint& target,
                                    std::size_t i, MappingFrom mapping, const std::string& kind) {
    Checkpoint out;
    out.metadata["generator_config"] = hybrid.config;
    out.metadata["anchor_seed"] = hybrid.anchor_seed;
    out.metadata["anchor_zero"] = hybrid.anchor_zero;
    out.metadata["role"] = "hybrid";
    out.metadata["hybrid"] = {{"kind", kind},
                              {"i", i},
                              {"source_layers", ladder_names_json(hybrid.config, i)},
                              {"mapping_from", mapping == MappingFrom::source ? "source" : "target"},
                              {"source_sha256", sha256_hex(serialize_checkpoint(source))},
                              {"target_sha256", sha256_hex(serialize_checkpoint(target))}};
    if (target.metadata.contains("mode")) out.metadata["target_mode"] = target.metadata.at("mode");
    out.set_section("G", hybrid.params.clone());
    out.set_section("G_ema", hybrid.params.clone());
    return out;
}

}  // namespace detail

/// Layer-swap on the G_ema sections of two checkpoints, returned as a
/// generator-only checkpoint whose metadata names both parents and i.
inline Checkpoint layer_swap_checkpoints(const Checkpoint& source, const Checkpoint& target, std::size_t i,
                                         MappingFrom mapping = MappingFrom::target) {
    const GeneratorModel hybrid =
        layer_swap(generator_from_checkpoint(source), generator_from_checkpoint(target), i, mapping);
    return detail::hybrid_checkpoint(hybrid, source, target, i, mapping, "layer_swap");
}

/// Layer-swap against a target trained with a frozen mapping network, so
/// both parents share one W space.
inline Checkpoint ui2i_compose(const Checkpoint& source, const Checkpoint& target, std::size_t i) {
    const std::string mode = target.metadata.value("mode", std::string{});
    if (mode != "freeze-mapping") {
        throw ConfigError("ui2i_compose needs a target trained with --mode freeze-mapping (checkpoint mode is '" +
                          (mode.empty() ? std::string("unknown") : mode) + "')");
    }
    const GeneratorModel s = generator_from_checkpoint(source), t = generator_from_checkpoint(target);
    for (const auto& name : mapping_parameter_names(t.config)) {
        ParameterStore a, b;
        a.add(name, s.params.at(name).detach());
        b.add(name, t.params.at(name).detach());
        if (!a.bitwise_equal(b)) throw ConfigError("ui2i_compose: target mapping " + name + " differs from the source mapping");
    }
    return detail::hybrid_checkpoint(layer_swap(s, t, i, MappingFrom::source), source, target, i, MappingFrom::source,
                                     "ui2i");
}

}  // namespace fixnoise
