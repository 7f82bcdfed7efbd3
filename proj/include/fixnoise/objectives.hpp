#pragma once

#include <concepts>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixnoise/nets.hpp"
#include "fixnoise/tensor.hpp"

namespace fixnoise {

enum class MatchingSpace { intermediate_h, rgb, image_space };

inline std::string to_string(MatchingSpace s) {
    switch (s) {
        case MatchingSpace::intermediate_h: return "intermediate_h";
        case MatchingSpace::rgb: return "rgb";
        case MatchingSpace::image_space: return "image_space";
    }
    return "?";
}

inline MatchingSpace parse_matching_space(const std::string& s) {
    if (s == "intermediate_h" || s == "h") return MatchingSpace::intermediate_h;
    if (s == "rgb") return MatchingSpace::rgb;
    if (s == "image_space" || s == "image") return MatchingSpace::image_space;
    throw ConfigError("unknown matching space '" + s + "' (expected intermediate_h, rgb or image_space)");
}

struct LossConfig {
    double lambda_fm = 0.05;
    MatchingSpace matching_space = MatchingSpace::intermediate_h;
    double r1_gamma = 1.0;
    int r1_interval = 16;

    void validate() const {
        if (!(lambda_fm >= 0.0)) throw ConfigError("lambda_fm must be >= 0");
        if (r1_interval < 1) throw ConfigError("r1_interval must be >= 1");
        if (!(r1_gamma >= 0.0)) throw ConfigError("r1_gamma must be >= 0");
    }

    bool operator==(const LossConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"lambda_fm", c.lambda_fm},
         {"matching_space", to_string(c.matching_space)},
         {"r1_gamma", c.r1_gamma},
         {"r1_interval", c.r1_interval}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    for (const auto& [key, _] : j.items()) {
        if (key != "lambda_fm" && key != "matching_space" && key != "r1_gamma" && key != "r1_interval") {
            throw ConfigError("unknown loss config key '" + key + "'");
        }
    }
    c.lambda_fm = j.value("lambda_fm", c.lambda_fm);
    if (j.contains("matching_space")) c.matching_space = parse_matching_space(j.at("matching_space").get<std::string>());
    c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
    c.r1_interval = j.value("r1_interval", c.r1_interval);
    c.validate();
}

/// (1/L) * sum_l mean((F_s,l - F_t,l)^2). The source side is detached, so
/// gradients reach only the target stack.
inline Tensor feature_matching_loss(const std::vector<Tensor>& source, const std::vector<Tensor>& target) {
    if (source.size() != target.size()) {
        throw DimensionError("feature stacks differ in length: " + std::to_string(source.size()) + " vs " +
                             std::to_string(target.size()));
    }
    if (source.empty()) throw DimensionError("feature stacks are empty");
    Tensor total;
    for (std::size_t l = 0; l < source.size(); ++l) {
        if (source[l].shape() != target[l].shape()) {
            throw DimensionError("feature layer " + std::to_string(l) + " shape " + shape_str(source[l].shape()) + " vs " +
                                 shape_str(target[l].shape()));
        }
        const Tensor term = mean_squared_difference(source[l].detach(), target[l]);
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(source.size()));
}

/// L_fm between source and target generators on the same latent batch, both
/// driven by the one anchored bundle. The source pass is never recorded.
inline Tensor fixnoise_fm_term(const GeneratorModel& source, const GeneratorModel& target, const Tensor& z,
                               MatchingSpace space) {
    if (source.anchor_seed != target.anchor_seed || source.anchor_zero != target.anchor_zero) {
        throw ConfigError("source and target anchors differ; their anchored subspaces do not correspond");
    }
    if (!(source.config == target.config)) throw ConfigError("source and target generator configs differ");
    const Tensor zb = as_batch(z);
    const NoiseBundle anchor = anchored_noise(target, zb.dim(0));
    const bool taps = space == MatchingSpace::intermediate_h;
    SynthesisResult s;
    {
        NoGradGuard no_grad;
        s = generate(source, zb, anchor, taps);
    }
    const SynthesisResult t = generate(target, zb, anchor, taps);
    switch (space) {
        case MatchingSpace::intermediate_h: return feature_matching_loss(s.features, t.features);
        case MatchingSpace::rgb: return feature_matching_loss(s.rgb, t.rgb);
        case MatchingSpace::image_space: return feature_matching_loss({s.image}, {t.image});
    }
    throw ConfigError("unknown matching space");
}

inline void require_scores(const Tensor& scores, const char* what) {
    if (!scores.defined() || scores.numel() == 0) throw ContractError(std::string(what) + ": empty score batch");
    if (!all_finite(scores.data())) throw NumericError(std::string(what) + ": non-finite discriminator scores");
}

/// mean softplus(-fake).
inline Tensor adversarial_g_loss(const Tensor& fake_scores) {
    require_scores(fake_scores, "adversarial_g_loss");
    return mean(softplus(scale(fake_scores, -1.0)));
}

/// mean softplus(-real) + mean softplus(fake).
inline Tensor adversarial_d_loss(const Tensor& real_scores, const Tensor& fake_scores) {
    require_scores(real_scores, "adversarial_d_loss");
    require_scores(fake_scores, "adversarial_d_loss");
    return add(mean(softplus(scale(real_scores, -1.0))), mean(softplus(fake_scores)));
}

/// (gamma/2) * batch mean of ||d score / d x||^2. `score_fn` maps the images
/// to [N] scores; the returned penalty is differentiable with respect to the
/// critic parameters.
template <class ScoreFn>
    requires std::invocable<ScoreFn&, const Tensor&>
Tensor r1_penalty(ScoreFn&& score_fn, const Tensor& real_images, double gamma) {
    if (!real_images.is_leaf()) throw ContractError("r1_penalty needs leaf real images");
    Tensor x = real_images.detach();
    x.set_requires_grad(true);
    const Tensor scores = score_fn(x);
    if (!scores.requires_grad()) throw ContractError("r1_penalty: scores carry no gradient path to the images");
    const Tensor g = grad(sum(scores), {x}, true).front();
    return scale(sum(square(g)), 0.5 * gamma / static_cast<double>(x.dim(0)));
}

inline Tensor r1_penalty(const DiscriminatorModel& d, const Tensor& real_images, double gamma) {
    return r1_penalty([&](const Tensor& x) { return discriminate(d, x); }, real_images, gamma);
}

}  // namespace fixnoise
