#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fixnoise/gradcheck.hpp"
#include "fixnoise/nets.hpp"
#include "fixnoise/objectives.hpp"
#include "fixnoise/ops.hpp"

namespace fixnoise {

struct GradSuiteRow {
    std::string name;
    std::string kind;  // "op" or "composite"
    double tolerance = 0.0;
    GradCheckResult result;

    bool passed() const { return result.passed(tolerance); }
};

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kCompositeTolerance = 1e-3;

/// The 8x8 toy generator used by the suite.
inline GeneratorConfig gradcheck_toy_config() {
    GeneratorConfig cfg;
    cfg.z_dim = 8;
    cfg.w_dim = 8;
    cfg.final_resolution = 8;
    cfg.channels = {{4, 6}, {8, 4}};
    cfg.noise_strength_init = 0.1;
    return cfg;
}

namespace detail {

inline Tensor suite_randn(Shape s, std::uint64_t seed, double offset = 0.0) {
    Rng rng(derive_seed(seed, "gradsuite"));
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.mutable_data()) v = rng.normal() + offset;
    return t;
}

/// sum(r * y) for a fixed random r, so every output element is weighted.
inline Tensor probe_sum(const Tensor& y, std::uint64_t seed) {
    return sum(mul(y, suite_randn(y.shape(), seed ^ 0x5eedULL)));
}

inline Tensor away_from_zero(Shape s, std::uint64_t seed) {
    Tensor t = suite_randn(std::move(s), seed);
    for (auto& v : t.mutable_data()) v += v >= 0 ? 0.2 : -0.2;
    return t;
}

}  // namespace detail

/// Central-difference check of every differentiable op and of the composite
/// training losses on the toy config.
inline std::vector<GradSuiteRow> run_gradient_suite() {
    using detail::probe_sum;
    using detail::suite_randn;
    std::vector<GradSuiteRow> rows;
    auto op = [&](const std::string& name, const std::function<Tensor()>& fn, std::vector<std::pair<std::string, Tensor>> in) {
        rows.push_back({name, "op", kOpTolerance, check_gradients(fn, std::move(in))});
    };

    Tensor a = suite_randn({3, 4}, 1), b = suite_randn({3, 4}, 2);
    Tensor pos = suite_randn({3, 4}, 3);
    for (auto& v : pos.mutable_data()) v = 0.5 + std::abs(v);
    Tensor kinked = detail::away_from_zero({3, 4}, 4);
    op("add", [&] { return probe_sum(add(a, b), 10); }, {{"a", a}, {"b", b}});
    op("sub", [&] { return probe_sum(sub(a, b), 11); }, {{"a", a}, {"b", b}});
    op("mul", [&] { return probe_sum(mul(a, b), 12); }, {{"a", a}, {"b", b}});
    op("scale", [&] { return probe_sum(scale(a, -1.7), 13); }, {{"a", a}});
    op("square", [&] { return probe_sum(square(a), 14); }, {{"a", a}});
    op("add_scalar", [&] { return probe_sum(add_scalar(a, 0.3), 15); }, {{"a", a}});
    op("leaky_relu", [&] { return probe_sum(leaky_relu(kinked), 16); }, {{"x", kinked}});
    op("rsqrt", [&] { return probe_sum(rsqrt(pos), 17); }, {{"x", pos}});
    op("sigmoid", [&] { return probe_sum(sigmoid(a), 18); }, {{"a", a}});
    op("softplus", [&] { return probe_sum(softplus(a), 19); }, {{"a", a}});
    op("reshape", [&] { return probe_sum(reshape(a, {4, 3}), 20); }, {{"a", a}});
    op("sum", [&] { return square(sum(a)); }, {{"a", a}});
    op("mean", [&] { return square(mean(a)); }, {{"a", a}});
    op("transpose", [&] { return probe_sum(transpose(a), 21); }, {{"a", a}});
    Tensor m = suite_randn({4, 2}, 5);
    op("matmul", [&] { return probe_sum(matmul(a, m), 22); }, {{"a", a}, {"m", m}});
    Tensor s1 = suite_randn({1}, 6);
    op("expand", [&] { return probe_sum(expand(s1, {3, 4}), 23); }, {{"s", s1}});
    op("scale_by", [&] { return probe_sum(scale_by(a, s1), 24); }, {{"a", a}, {"s", s1}});

    Tensor x = suite_randn({2, 3, 4, 4}, 7), bias = suite_randn({3}, 8), sty = suite_randn({2, 3}, 9);
    Tensor field = suite_randn({2, 1, 4, 4}, 25), plane = suite_randn({1, 3, 4, 4}, 26);
    op("sum_to_channels", [&] { return probe_sum(sum_to_channels(x), 27); }, {{"x", x}});
    op("add_bias", [&] { return probe_sum(add_bias(x, bias), 28); }, {{"x", x}, {"b", bias}});
    op("sum_spatial", [&] { return probe_sum(sum_spatial(x), 29); }, {{"x", x}});
    op("mul_channel", [&] { return probe_sum(mul_channel(x, sty), 30); }, {{"x", x}, {"s", sty}});
    op("broadcast_channels", [&] { return probe_sum(broadcast_channels(field, 3), 31); }, {{"f", field}});
    op("expand_batch", [&] { return probe_sum(expand_batch(plane, 2), 32); }, {{"p", plane}});
    Tensor w3 = suite_randn({2, 3, 3, 3}, 33), w1 = suite_randn({2, 3, 1, 1}, 34);
    op("conv2d_3x3", [&] { return probe_sum(conv2d(x, w3), 35); }, {{"x", x}, {"w", w3}});
    op("conv2d_1x1", [&] { return probe_sum(conv2d(x, w1), 36); }, {{"x", x}, {"w", w1}});
    Tensor dy = suite_randn({2, 2, 4, 4}, 37);
    op("conv2d_weight", [&] { return probe_sum(conv2d_weight(x, dy, 3, 3), 38); }, {{"x", x}, {"dy", dy}});
    op("up2x", [&] { return probe_sum(up2x(x), 39); }, {{"x", x}});
    op("down2x", [&] { return probe_sum(down2x(x), 40); }, {{"x", x}});
    op("flip_transpose", [&] { return probe_sum(flip_transpose(w3), 47); }, {{"w", w3}});
    Tensor style = suite_randn({2, 3}, 48, 1.0);
    op("modulated_conv", [&] { return probe_sum(detail::modulated_conv(x, style, w3, false), 49); }, {{"x", x}, {"s", style}, {"w", w3}});
    op("modulated_conv_demod", [&] { return probe_sum(detail::modulated_conv(x, style, w3, true), 50); },
       {{"x", x}, {"s", style}, {"w", w3}});
    Tensor f1 = suite_randn({2, 3, 4, 4}, 51), f2 = suite_randn({2, 2, 4, 4}, 52);
    op("feature_matching_loss", [&] { return feature_matching_loss({x, dy}, {f1, f2}); }, {{"f1", f1}, {"f2", f2}});

    // Composite losses on the toy generator / discriminator.
    const GeneratorConfig cfg = gradcheck_toy_config();
    const GeneratorModel gs = GeneratorModel::create(cfg, 41, 42);
    GeneratorModel gt = gs.clone();
    {
        Rng jitter(43);
        for (auto& [_, t] : gt.params)
            for (auto& v : t.mutable_data()) v += 0.05 * jitter.normal();
    }
    const DiscriminatorModel d = DiscriminatorModel::create(cfg, 44);
    Rng rng(45);
    const Tensor z = sample_latents(rng, cfg, 2);
    const NoiseBundle noise = random_noise(rng, gt, 2);
    const Tensor real = Tensor::from_data({2, 3, 8, 8}, rng.normals(2 * 3 * 64));
    std::vector<std::pair<std::string, Tensor>> g_inputs(gt.params.begin(), gt.params.end());
    std::vector<std::pair<std::string, Tensor>> d_inputs(d.params.begin(), d.params.end());
    auto composite = [&](const std::string& name, const std::function<Tensor()>& fn,
                         const std::vector<std::pair<std::string, Tensor>>& in) {
        rows.push_back({name, "composite", kCompositeTolerance, check_gradients(fn, in, 4, 46)});
    };
    composite("generator_total_loss", [&] {
        const Tensor adv = adversarial_g_loss(discriminate(d, generate(gt, z, noise).image));
        return add(adv, scale(fixnoise_fm_term(gs, gt, z, MatchingSpace::intermediate_h), 0.05));
    }, g_inputs);
    composite("discriminator_loss", [&] {
        NoGradGuard g;
        const Tensor fake = generate(gt, z, noise).image;
        GradModeGuard on(true);
        return adversarial_d_loss(discriminate(d, real), discriminate(d, fake));
    }, d_inputs);
    std::vector<std::pair<std::string, Tensor>> mapping_inputs;
    for (const auto& name : mapping_parameter_names(cfg)) mapping_inputs.emplace_back(name, gt.params.at(name));
    composite("mapping_network", [&] { return probe_sum(map_latent(z, gt), 53); }, mapping_inputs);
    composite("r1_penalty", [&] { return r1_penalty(d, real, 1.0); }, d_inputs);
    return rows;
}

}  // namespace fixnoise
