#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "fixnoise/gradcheck.hpp"
#include "fixnoise/objectives.hpp"

using namespace fixnoise;

namespace {

GeneratorConfig toy_config(int resolution = 8) {
    GeneratorConfig cfg;
    cfg.z_dim = 8;
    cfg.w_dim = 8;
    cfg.final_resolution = resolution;
    cfg.channels = {{4, 6}, {8, 4}, {16, 3}};
    return cfg;
}

GeneratorModel toy_generator(int resolution = 8) {
    auto g = GeneratorModel::create(toy_config(resolution), 1, 77);
    for (auto& [name, t] : g.params) {
        if (name.ends_with(".noise_strength")) t.mutable_data()[0] = 0.3;
    }
    return g;
}

void perturb(Tensor& t, double delta, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& v : t.mutable_data()) v += delta * rng.normal();
}

}  // namespace

TEST(FeatureMatching, HandComputedValues) {
    const Tensor a = Tensor::from_data({1}, {3.0});
    const Tensor b = Tensor::from_data({1}, {1.0});
    EXPECT_EQ(feature_matching_loss({a}, {a}).item(), 0.0);
    EXPECT_DOUBLE_EQ(feature_matching_loss({a}, {b}).item(), 4.0);
    // Layer means of squared differences 1.0 and 3.0.
    const Tensor s1 = Tensor::from_data({2}, {0.0, 0.0});
    const Tensor t1 = Tensor::from_data({2}, {1.0, -1.0});
    const Tensor s2 = Tensor::from_data({2}, {0.0, 0.0});
    const Tensor t2 = Tensor::from_data({2}, {std::sqrt(2.0), 2.0});
    EXPECT_NEAR(feature_matching_loss({s1, s2}, {t1, t2}).item(), 2.0, 1e-15);
}

TEST(FeatureMatching, MismatchRejected) {
    const Tensor a = Tensor::zeros({2});
    EXPECT_THROW(feature_matching_loss({a}, {a, a}), DimensionError);
    EXPECT_THROW(feature_matching_loss({a}, {Tensor::zeros({3})}), DimensionError);
}

TEST(FeatureMatching, SourceIsDetached) {
    Tensor s = Tensor::from_data({2}, {1.0, 2.0});
    Tensor t = Tensor::from_data({2}, {0.0, 0.0});
    s.set_requires_grad(true);
    t.set_requires_grad(true);
    feature_matching_loss({s}, {t}).backward();
    EXPECT_FALSE(s.has_grad());
    ASSERT_TRUE(t.has_grad());
    EXPECT_DOUBLE_EQ(t.grad()[0], -1.0);
    EXPECT_DOUBLE_EQ(t.grad()[1], -2.0);
}

TEST(FmTerm, ZeroAtInitializationInEverySpace) {
    const auto gs = toy_generator(16);
    const auto gt = gs.clone();
    Rng rng(5);
    const Tensor z = sample_latents(rng, gs.config, 3);
    for (auto space : {MatchingSpace::intermediate_h, MatchingSpace::rgb, MatchingSpace::image_space}) {
        EXPECT_EQ(fixnoise_fm_term(gs, gt, z, space).item(), 0.0) << to_string(space);
    }
}

TEST(FmTerm, DifferentAnchorsRejected) {
    const auto gs = toy_generator();
    auto gt = gs.clone();
    gt.anchor_seed += 1;
    Rng rng(5);
    EXPECT_THROW(fixnoise_fm_term(gs, gt, sample_latents(rng, gs.config, 2), MatchingSpace::intermediate_h), ConfigError);
}

TEST(FmTerm, PerturbedLayerAffectsOnlyLaterFeatures) {
    const auto gs = toy_generator(16);
    const auto cfg = gs.config;
    const auto ladder = synthesis_ladder(cfg);
    Rng rng(5);
    const Tensor z = sample_latents(rng, cfg, 2);
    const auto anchor = anchored_noise(gs, 2);
    const auto ref = generate(gs, z, anchor, true);

    for (const auto& layer : ladder) {
        if (layer.kind != LayerKind::conv) continue;
        auto gt = gs.clone();
        perturb(gt.params.at(layer.prefix + ".weight"), 0.1, 9);

        const auto out = generate(gt, z, anchor, true);
        for (std::size_t k = 0; k < out.features.size(); ++k) {
            const double diff = mean_squared_difference(ref.features[k], out.features[k]).item();
            if (static_cast<int>(k) < layer.feature_index) {
                EXPECT_EQ(diff, 0.0) << layer.prefix << " changed feature " << k;
            } else {
                EXPECT_GT(diff, 0.0) << layer.prefix << " left feature " << k << " unchanged";
            }
        }

        gt.params.zero_grad();
        const Tensor term = fixnoise_fm_term(gs, gt, z, MatchingSpace::intermediate_h);
        EXPECT_GT(term.item(), 0.0);
        term.backward();
        for (const auto& other : ladder) {
            const Tensor& w = gt.params.at(other.prefix + ".weight");
            if (other.kind == LayerKind::to_rgb) {
                EXPECT_FALSE(w.has_grad() && std::any_of(w.grad().begin(), w.grad().end(), [](double v) { return v != 0.0; }))
                    << other.prefix << " receives gradient from an H-space term";
            }
        }
        const Tensor& own = gt.params.at(layer.prefix + ".weight");
        ASSERT_TRUE(own.has_grad());
        EXPECT_TRUE(std::any_of(own.grad().begin(), own.grad().end(), [](double v) { return v != 0.0; }));
    }
}

TEST(FmTerm, SourceReceivesNoGradient) {
    auto gs = toy_generator();
    auto gt = gs.clone();
    perturb(gt.params.at("synthesis.b8.conv0.weight"), 0.1, 3);
    Rng rng(5);
    for (auto space : {MatchingSpace::intermediate_h, MatchingSpace::rgb, MatchingSpace::image_space}) {
        gs.params.zero_grad();
        fixnoise_fm_term(gs, gt, sample_latents(rng, gs.config, 2), space).backward();
        for (const auto& [name, t] : gs.params) EXPECT_FALSE(t.has_grad()) << name;
    }
}

TEST(FmTerm, IndependentOfRandomStream) {
    auto gs = toy_generator();
    auto gt = gs.clone();
    perturb(gt.params.at("synthesis.b4.conv1.weight"), 0.1, 3);
    Rng rng(5);
    const Tensor z = sample_latents(rng, gs.config, 2);
    const double a = fixnoise_fm_term(gs, gt, z, MatchingSpace::intermediate_h).item();
    Rng burn(123);
    (void)random_noise(burn, gs, 2);
    const double b = fixnoise_fm_term(gs, gt, z, MatchingSpace::intermediate_h).item();
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a), std::bit_cast<std::uint64_t>(b));
}

TEST(FmTerm, GradientMatchesFiniteDifferences) {
    auto gs = toy_generator();
    auto gt = gs.clone();
    for (auto& [name, t] : gt.params) perturb(t, 0.05, std::hash<std::string>{}(name));
    Rng rng(5);
    const Tensor z = sample_latents(rng, gs.config, 2);
    std::vector<std::pair<std::string, Tensor>> inputs(gt.params.begin(), gt.params.end());
    for (auto space : {MatchingSpace::intermediate_h, MatchingSpace::rgb, MatchingSpace::image_space}) {
        const auto r = check_gradients([&] { return fixnoise_fm_term(gs, gt, z, space); }, inputs, 4, 11);
        EXPECT_LT(r.max_rel_error, 1e-3) << to_string(space) << " at " << r.worst;
    }
}

TEST(Adversarial, ClosedForms) {
    EXPECT_DOUBLE_EQ(adversarial_g_loss(Tensor::from_data({1}, {0.0})).item(), std::log(2.0));
    const double d = adversarial_d_loss(Tensor::from_data({1}, {10.0}), Tensor::from_data({1}, {-10.0})).item();
    EXPECT_NEAR(d, 2.0 * std::log1p(std::exp(-10.0)), 1e-15);
    EXPECT_NEAR(d, 9.08e-5, 1e-7);
    double prev = adversarial_g_loss(Tensor::from_data({1}, {-5.0})).item();
    for (double s = -4.5; s <= 5.0; s += 0.5) {
        const double cur = adversarial_g_loss(Tensor::from_data({1}, {s})).item();
        EXPECT_LT(cur, prev);
        prev = cur;
    }
    EXPECT_THROW(adversarial_g_loss(Tensor::zeros({0})), ContractError);
}

TEST(R1, ConstantAndLinearCritics) {
    Rng rng(1);
    const Tensor x = Tensor::from_data({2, 3, 4, 4}, rng.normals(96));
    const double gamma = 2.5;
    const auto constant = [](const Tensor& img) {
        const std::size_t n = img.dim(0);
        return add_scalar(reshape(scale(sum_spatial(reshape(img, {n, 1, img.numel() / n})), 0.0), {n}), 1.5);
    };
    EXPECT_EQ(r1_penalty(constant, x, gamma).item(), 0.0);

    Tensor c = Tensor::from_data({3}, {0.5, -1.0, 2.0});
    const auto linear = [&](const Tensor& img) {
        return reshape(sum_spatial(mul_channel(img, expand_batch(reshape(c, {1, 3}), img.dim(0)))), {img.dim(0), 3});
    };
    const auto linear_score = [&](const Tensor& img) {
        return reshape(matmul(linear(img), Tensor::full({3, 1}, 1.0)), {img.dim(0)});
    };
    // Each pixel of channel k carries weight c_k: sum c^2 over 16 pixels.
    const double want = 0.5 * gamma * 16.0 * (0.25 + 1.0 + 4.0);
    EXPECT_NEAR(r1_penalty(linear_score, x, gamma).item(), want, 1e-12);
}

TEST(R1, MatchesFiniteDifferenceGradientNorm) {
    auto cfg = toy_config(8);
    const auto d = DiscriminatorModel::create(cfg, 5);
    Rng rng(2);
    const Tensor x = Tensor::from_data({2, 3, 8, 8}, rng.normals(2 * 3 * 64));
    const double gamma = 1.0;
    const double value = r1_penalty(d, x, gamma).item();

    NoGradGuard no_grad;
    double norm_sq = 0.0;
    Tensor probe = x.detach();
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        double& v = probe.mutable_data()[i];
        const double saved = v;
        const double h = 1e-4 * std::max(1.0, std::abs(saved));
        v = saved + h;
        const double plus = sum(discriminate(d, probe)).item();
        v = saved - h;
        const double minus = sum(discriminate(d, probe)).item();
        v = saved;
        const double g = (plus - minus) / (2.0 * h);
        norm_sq += g * g;
    }
    const double oracle = 0.5 * gamma * norm_sq / 2.0;
    EXPECT_NEAR(value, oracle, 1e-4 * std::max(1.0, oracle));
}

TEST(R1, ParameterGradientThroughDoubleBackward) {
    auto cfg = toy_config(8);
    const auto d = DiscriminatorModel::create(cfg, 5);
    Rng rng(2);
    const Tensor x = Tensor::from_data({2, 3, 8, 8}, rng.normals(2 * 3 * 64));
    std::vector<std::pair<std::string, Tensor>> inputs(d.params.begin(), d.params.end());
    const auto r = check_gradients([&] { return r1_penalty(d, x, 1.0); }, inputs, 3, 7);
    EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

TEST(LossConfig, ValidationAndJson) {
    LossConfig c;
    EXPECT_EQ(c.lambda_fm, 0.05);
    nlohmann::json j = c;
    EXPECT_EQ(j.get<LossConfig>(), c);
    j["lambda_fm"] = -1.0;
    EXPECT_THROW(j.get<LossConfig>(), ConfigError);
    j = c;
    j["extra"] = 1;
    EXPECT_THROW(j.get<LossConfig>(), ConfigError);
    EXPECT_THROW(parse_matching_space("pixels"), ConfigError);
}
