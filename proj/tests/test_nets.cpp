#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "fixnoise/gradcheck.hpp"
#include "fixnoise/nets.hpp"

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

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    }
    return true;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / static_cast<double>(a.numel());
}

void set_noise_strengths(GeneratorModel& g, double value) {
    for (auto& [name, t] : g.params) {
        if (name.ends_with(".noise_strength")) std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
    }
}

}  // namespace

TEST(GeneratorConfig, LayerCountFollowsResolution) {
    GeneratorConfig cfg;
    EXPECT_EQ(cfg.num_feature_layers(), 7);
    cfg.final_resolution = 16;
    EXPECT_EQ(cfg.num_feature_layers(), 5);
    EXPECT_EQ(cfg.channels_at(4), 64);
    EXPECT_EQ(cfg.channels_at(8), 32);
    EXPECT_EQ(cfg.channels_at(16), 16);
    cfg.final_resolution = 24;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(GeneratorConfig, JsonRejectsUnknownKeys) {
    nlohmann::json j = toy_config();
    EXPECT_EQ(j.get<GeneratorConfig>().num_feature_layers(), 3);
    j["zdim"] = 3;
    EXPECT_THROW(j.get<GeneratorConfig>(), ConfigError);
}

TEST(Ladder, InterleavesConvAndToRgb) {
    const auto ladder = synthesis_ladder(toy_config(16));
    std::vector<std::string> names;
    for (const auto& l : ladder) names.push_back(l.prefix);
    const std::vector<std::string> want = {"synthesis.b4.conv1", "synthesis.b4.torgb", "synthesis.b8.conv0", "synthesis.b8.conv1",
                                           "synthesis.b8.torgb", "synthesis.b16.conv0", "synthesis.b16.conv1", "synthesis.b16.torgb"};
    EXPECT_EQ(names, want);
}

TEST(Ladder, EveryParameterOwnedOnce) {
    const auto cfg = toy_config(16);
    const auto g = GeneratorModel::create(cfg, 1, 2);
    std::vector<std::string> owned = mapping_parameter_names(cfg);
    for (std::size_t i = 0; i < synthesis_ladder(cfg).size(); ++i) {
        for (auto& n : ladder_parameter_names(cfg, i)) owned.push_back(n);
    }
    auto all = g.params.names();
    std::sort(owned.begin(), owned.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(owned, all);
}

TEST(MapLatent, PositiveScaleInvariant) {
    const auto g = GeneratorModel::create(toy_config(), 3, 4);
    Rng rng(5);
    const Tensor z = sample_latents(rng, g.config, 3);
    const Tensor w1 = map_latent(z, g);
    EXPECT_TRUE(bitwise_equal(w1, map_latent(scale(z, 2.0), g)));
    EXPECT_TRUE(bitwise_equal(w1, map_latent(z, g)));
    const Tensor w3 = map_latent(scale(z, 3.7), g);
    for (std::size_t i = 0; i < w1.numel(); ++i) EXPECT_NEAR(w1[i], w3[i], 1e-12);
}

TEST(MapLatent, ZeroLatentIsDegenerate) {
    const auto g = GeneratorModel::create(toy_config(), 3, 4);
    EXPECT_THROW(map_latent(Tensor::zeros({1, 8}), g), DegenerateInputError);
    EXPECT_THROW(map_latent(Tensor::zeros({1, 7}), g), DimensionError);
}

TEST(MapLatent, IdentityMappingReturnsNormalizedLatent) {
    auto cfg = toy_config();
    cfg.mapping_layers = 1;
    auto g = GeneratorModel::create(cfg, 3, 4);
    // Stored weights are multiplied by lr_mul / sqrt(fan_in) at runtime.
    const double stored = std::sqrt(static_cast<double>(cfg.z_dim)) / cfg.mapping_lr_multiplier;
    auto& w = g.params.at("mapping.fc0.weight");
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c) w.mutable_data()[r * 8 + c] = r == c ? stored : 0.0;
    const Tensor z = Tensor::from_data({1, 8}, {1, -2, 3, 0.5, 0, 4, -1, 2});
    double ss = 0.0;
    for (double v : z.data()) ss += v * v;
    const double rms = std::sqrt(ss / 8.0);
    const Tensor w_out = map_latent(z, g);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(w_out[i], z[i] / rms, 1e-12);
}

TEST(Noise, ModesAndEndpoints) {
    const auto g = GeneratorModel::create(toy_config(), 1, 99);
    Rng a(7), b(7), c(7);
    const auto anch = sample_noise(a, g, NoiseSpec::anchored(), 2);
    const auto rand0 = sample_noise(b, g, NoiseSpec::random(), 2);
    ASSERT_EQ(anch.fields.size(), 3u);
    EXPECT_EQ(anch.fields[0].shape(), (Shape{2, 1, 4, 4}));
    EXPECT_EQ(anch.fields[2].shape(), (Shape{2, 1, 8, 8}));

    const auto at1 = interpolate_noise(anch, rand0, 1.0);
    const auto at0 = interpolate_noise(anch, rand0, 0.0);
    const auto half = sample_noise(c, g, NoiseSpec::interpolated(0.5), 2);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_TRUE(bitwise_equal(at1.fields[l], anch.fields[l]));
        EXPECT_TRUE(bitwise_equal(at0.fields[l], rand0.fields[l]));
        for (std::size_t i = 0; i < half.fields[l].numel(); ++i) {
            EXPECT_EQ(half.fields[l][i], 0.5 * anch.fields[l][i] + 0.5 * rand0.fields[l][i]);
        }
    }
    EXPECT_THROW(NoiseSpec::interpolated(1.5), UsageError);
    EXPECT_THROW(NoiseSpec::interpolated(-0.1), UsageError);
}

TEST(Noise, AnchoredIgnoresRngAndRepeats) {
    const auto g = GeneratorModel::create(toy_config(), 1, 99);
    Rng r1(1), r2(2);
    const auto a = sample_noise(r1, g, NoiseSpec::anchored(), 3);
    const auto b = sample_noise(r2, g, NoiseSpec::anchored(), 3);
    for (std::size_t l = 0; l < a.fields.size(); ++l) EXPECT_TRUE(bitwise_equal(a.fields[l], b.fields[l]));
    auto zero = g.clone();
    zero.anchor_zero = true;
    for (const auto& f : anchored_noise(zero, 2).fields)
        for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Synthesize, ShapesAndDeterminism) {
    const auto g = GeneratorModel::create(toy_config(16), 1, 2);
    Rng rng(3);
    const Tensor z = sample_latents(rng, g.config, 2);
    const auto noise = anchored_noise(g, 2);
    const auto a = generate(g, z, noise, true);
    const auto b = generate(g, z, noise, true);
    EXPECT_EQ(a.image.shape(), (Shape{2, 3, 16, 16}));
    ASSERT_EQ(a.features.size(), static_cast<std::size_t>(g.num_feature_layers()));
    EXPECT_EQ(a.rgb.size(), 3u);
    EXPECT_TRUE(bitwise_equal(a.image, b.image));
    for (std::size_t l = 0; l < a.features.size(); ++l) EXPECT_TRUE(bitwise_equal(a.features[l], b.features[l]));
}

TEST(Synthesize, WrongBundleRejected) {
    const auto g = GeneratorModel::create(toy_config(16), 1, 2);
    const auto other = GeneratorModel::create(toy_config(8), 1, 2);
    Rng rng(3);
    const Tensor z = sample_latents(rng, g.config, 2);
    EXPECT_THROW(generate(g, z, anchored_noise(other, 2)), DimensionError);
    EXPECT_THROW(generate(g, z, anchored_noise(g, 3)), DimensionError);
}

TEST(Synthesize, ZeroStrengthIgnoresNoise) {
    auto g = GeneratorModel::create(toy_config(16), 1, 2);
    set_noise_strengths(g, 0.0);
    Rng rng(3);
    const Tensor z = sample_latents(rng, g.config, 2);
    const auto a = generate(g, z, anchored_noise(g, 2));
    const auto b = generate(g, z, random_noise(rng, g, 2));
    EXPECT_TRUE(bitwise_equal(a.image, b.image));
    set_noise_strengths(g, 0.5);
    EXPECT_GT(mean_abs_diff(generate(g, z, anchored_noise(g, 2)).image, generate(g, z, random_noise(rng, g, 2)).image), 0.0);
}

TEST(Synthesize, InterpolationIsContinuous) {
    auto g = GeneratorModel::create(toy_config(16), 1, 2);
    set_noise_strengths(g, 0.3);
    Rng rng(3);
    const Tensor z = sample_latents(rng, g.config, 4);
    const auto anch = anchored_noise(g, 4);
    const auto rnd = random_noise(rng, g, 4);
    auto image_at = [&](double alpha) { return generate(g, z, interpolate_noise(anch, rnd, alpha)).image; };
    for (double alpha : {0.0, 0.25, 0.5, 0.75}) {
        const double small = mean_abs_diff(image_at(alpha), image_at(alpha + 0.05));
        const double large = mean_abs_diff(image_at(alpha), image_at(std::min(1.0, alpha + 0.2)));
        EXPECT_TRUE(std::isfinite(small));
        EXPECT_LT(small, 4.0 * large) << "alpha " << alpha;
    }
}

TEST(StyleSpace, ZeroDeltaAndCausality) {
    const auto g = GeneratorModel::create(toy_config(16), 1, 2);
    Rng rng(3);
    const Tensor w = map_latent(sample_latents(rng, g.config, 2), g);
    const auto noise = anchored_noise(g, 2);
    const auto s = style_vectors(w, g);
    ASSERT_EQ(s.layers(), synthesis_ladder(g.config).size());
    const auto base = synthesize_styles(g, s, noise, true);
    EXPECT_TRUE(bitwise_equal(base.image, synthesize_styles(g, modulate_style(s, 3, 1, 0.0), noise).image));
    EXPECT_TRUE(bitwise_equal(base.image, synthesize(g, w, noise).image));

    // Ladder entry 3 is the second 8x8 conv, feature index 2.
    const auto moved = synthesize_styles(g, modulate_style(s, 3, 1, 2.0), noise, true);
    EXPECT_TRUE(bitwise_equal(base.features[0], moved.features[0]));
    EXPECT_TRUE(bitwise_equal(base.features[1], moved.features[1]));
    EXPECT_FALSE(bitwise_equal(base.features[2], moved.features[2]));
    const auto minus = synthesize_styles(g, modulate_style(s, 3, 1, -2.0), noise);
    EXPECT_GT(mean_abs_diff(moved.image, minus.image), 0.0);
    EXPECT_THROW(modulate_style(s, 99, 0, 1.0), IndexError);
    EXPECT_THROW(modulate_style(s, 0, 999, 1.0), IndexError);
}

TEST(Discriminator, ScoresAndInputGradient) {
    const auto cfg = toy_config(8);
    const auto d = DiscriminatorModel::create(cfg, 11);
    Rng rng(12);
    Tensor x = Tensor::from_data({3, 3, 8, 8}, rng.normals(3 * 3 * 64));
    const Tensor s = discriminate(d, x);
    ASSERT_EQ(s.shape(), (Shape{3}));
    EXPECT_TRUE(all_finite(s.data()));
    EXPECT_THROW(discriminate(d, Tensor::zeros({1, 3, 16, 16})), DimensionError);

    const auto r = check_gradients([&] { return sum(discriminate(d, x)); }, {{"x", x}}, 60, 13);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Generator, ParameterGradients) {
    auto g = GeneratorModel::create(toy_config(8), 1, 2);
    set_noise_strengths(g, 0.2);
    Rng rng(3);
    const Tensor z = sample_latents(rng, g.config, 2);
    const auto noise = random_noise(rng, g, 2);
    Rng wr(4);
    const Tensor weights = Tensor::from_data({2, 3, 8, 8}, wr.normals(2 * 3 * 64));
    std::vector<std::pair<std::string, Tensor>> inputs(g.params.begin(), g.params.end());
    const auto r = check_gradients([&] { return sum(mul(generate(g, z, noise).image, weights)); }, inputs, 6, 5);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}
