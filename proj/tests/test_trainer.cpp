#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "fixnoise/trainer.hpp"

using namespace fixnoise;

namespace {

GeneratorConfig toy_config() {
    GeneratorConfig cfg;
    cfg.z_dim = 8;
    cfg.w_dim = 8;
    cfg.final_resolution = 8;
    cfg.channels = {{4, 8}, {8, 4}};
    cfg.noise_strength_init = 0.1;
    return cfg;
}

TrainConfig toy_train(std::uint64_t images, std::uint64_t seed = 3) {
    TrainConfig t;
    t.batch_size = 4;
    t.total_images = images;
    t.seed = seed;
    t.log_interval = 1;
    t.loss.r1_interval = 4;
    return t;
}

Tensor toy_dataset(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> data(n * 3 * 64);
    for (auto& v : data) v = std::tanh(rng.normal());
    return Tensor::from_data({n, 3, 8, 8}, std::move(data));
}

std::string temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "fixnoise_test_trainer";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

bool same_bits(const Checkpoint& a, const Checkpoint& b, const std::string& section) {
    return a.section(section).bitwise_equal(b.section(section));
}

const Checkpoint& source_checkpoint() {
    static const Checkpoint ckpt = pretrain_source(toy_config(), toy_train(64), toy_dataset(32, 1));
    return ckpt;
}

}  // namespace

TEST(Modes, ParseAndPrint) {
    EXPECT_EQ(parse_mode("fixnoise").mode, TransferMode::fixnoise);
    EXPECT_EQ(parse_mode("freezeg=3").freeze_layers, 3);
    EXPECT_EQ(to_string(parse_mode("freezeg=3")), "freezeg=3");
    EXPECT_EQ(parse_mode("freeze-mapping").mode, TransferMode::freeze_mapping);
    EXPECT_THROW(parse_mode("freezeg=x"), UsageError);
    EXPECT_THROW(parse_mode("swap"), UsageError);
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
    TrainConfig c = toy_train(100);
    c.mode = parse_mode("freezeg=2");
    nlohmann::json j = c;
    EXPECT_EQ(j.get<TrainConfig>(), c);
    j["batchsize"] = 3;
    EXPECT_THROW(j.get<TrainConfig>(), ConfigError);
    j = c;
    j["batch_size"] = 1;
    EXPECT_THROW(j.get<TrainConfig>(), ConfigError);
}

TEST(Ema, DecayEndpointsAndGeometricConvergence) {
    EXPECT_EQ(ema_decay(16, std::numeric_limits<double>::infinity()), 1.0);
    EXPECT_DOUBLE_EQ(ema_decay(16, 16), 0.5);
    auto g = GeneratorModel::create(toy_config(), 1, 2);
    auto e = GeneratorModel::create(toy_config(), 5, 2);
    quantize_f32(g.params);
    quantize_f32(e.params);
    const auto before = e.params.clone();
    ema_update(e.params, g.params, 1.0);
    EXPECT_TRUE(e.params.bitwise_equal(before));
    ema_update(e.params, g.params, 0.0);
    EXPECT_TRUE(e.params.bitwise_equal(g.params));

    // Toward a constant target the gap shrinks by `decay` each update.
    ParameterStore a, b;
    a.add("x", Tensor::from_data({1}, {0.0}));
    b.add("x", Tensor::from_data({1}, {1.0}));
    const double decay = 0.75;
    for (int k = 1; k <= 8; ++k) {
        ema_update(a, b, decay);
        EXPECT_NEAR(1.0 - a.at("x")[0], std::pow(decay, k), 1e-6);
    }
    ParameterStore c;
    c.add("y", Tensor::zeros({1}));
    EXPECT_THROW(ema_update(a, c, 0.5), DimensionError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParameterStore p;
    p.add("w", Tensor::from_data({2}, {1.0, -1.0}));
    auto opt = Adam::for_params(p, 0.01, 0.0, 0.99, 1e-8);
    p.at("w").grad_storage() = {0.5, -2.0};
    opt.step(p);
    EXPECT_NEAR(p.at("w")[0], 1.0 - 0.01, 1e-7);
    EXPECT_NEAR(p.at("w")[1], -1.0 + 0.01, 1e-7);
}

TEST(Checkpoint, RoundTripIsBitwise) {
    const Checkpoint& c = source_checkpoint();
    const std::string path = temp_path("roundtrip.fxnz");
    save_checkpoint(c, path);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.metadata, c.metadata);
    ASSERT_EQ(back.sections.size(), c.sections.size());
    for (const auto& [name, store] : c.sections) {
        EXPECT_TRUE(is_f32_exact(store)) << name;
        EXPECT_TRUE(back.section(name).bitwise_equal(store)) << name;
    }
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
}

TEST(Checkpoint, BadMagicAndTruncation) {
    std::string bytes = serialize_checkpoint(source_checkpoint());
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
    std::string wrong_version = bytes;
    wrong_version[4] = 9;
    EXPECT_THROW(deserialize_checkpoint(wrong_version), FormatError);
    for (std::size_t cut : {std::size_t{6}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        EXPECT_THROW(deserialize_checkpoint(std::string_view(bytes).substr(0, cut)), CorruptionError) << cut;
    }
    EXPECT_THROW(load_checkpoint(temp_path("missing.fxnz") + ".nope"), IoError);
}

TEST(Checkpoint, AnchoredGenerationSurvivesReload) {
    const Checkpoint& c = source_checkpoint();
    const auto path = temp_path("anchor.fxnz");
    save_checkpoint(c, path);
    const auto g1 = generator_from_checkpoint(c);
    const auto g2 = generator_from_checkpoint(load_checkpoint(path));
    Rng rng(9);
    const Tensor z = sample_latents(rng, g1.config, 3);
    const Tensor a = generate(g1, z, anchored_noise(g1, 3)).image;
    const Tensor b = generate(g2, z, anchored_noise(g2, 3)).image;
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}

TEST(Pretrain, SameSeedIsBitIdentical) {
    const Checkpoint again = pretrain_source(toy_config(), toy_train(64), toy_dataset(32, 1));
    EXPECT_EQ(serialize_checkpoint(again), serialize_checkpoint(source_checkpoint()));
    const Checkpoint other = pretrain_source(toy_config(), toy_train(64, 4), toy_dataset(32, 1));
    EXPECT_FALSE(same_bits(other, source_checkpoint(), "G"));
}

TEST(Pretrain, EmptyOrMismatchedDatasetRejected) {
    EXPECT_THROW(pretrain_source(toy_config(), toy_train(8), Tensor::zeros({0, 3, 8, 8})), ConfigError);
    EXPECT_THROW(pretrain_source(toy_config(), toy_train(8), Tensor::zeros({4, 3, 16, 16})), ConfigError);
}

TEST(Transfer, FixNoiseStartsWithZeroMatchingLoss) {
    auto cfg = toy_train(16);
    cfg.mode = parse_mode("fixnoise");
    std::ostringstream log;
    TrainHooks hooks;
    hooks.metrics_log = &log;
    const Checkpoint out = transfer(cfg, source_checkpoint(), toy_dataset(16, 2), hooks);
    std::istringstream lines(log.str());
    std::string first;
    std::getline(lines, first);
    const auto rec = nlohmann::json::parse(first);
    EXPECT_EQ(rec.at("step").get<int>(), 0);
    EXPECT_EQ(rec.at("fm_loss").get<double>(), 0.0);
    EXPECT_TRUE(rec.contains("g_adv"));
    EXPECT_TRUE(rec.contains("d_loss"));
    EXPECT_EQ(out.metadata.at("anchor_seed"), source_checkpoint().metadata.at("anchor_seed"));
    std::string later;
    while (std::getline(lines, later)) EXPECT_GT(nlohmann::json::parse(later).at("fm_loss").get<double>(), 0.0);
}

TEST(Transfer, ZeroLambdaFixNoiseEqualsPlain) {
    auto fix = toy_train(32);
    fix.mode = parse_mode("fixnoise");
    fix.loss.lambda_fm = 0.0;
    auto plain = fix;
    plain.mode = parse_mode("plain");
    const auto data = toy_dataset(16, 2);
    const Checkpoint a = transfer(fix, source_checkpoint(), data);
    const Checkpoint b = transfer(plain, source_checkpoint(), data);
    for (const char* s : {"G", "G_ema", "D", "G.adam_m", "G.adam_v", "D.adam_m", "D.adam_v"}) EXPECT_TRUE(same_bits(a, b, s)) << s;
    auto weighted = fix;
    weighted.loss.lambda_fm = 0.05;
    EXPECT_FALSE(same_bits(transfer(weighted, source_checkpoint(), data), b, "G"));
}

TEST(Transfer, FreezeMasksAreExact) {
    const auto data = toy_dataset(16, 2);
    const auto& src = source_checkpoint().section("G_ema");
    const auto gcfg = toy_config();
    for (const std::string mode : {"freezeg=3", "freeze-mapping"}) {
        auto cfg = toy_train(400);
        cfg.mode = parse_mode(mode);
        const Checkpoint out = transfer(cfg, source_checkpoint(), data);
        const auto frozen = frozen_parameters(gcfg, cfg.mode);
        ASSERT_FALSE(frozen.empty());
        for (const auto& [name, t] : out.section("G")) {
            ParameterStore one, two;
            one.add(name, t.detach());
            two.add(name, src.at(name).detach());
            EXPECT_EQ(one.bitwise_equal(two), frozen.count(name) == 1) << mode << " " << name;
            ParameterStore ema;
            ema.add(name, out.section("G_ema").at(name).detach());
            if (frozen.count(name)) {
                EXPECT_TRUE(ema.bitwise_equal(two)) << mode << " ema " << name;
            }
        }
    }
    auto bad = toy_train(8);
    bad.mode = parse_mode("freezeg=99");
    EXPECT_THROW(transfer(bad, source_checkpoint(), data), ConfigError);
}

TEST(Transfer, MissingAnchorRejected) {
    Checkpoint c = source_checkpoint();
    c.metadata.erase("anchor_seed");
    auto cfg = toy_train(8);
    EXPECT_THROW(transfer(cfg, c, toy_dataset(8, 2)), ConfigError);
}

TEST(Training, NonFiniteLossAbortsWithSnapshot) {
    Checkpoint c = source_checkpoint();
    c.section("D").at("disc.b4.out.bias").mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    auto cfg = toy_train(8);
    TrainHooks hooks;
    hooks.snapshot_dir = temp_path("nan_snapshot_dir");
    try {
        transfer(cfg, c, toy_dataset(8, 2), hooks);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_EQ(e.exit_code(), 3);
        ASSERT_FALSE(e.snapshot_path().empty());
        EXPECT_TRUE(load_checkpoint(e.snapshot_path()).metadata.contains("nan_abort"));
    }
}
