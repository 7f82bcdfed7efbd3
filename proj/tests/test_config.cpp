#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "fixnoise/config.hpp"
#include "fixnoise/gradsuite.hpp"

using namespace fixnoise;

namespace {

std::string temp_file(const std::string& name, const std::string& body) {
    const auto dir = std::filesystem::temp_directory_path() / "fixnoise_test_config";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / name).string();
    write_file_bytes(path, body);
    return path;
}

}  // namespace

TEST(ExperimentConfig, JsonRoundTrip) {
    ExperimentConfig c = default_experiment();
    c.anchor_zero = true;
    c.transfer.loss.lambda_fm = 0.5;
    c.transfer.mode = parse_mode("freezeg=3");
    c.metrics.alphas = {1.0, 0.0};
    const nlohmann::json j = c;
    ExperimentConfig back = default_experiment();
    from_json(j, back);
    EXPECT_TRUE(back == c);
}

TEST(ExperimentConfig, MissingKeysKeepDefaults) {
    const auto path = temp_file("partial.json", R"({"dataset": {"seed": 11}, "transfer": {"total_images": 64}})");
    const ExperimentConfig c = load_experiment_config(path);
    EXPECT_EQ(c.dataset.seed, 11u);
    EXPECT_EQ(c.dataset.source_preset, "similar-source");
    EXPECT_EQ(c.transfer.total_images, 64u);
    EXPECT_EQ(c.generator, default_experiment().generator);
}

TEST(ExperimentConfig, UnknownKeysRejectedAtEveryLevel) {
    for (const char* body : {R"({"bogus": 1})", R"({"dataset": {"sed": 1}})", R"({"generator": {"zdim": 3}})",
                             R"({"transfer": {"loss": {"lambda": 1}}})", R"({"metrics": {"alpha": [1]}})"}) {
        EXPECT_THROW(load_experiment_config(temp_file("bad.json", body)), ConfigError) << body;
    }
}

TEST(ExperimentConfig, ValidatedAsAWhole) {
    EXPECT_THROW(load_experiment_config(temp_file("bad.json", "{not json")), ConfigError);
    ExperimentConfig c = default_experiment();
    c.dataset.target_count = 10;
    EXPECT_THROW(c.validate(), ConfigError);
    c = default_experiment();
    c.dataset.source_preset = "nope";
    EXPECT_THROW(c.validate(), UsageError);
    c = default_experiment();
    c.metrics.alphas = {2.0};
    EXPECT_THROW(c.validate(), UsageError);
    try {
        load_experiment_config(temp_file("typed.json", R"({"dataset": {"seed": "seven"}})"));
        FAIL() << "type mismatch accepted";
    } catch (const ConfigError&) {
    }
}

TEST(GradientSuite, EveryRowWithinToleranceAndFast) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = run_gradient_suite();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(secs, 60.0);
    std::size_t ops = 0, composites = 0;
    for (const auto& r : rows) {
        EXPECT_TRUE(r.passed()) << r.name << " rel err " << r.result.max_rel_error << " at " << r.result.worst;
        EXPECT_GT(r.result.checked, 0u) << r.name;
        (r.kind == "op" ? ops : composites)++;
    }
    EXPECT_GE(ops, 25u);
    EXPECT_EQ(composites, 4u);
}
