#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "svf/config.hpp"

using svf::ConfigError;

namespace {

svf::ExperimentConfig parse(const std::string& text, const std::vector<std::string>& overrides = {},
                            std::optional<std::uint64_t> seed = std::nullopt) {
    std::istringstream in(text);
    return svf::parse_config(in, "test.ini", overrides, seed);
}

std::string message_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
    try {
        parse(text, overrides);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
    const auto cfg = parse("");
    EXPECT_EQ(cfg.seed, 321u);
    EXPECT_EQ(cfg.strategy, svf::StrategyConfig::svf());
    EXPECT_EQ(cfg.train.epochs, 40u);
    EXPECT_EQ(cfg.train.val_episodes, 200u);
    EXPECT_EQ(cfg.plan.fold, 0u);
    EXPECT_EQ(cfg.eval_shots, (std::vector<std::size_t>{1, 5}));
    EXPECT_EQ(cfg.backbone_dir(), std::filesystem::path("runs/default/checkpoints/backbone"));
}

TEST(Config, ShippedDefaultFileMatchesBuiltInDefaults) {
    const auto shipped = svf::load_config(SVF_SOURCE_DIR "/configs/default.ini");
    EXPECT_EQ(svf::to_ini(shipped), svf::to_ini(parse("")));
}

TEST(Config, ValuesOverridesAndSeedApplyInOrder) {
    const auto cfg = parse("[train]\nepochs = 7\n[strategy]\nkind = full\n", {"train.epochs=3", "data.fold=2"}, 99);
    EXPECT_EQ(cfg.train.epochs, 3u);
    EXPECT_EQ(cfg.plan.fold, 2u);
    EXPECT_EQ(cfg.seed, 99u);
    EXPECT_EQ(cfg.train.seed, 99u);
    EXPECT_EQ(cfg.pretrain.seed, 99u);
    EXPECT_EQ(cfg.strategy.stages, (std::set<int>{1, 2, 3, 4}));
    EXPECT_NE(cfg.head_seed(), cfg.backbone_init_seed());
}

TEST(Config, StrategyStageDefaultsDependOnKind) {
    EXPECT_TRUE(parse("[strategy]\nkind = freeze\n").strategy.stages.empty());
    EXPECT_EQ(parse("[strategy]\nkind = layers\n").strategy.stages, (std::set<int>{2, 3, 4}));
    EXPECT_EQ(parse("[strategy]\nkind = svf\nstages =\n", {"strategy.kind=full"}).strategy.stages,
              (std::set<int>{1, 2, 3, 4}));
    EXPECT_NE(message_of("[strategy]\nkind = full\nstages = 2,3,4\n").size(), 0u);
    const auto s = parse("[strategy]\nkind = svf\nsubspaces = U+S+V\nvariant = B\nstages = 4\n").strategy;
    EXPECT_EQ(s, svf::StrategyConfig::svf({true, true, true}, {4}, svf::SvfVariant::B));
}

TEST(Config, StrictErrorsNameTheProblem) {
    EXPECT_NE(message_of("[train]\nepoch = 3\n").find("epoch"), std::string::npos);
    EXPECT_NE(message_of("[nonsense]\nx = 1\n").find("nonsense"), std::string::npos);
    EXPECT_NE(message_of("seed = 3\n").find("seed"), std::string::npos);
    EXPECT_NE(message_of("[train]\nlr = fast\n").find("lr"), std::string::npos);
    EXPECT_NE(message_of("[train]\nlr = 0.1\nlr = 0.2\n").size(), 0u);
    EXPECT_NE(message_of("", {"train.nope=1"}).find("nope"), std::string::npos);
    EXPECT_NE(message_of("", {"noequals"}).size(), 0u);
    EXPECT_NE(message_of("[strategy]\nkind = svf\nsubspaces = W\n").size(), 0u);
    EXPECT_NE(message_of("[data]\nimage_size = 40\n").size(), 0u);
    EXPECT_NE(message_of("[train]\nprecision = single\n").size(), 0u);
}

TEST(Config, MissingFileNamesThePath) {
    try {
        svf::load_config("/nonexistent/dir/x.ini");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.ini"), std::string::npos);
    }
}

TEST(Config, ToIniRoundTrips) {
    const auto cfg = parse("[strategy]\nkind = convkind\nkernels = 3x3\nstages = 3,4\nbn_trainable = true\n[model]\nhead_width = 16\n",
                           {"experiment.output_dir=/tmp/x", "eval.shots=5"});
    const auto back = parse(svf::to_ini(cfg));
    EXPECT_EQ(svf::to_ini(back), svf::to_ini(cfg));
    EXPECT_EQ(back.strategy, cfg.strategy);
    EXPECT_EQ(back.head_width, 16u);
    EXPECT_EQ(back.eval_shots, (std::vector<std::size_t>{5}));
}
