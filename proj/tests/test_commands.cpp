#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "svf/checkpoint.hpp"
#include "svf/commands.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

std::size_t lines(const fs::path& p) {
    const std::string s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// A seconds-scale experiment at 32x32 with a briefly pretrained backbone.
svf::ExperimentConfig tiny(const fs::path& out, const std::string& kind) {
    std::istringstream in("");
    return svf::parse_config(in, "tiny",
                             {"experiment.output_dir=" + out.string(), "data.image_size=32", "model.head_width=8",
                              "pretrain.epochs=1", "pretrain.patches_per_class=4", "pretrain.holdout_per_class=2",
                              "pretrain.calibration=8", "train.epochs=2", "train.episodes_per_epoch=4",
                              "train.train_pool=4", "train.batch=2", "train.val_episodes=4", "train.eval_batch=4",
                              "strategy.kind=" + kind});
}

class Commands : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() / "svf_commands_test";
        fs::remove_all(root_);
    }
    void TearDown() override { fs::remove_all(root_); }
    fs::path root_;
};

}  // namespace

TEST_F(Commands, TrainWithoutBackboneNamesTheMissingCheckpoint) {
    std::ostringstream log;
    try {
        svf::cmd_train(tiny(root_ / "a", "svf"), log);
        FAIL();
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("backbone"), std::string::npos) << e.what();
    }
}

TEST_F(Commands, PretrainTrainEvalRoundTripIsReproducible) {
    std::ostringstream log;
    auto cfg = tiny(root_ / "a", "svf");
    svf::cmd_pretrain(cfg, log);
    EXPECT_TRUE(fs::exists(cfg.backbone_dir() / "manifest.txt"));
    const auto first = svf::cmd_train(cfg, log);
    const std::string history = slurp(cfg.output_dir / "history.csv");
    const std::string svd = slurp(cfg.output_dir / "svd_changes.csv");
    EXPECT_EQ(lines(cfg.output_dir / "history.csv"), 3u);
    EXPECT_EQ(lines(cfg.output_dir / "result.csv"), 2u);
    EXPECT_NE(log.str().find("[epoch 2]"), std::string::npos);

    std::size_t expected_rows = 0;
    const svf::FssModel saved = svf::load_model(cfg.model_dir());
    for (const auto& c : saved.backbone.convs())
        if (c.decomposed()) expected_rows += std::min<std::size_t>(c.svf->rank(), 30);
    EXPECT_EQ(first.svd_changes.size(), expected_rows);
    EXPECT_EQ(lines(cfg.output_dir / "svd_changes.csv"), expected_rows + 1);
    for (const auto& r : first.svd_changes) EXPECT_EQ(r.delta, r.final - r.initial);

    svf::cmd_train(cfg, log);
    EXPECT_EQ(slurp(cfg.output_dir / "history.csv"), history);
    EXPECT_EQ(slurp(cfg.output_dir / "svd_changes.csv"), svd);

    const auto rows = svf::cmd_eval(cfg, cfg.model_dir(), log);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].k, 1u);
    EXPECT_EQ(rows[1].k, 5u);
    EXPECT_EQ(rows[0].miou, first.result.miou);
    EXPECT_EQ(lines(cfg.output_dir / "eval.csv"), 3u);

    auto freeze = tiny(root_ / "a", "freeze");
    svf::cmd_train(freeze, log);
    EXPECT_FALSE(fs::exists(freeze.output_dir / "svd_changes.csv"));
}

TEST(Ablation, AxesHaveTheirRowSets) {
    auto labels = [](const std::string& axis) {
        std::vector<std::string> out;
        for (const auto& s : svf::ablation_strategies(axis)) out.push_back(s.label());
        return out;
    };
    EXPECT_EQ(svf::ablation_axes().size(), 5u);
    EXPECT_EQ(svf::ablation_strategies("subspace").size(), 7u);
    EXPECT_EQ(svf::ablation_strategies("svf-layers").size(), 4u);
    EXPECT_EQ(svf::ablation_strategies("bn").size(), 4u);
    EXPECT_EQ(svf::ablation_strategies("layers").size(), 6u);
    EXPECT_EQ(svf::ablation_strategies("convkind").size(), 5u);
    for (const auto& axis : svf::ablation_axes()) {
        const auto l = labels(axis);
        EXPECT_EQ(std::set<std::string>(l.begin(), l.end()).size(), l.size()) << axis;
    }
    EXPECT_THROW(svf::ablation_strategies("bogus"), std::invalid_argument);
}
