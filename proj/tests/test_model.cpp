#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "svf/model.hpp"

using svf::Backbone;
using svf::Episode;
using svf::EpisodeConfig;
using svf::FssModel;
using svf::SplitPlan;
using svf::StrategyConfig;

namespace {

FssModel small_model(const StrategyConfig& strategy, std::uint64_t seed = 5) {
    return svf::build_fss_model(Backbone::init(svf::kDefaultChannels, seed), 8, seed + 1, strategy);
}

EpisodeConfig small_episodes(std::size_t shots = 1) {
    EpisodeConfig cfg;
    cfg.scene.image_size = 32;
    cfg.shots = shots;
    return cfg;
}

bool same(const svf::Tensor4& a, const svf::Tensor4& b) { return a.dims() == b.dims() && a == b; }

double max_abs_diff(const svf::Tensor4& a, const svf::Tensor4& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<const Episode*> pointers(const std::vector<Episode>& eps) {
    std::vector<const Episode*> out;
    for (const auto& e : eps) out.push_back(&e);
    return out;
}

}  // namespace

TEST(Backbone, StageDimsHalveEachStage) {
    const Backbone b = Backbone::init(svf::kDefaultChannels, 1);
    for (std::size_t size : {32, 48, 64}) {
        const auto d = b.stage_dims(2, size, size);
        for (std::size_t s = 0; s < 4; ++s)
            EXPECT_EQ(d[s], (svf::Dims4{2, svf::kDefaultChannels[s], size >> s, size >> s})) << size;
    }
    EXPECT_EQ(b.convs().size(), 12u);
}

TEST(Backbone, ImageSizeMustBeMultipleOfSixteen) {
    EXPECT_NO_THROW(svf::check_image_size(48));
    EXPECT_THROW(svf::check_image_size(40), std::invalid_argument);
    EXPECT_THROW(svf::check_image_size(16), std::invalid_argument);
}

TEST(Strategy, TrainableBackboneScalarsMatchLayerCounts) {
    const Backbone b = Backbone::init(svf::kDefaultChannels, 2);
    const auto shapes = b.layer_shapes();
    for (const StrategyConfig& s :
         {StrategyConfig::freeze(), StrategyConfig::full(), StrategyConfig::layers({3, 4}), StrategyConfig::svf(),
          StrategyConfig::svf({true, true, false}, {4}), StrategyConfig::conv_kind(svf::KernelSelect::Conv1x1)}) {
        FssModel m = small_model(s);
        EXPECT_EQ(m.trainable_backbone_scalars(), svf::trainable_conv_scalars(shapes, s)) << s.label();
    }
    FssModel frozen = small_model(StrategyConfig::freeze());
    EXPECT_EQ(frozen.trainable_backbone_scalars(), 0u);
}

TEST(Strategy, SvfOfStagesTwoToFourTrainsOnlySingularValues) {
    FssModel m = small_model(StrategyConfig::svf());
    std::size_t ranks = 0, decomposed = 0;
    for (const auto& c : m.backbone.convs()) {
        if (c.stage >= 2) {
            ASSERT_TRUE(c.decomposed()) << c.name;
            ++decomposed;
            ranks += c.svf->rank();
            EXPECT_EQ(c.svf->rank(), svf::svf_rank(c.c_out, c.c_in, c.kernel, c.kernel));
        } else {
            EXPECT_FALSE(c.decomposed()) << c.name;
        }
        EXPECT_FALSE(c.bn.gamma.trainable);
        EXPECT_FALSE(c.bn.mean.trainable);
    }
    EXPECT_EQ(decomposed, 9u);
    EXPECT_EQ(m.trainable_backbone_scalars(), ranks);
    EXPECT_EQ(svf::frozen_stage_prefix(m), 1u);
}

TEST(Strategy, DecompositionKeepsTheForward) {
    EpisodeConfig cfg = small_episodes();
    const Episode e = svf::sample_episode(SplitPlan{}, svf::Split::Test, cfg, 3);
    FssModel plain = small_model(StrategyConfig::freeze());
    FssModel svd = small_model(StrategyConfig::svf({}, {1, 2, 3, 4}));
    EXPECT_LT(max_abs_diff(svf::segment(plain, e), svf::segment(svd, e)), 1e-9);
}

TEST(Segment, OutputShapeAndEmptySupportRejected) {
    FssModel m = small_model(StrategyConfig::freeze());
    Episode e = svf::sample_episode(SplitPlan{}, svf::Split::Test, small_episodes(), 4);
    EXPECT_EQ(svf::segment(m, e).dims(), (svf::Dims4{1, 2, 32, 32}));
    e.supports[0].mask.fill(0.0);
    EXPECT_THROW(svf::segment(m, e), std::invalid_argument);
}

TEST(Segment, DuplicatedFiveShotEqualsOneShot) {
    FssModel m = small_model(StrategyConfig::freeze());
    EpisodeConfig five = small_episodes(5);
    five.duplicate_supports = true;
    const Episode a = svf::sample_episode(SplitPlan{}, svf::Split::Test, small_episodes(1), 9);
    const Episode b = svf::sample_episode(SplitPlan{}, svf::Split::Test, five, 9);
    EXPECT_LT(max_abs_diff(svf::segment(m, a), svf::segment(m, b)), 1e-12);
}

TEST(StageCache, CachedGraphIsBitwiseThePlainGraph) {
    for (const StrategyConfig& s : {StrategyConfig::freeze(), StrategyConfig::svf(), StrategyConfig::layers({4})}) {
        FssModel m = small_model(s);
        const std::size_t prefix = svf::frozen_stage_prefix(m);
        ASSERT_GT(prefix, 0u) << s.label();
        const auto eps = svf::sample_episodes(SplitPlan{}, svf::Split::Train, small_episodes(2), 8, 1, 0, 3);
        svf::StageCache cache(m, prefix, 32);
        cache.add(eps);
        svf::FssGraph plain(m, 3, 2, 32), cached(m, 3, 2, 32, prefix);
        const auto ptrs = pointers(eps);
        const svf::Tensor4 a = plain.forward(ptrs);
        const svf::Tensor4 b = cached.forward(ptrs, &cache);
        EXPECT_TRUE(same(a, b)) << s.label();
        EXPECT_EQ(plain.loss(), cached.loss());
        EXPECT_THROW(svf::StageCache(m, prefix + 1, 32), std::invalid_argument);
    }
}

TEST(StageCache, StagesReadCoverWhatTheRemainingGraphNeeds) {
    EXPECT_EQ(svf::StageCache::stages_read(1), (std::vector<std::size_t>{0}));
    EXPECT_EQ(svf::StageCache::stages_read(3), (std::vector<std::size_t>{2}));
    EXPECT_EQ(svf::StageCache::stages_read(4), (std::vector<std::size_t>{2, 3}));
}

TEST(Pretrain, ZeroEpochsReturnsInitialBackbone) {
    const Backbone init = Backbone::init(svf::kDefaultChannels, 3);
    svf::PretrainConfig cfg;
    cfg.epochs = 0;
    const auto classes = SplitPlan{}.train_classes();
    const auto r = svf::pretrain_backbone(init, classes, 20, cfg);
    EXPECT_TRUE(std::isnan(r.holdout_accuracy));
    EXPECT_TRUE(r.epoch_loss.empty());
    for (std::size_t i = 0; i < init.convs().size(); ++i)
        EXPECT_TRUE(same(init.convs()[i].weight.value, r.backbone.convs()[i].weight.value));
}

TEST(Pretrain, ShortRunIsDeterministicAndCalibratesStatistics) {
    const Backbone init = Backbone::init(svf::kDefaultChannels, 3);
    svf::PretrainConfig cfg;
    cfg.epochs = 1;
    cfg.patches_per_class = 4;
    cfg.holdout_per_class = 2;
    cfg.calibration = 8;
    const auto classes = SplitPlan{}.train_classes();
    const auto a = svf::pretrain_backbone(init, classes, 20, cfg);
    const auto b = svf::pretrain_backbone(init, classes, 20, cfg);
    ASSERT_EQ(a.epoch_loss.size(), 1u);
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
    EXPECT_EQ(a.holdout_accuracy, b.holdout_accuracy);
    for (std::size_t i = 0; i < a.backbone.convs().size(); ++i) {
        const auto& ca = a.backbone.convs()[i];
        EXPECT_TRUE(same(ca.weight.value, b.backbone.convs()[i].weight.value));
        EXPECT_FALSE(same(ca.weight.value, init.convs()[i].weight.value));
        EXPECT_TRUE(same(ca.bn.var.value, b.backbone.convs()[i].bn.var.value));
        EXPECT_FALSE(same(ca.bn.var.value, init.convs()[i].bn.var.value));
    }
}
