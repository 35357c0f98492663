#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "svf/strategy.hpp"
#include "svf/svf.hpp"

using svf::ConvGeometry;
using svf::DecomposedConv;
using svf::StrategyConfig;
using svf::SvfVariant;
using svf::Tensor4;

TEST(Decompose, UnitOneByOne) {
    const auto d = svf::decompose_conv(Tensor4({1, 1, 1, 1}, {1.0}), ConvGeometry::square(1), SvfVariant::A);
    EXPECT_EQ(d.conv_v.value, Tensor4({1, 1, 1, 1}, {1.0}));
    EXPECT_EQ(d.scale.value, Tensor4::vector({1.0}));
    EXPECT_EQ(d.conv_u.value, Tensor4({1, 1, 1, 1}, {1.0}));
}

TEST(Decompose, OrthogonalWeightHasUnitScale) {
    const double c = std::cos(0.4), s = std::sin(0.4);
    const Tensor4 w({2, 2, 1, 1}, {c, -s, s, c});
    const auto d = svf::decompose_conv(w, ConvGeometry::square(1), SvfVariant::A);
    for (double v : d.scale.value.values()) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(Decompose, ShapesAndTrainability) {
    std::mt19937_64 rng(1);
    const Tensor4 w = oracle::random_tensor({8, 4, 3, 3}, rng);
    const auto a = svf::decompose_conv(w, ConvGeometry::square(3, 2, 1), SvfVariant::A, "s2.b1");
    EXPECT_EQ(a.rank(), 8u);
    EXPECT_EQ(a.conv_v.value.dims(), (svf::Dims4{8, 4, 3, 3}));
    EXPECT_EQ(a.conv_u.value.dims(), (svf::Dims4{8, 8, 1, 1}));
    EXPECT_EQ(a.scale.name, "s2.b1.scale");
    EXPECT_TRUE(a.scale.trainable);
    EXPECT_FALSE(a.conv_v.trainable);
    EXPECT_FALSE(a.conv_u.trainable);
    EXPECT_FALSE(a.s_prime.has_value());
    for (std::size_t i = 1; i < a.rank(); ++i) EXPECT_GE(a.scale.value[i - 1], a.scale.value[i]);

    const auto b = svf::decompose_conv(w, ConvGeometry::square(3, 2, 1), SvfVariant::B, "s2.b1");
    ASSERT_TRUE(b.s_prime.has_value());
    EXPECT_FALSE(b.scale.trainable);
    EXPECT_TRUE(b.s_prime->trainable);
    EXPECT_EQ(b.s_prime->value, Tensor4({8, 1, 1, 1}, 0.0));
    EXPECT_EQ(b.effective_scale(), a.effective_scale());

    // wide fold: R = C_i K^2 when that is smaller than C_o
    const auto n = svf::decompose_conv(oracle::random_tensor({6, 2, 1, 1}, rng), ConvGeometry::square(1), SvfVariant::A);
    EXPECT_EQ(n.rank(), 2u);
    EXPECT_EQ(n.conv_u.value.dims(), (svf::Dims4{6, 2, 1, 1}));
}

TEST(Decompose, InitialForwardMatchesDirectConvolution) {
    std::mt19937_64 rng(321);
    const Tensor4 w = oracle::random_tensor({8, 4, 3, 3}, rng);
    const auto g = ConvGeometry::square(3, 2, 1);
    const Tensor4 x = oracle::random_tensor({2, 4, 9, 9}, rng);
    const Tensor4 ref = oracle::naive_conv2d(x, w, g);
    for (auto v : {SvfVariant::A, SvfVariant::B}) {
        const auto d = svf::decompose_conv(w, g, v);
        EXPECT_LE(oracle::rel_frobenius(svf::svf_forward(d, x), ref), 1e-10);
    }
}

TEST(Decompose, InitialisationEquivalenceOverRandomConfigs) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_int_distribution<std::size_t> ch(1, 9);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t k = coin(rng) ? 3 : 1;
        const auto g = ConvGeometry::square(k, coin(rng) ? 2 : 1, coin(rng));
        const Tensor4 w = oracle::random_tensor({ch(rng), ch(rng), k, k}, rng);
        const Tensor4 x = oracle::random_tensor({2, w.dim(1), 8, 7}, rng);
        const Tensor4 ref = oracle::naive_conv2d(x, w, g);
        for (auto v : {SvfVariant::A, SvfVariant::B}) {
            const auto d = svf::decompose_conv(w, g, v);
            EXPECT_LE(oracle::rel_frobenius(svf::svf_forward(d, x), ref), 1e-10) << "trial " << trial;
        }
    }
}

TEST(SvfForward, VariantBAtInitIsBitwiseVariantA) {
    std::mt19937_64 rng(2);
    const Tensor4 w = oracle::random_tensor({5, 3, 3, 3}, rng);
    const Tensor4 x = oracle::random_tensor({2, 3, 6, 6}, rng);
    const auto g = ConvGeometry::square(3, 1, 1);
    EXPECT_EQ(svf::svf_forward(svf::decompose_conv(w, g, SvfVariant::A), x),
              svf::svf_forward(svf::decompose_conv(w, g, SvfVariant::B), x));
}

TEST(SvfForward, ZeroScaleGivesZeroOutput) {
    std::mt19937_64 rng(3);
    auto d = svf::decompose_conv(oracle::random_tensor({4, 2, 3, 3}, rng), ConvGeometry::square(3, 1, 1), SvfVariant::A);
    d.scale.value.fill(0.0);
    const Tensor4 y = svf::svf_forward(d, oracle::random_tensor({1, 2, 5, 5}, rng));
    EXPECT_EQ(y, Tensor4(y.dims(), 0.0));
}

TEST(SvfForward, MatchesConvWithRecomposedWeight) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto v : {SvfVariant::A, SvfVariant::B}) {
        const auto g = ConvGeometry::square(3, 2, 1);
        auto d = svf::decompose_conv(oracle::random_tensor({6, 3, 3, 3}, rng), g, v);
        for (double& s : d.singular_param().value.values()) s += jitter(rng);
        const Tensor4 x = oracle::random_tensor({2, 3, 8, 8}, rng);
        EXPECT_LE(oracle::rel_frobenius(svf::svf_forward(d, x), oracle::naive_conv2d(x, svf::recompose(d), g)), 1e-10);
    }
}

TEST(SvfForward, ChannelMismatchThrows) {
    std::mt19937_64 rng(5);
    const auto d = svf::decompose_conv(oracle::random_tensor({4, 2, 1, 1}, rng), ConvGeometry::square(1), SvfVariant::A);
    EXPECT_THROW(svf::svf_forward(d, Tensor4({1, 3, 2, 2})), svf::ShapeError);
}

TEST(Recompose, RoundTripAtInit) {
    std::mt19937_64 rng(6);
    for (const svf::Dims4 dims : {svf::Dims4{8, 4, 3, 3}, svf::Dims4{64, 4, 3, 3}, svf::Dims4{3, 7, 1, 1}}) {
        const Tensor4 w = oracle::random_tensor(dims, rng);
        const auto d = svf::decompose_conv(w, ConvGeometry::square(dims[2], 1, dims[2] / 2), SvfVariant::A);
        EXPECT_LE(oracle::rel_frobenius(svf::recompose(d), w), 1e-10);
    }
}

TEST(Recompose, DoubledScaleDoublesSingularValues) {
    std::mt19937_64 rng(7);
    auto d = svf::decompose_conv(oracle::random_tensor({5, 2, 3, 3}, rng), ConvGeometry::square(3, 1, 1), SvfVariant::A);
    const auto before = d.scale.value;
    for (double& s : d.scale.value.values()) s *= 2.0;
    const auto f = svf::svd(svf::fold_weights(svf::recompose(d)));
    for (std::size_t i = 0; i < f.s.size(); ++i) EXPECT_NEAR(f.s[i], 2.0 * before[i], 1e-10 * before[0]);
}

TEST(Recompose, LnTwoShiftEqualsDoubledScale) {
    std::mt19937_64 rng(8);
    const Tensor4 w = oracle::random_tensor({4, 3, 3, 3}, rng);
    const auto g = ConvGeometry::square(3, 1, 1);
    auto a = svf::decompose_conv(w, g, SvfVariant::A);
    auto b = svf::decompose_conv(w, g, SvfVariant::B);
    for (double& s : a.scale.value.values()) s *= 2.0;
    b.s_prime->value.fill(std::log(2.0));
    EXPECT_LE(oracle::rel_frobenius(svf::recompose(b), svf::recompose(a)), 1e-14);
}

TEST(VariantB, EffectiveScaleStaysPositive) {
    std::mt19937_64 rng(9);
    auto b = svf::decompose_conv(oracle::random_tensor({6, 3, 1, 1}, rng), ConvGeometry::square(1), SvfVariant::B);
    for (double sp : {-30.0, -5.0, 0.0, 3.0}) {
        b.s_prime->value.fill(sp);
        for (double v : b.effective_scale()) EXPECT_GT(v, 0.0);
    }
}

TEST(EmitSvf, GraphForwardMatchesSvfForwardAndOnlyScaleGetsGradient) {
    std::mt19937_64 rng(10);
    const auto g = ConvGeometry::square(3, 2, 1);
    for (auto v : {SvfVariant::A, SvfVariant::B}) {
        auto d = svf::decompose_conv(oracle::random_tensor({4, 3, 3, 3}, rng), g, v, "L");
        const Tensor4 x = oracle::random_tensor({2, 3, 8, 8}, rng);
        svf::ad::Graph graph;
        const auto y = svf::emit_svf(graph, d, graph.input("x", x.dims()));
        const auto logits = graph.concat_channels(graph.avgpool2(y), graph.avgpool2(y));
        Tensor4 labels({2, 1, 2, 2});
        labels[1] = labels[6] = 1.0;
        const auto loss = graph.softmax_xent(graph.upsample(logits, 1), graph.input("t", labels.dims()));
        graph.forward({{"x", x}, {"t", labels}});
        EXPECT_EQ(graph.value(y), svf::svf_forward(d, x));
        graph.backward(loss);
        EXPECT_FALSE(d.conv_v.grad.has_value());
        EXPECT_FALSE(d.conv_u.grad.has_value());
        ASSERT_TRUE(d.singular_param().grad.has_value());
        double norm = 0.0;
        for (double gv : d.singular_param().grad->values()) norm += std::abs(gv);
        EXPECT_GT(norm, 0.0);
    }
}

TEST(Report, IdenticalSnapshotsHaveZeroDeltas) {
    std::mt19937_64 rng(11);
    const auto d = svf::decompose_conv(oracle::random_tensor({8, 4, 3, 3}, rng), ConvGeometry::square(3, 1, 1),
                                       SvfVariant::A);
    const auto r = svf::singular_value_report("L", d, d);
    ASSERT_EQ(r.size(), 8u);
    for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_EQ(r[i].position, i + 1);
        EXPECT_EQ(r[i].delta, 0.0);
    }
}

TEST(Report, TopKClampsToRank) {
    std::mt19937_64 rng(12);
    const auto d = svf::decompose_conv(oracle::random_tensor({5, 1, 3, 3}, rng), ConvGeometry::square(3, 1, 1),
                                       SvfVariant::A);
    EXPECT_EQ(svf::singular_value_report("L", d, d, 30).size(), 5u);
    EXPECT_EQ(svf::singular_value_report("L", d, d, 3).size(), 3u);
}

TEST(Report, RanksByInitialValueAndSubtracts) {
    const std::vector<double> init{1.0, 3.0, 2.0};
    const std::vector<double> fin{1.5, 2.0, 2.25};
    const auto r = svf::singular_value_report("L", init, fin, 30);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[0].initial, 3.0);
    EXPECT_EQ(r[0].delta, -1.0);
    EXPECT_EQ(r[1].initial, 2.0);
    EXPECT_EQ(r[1].delta, 0.25);
    EXPECT_EQ(r[2].delta, 0.5);
}

TEST(Report, CsvHeaderAndPrecision) {
    const std::vector<svf::SvdChangeRecord> recs{{"s4.b2", 1, 1.0 / 3.0, 0.5, 0.5 - 1.0 / 3.0}};
    std::ostringstream out;
    svf::write_svd_changes_csv(out, recs);
    EXPECT_EQ(out.str(), "layer,position,initial,final,delta\ns4.b2,1,0.333333333,0.5,0.166666667\n");
}

TEST(Ratio, SingleSquareOneByOne) {
    const std::vector<svf::LayerShape> one{{2, 4, 4, 1}};
    EXPECT_DOUBLE_EQ(svf::trainable_param_ratio(one, StrategyConfig::svf()), 0.25);
}

TEST(Ratio, FullFineTuneIsOne) {
    std::vector<svf::LayerShape> shapes{{1, 8, 3, 3}, {2, 16, 8, 3}, {3, 32, 16, 1}, {4, 64, 32, 3}};
    EXPECT_DOUBLE_EQ(svf::trainable_param_ratio(shapes, StrategyConfig::full()), 1.0);
    EXPECT_EQ(svf::trainable_param_ratio(shapes, StrategyConfig::freeze()), 0.0);
}

TEST(Ratio, EmptyListThrows) {
    EXPECT_THROW(svf::trainable_param_ratio({}, StrategyConfig::svf()), std::invalid_argument);
}

TEST(Ratio, SubspaceCountsFollowFactorShapes) {
    const std::vector<svf::LayerShape> one{{3, 6, 2, 3}};  // R = min(6, 18) = 6
    EXPECT_EQ(svf::trainable_conv_scalars(one, StrategyConfig::svf({true, false, false})), 36u);
    EXPECT_EQ(svf::trainable_conv_scalars(one, StrategyConfig::svf({false, true, false})), 6u);
    EXPECT_EQ(svf::trainable_conv_scalars(one, StrategyConfig::svf({false, false, true})), 108u);
    EXPECT_EQ(svf::trainable_conv_scalars(one, StrategyConfig::svf({true, true, true})), 150u);
}

TEST(Ratio, Resnet50ShapesAndClosedForm) {
    const auto shapes = svf::resnet50_conv_shapes();
    EXPECT_EQ(shapes.size(), 53u);  // stem + 16 blocks x 3 + 4 projections
    std::size_t all = 0;
    for (const auto& l : shapes) all += l.weights();
    EXPECT_EQ(all, 23454912u);  // conv weights of the 50-layer network, fc excluded

    std::size_t closed = 0;
    for (const auto& l : shapes)
        if (l.stage >= 2) closed += std::min(l.c_out, l.c_in * l.kernel * l.kernel);
    const double ratio = svf::trainable_param_ratio(shapes, StrategyConfig::svf());
    EXPECT_EQ(ratio, static_cast<double>(closed) / static_cast<double>(all));
    EXPECT_LT(ratio, 0.01);
}

TEST(Strategy, LabelsAndValidation) {
    EXPECT_EQ(StrategyConfig::svf().label(), "svf-S-234");
    EXPECT_EQ(StrategyConfig::freeze().label(), "freeze");
    EXPECT_THROW(StrategyConfig::svf({false, false, false}).validate(), std::invalid_argument);
    EXPECT_THROW(StrategyConfig::layers({0, 2}).validate(), std::invalid_argument);
    EXPECT_TRUE(StrategyConfig::conv_kind(svf::KernelSelect::Conv1x1).selects(2, 1));
    EXPECT_FALSE(StrategyConfig::conv_kind(svf::KernelSelect::Conv1x1).selects(2, 3));
    EXPECT_FALSE(StrategyConfig::svf().selects(1, 3));
    EXPECT_EQ(svf::parse_stages("2,3,4"), (std::set<int>{2, 3, 4}));
    EXPECT_EQ(svf::parse_subspaces("U+S"), (svf::Subspaces{true, true, false}));
}
