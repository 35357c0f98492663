#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "svf/autodiff.hpp"
#include "toy_net.hpp"

using svf::Tensor4;
using svf::ad::Graph;
using svf::ad::Param;

namespace {

Tensor4 run_unary(const Tensor4& x, svf::ad::NodeId (*build)(Graph&, svf::ad::NodeId)) {
    Graph g;
    const auto in = g.input("x", x.dims());
    const auto out = build(g, in);
    g.forward({{"x", x}});
    return g.value(out);
}

}  // namespace

TEST(Ops, DiagScaleByOnesIsIdentity) {
    std::mt19937_64 rng(1);
    const Tensor4 x = oracle::random_tensor({2, 3, 4, 5}, rng);
    Param s("s", Tensor4({3, 1, 1, 1}, 1.0));
    Graph g;
    const auto out = g.diag_scale(g.input("x", x.dims()), g.param(s));
    g.forward({{"x", x}});
    EXPECT_EQ(g.value(out), x);
}

TEST(Ops, ExpOfZerosIsOnes) {
    Param s("s", Tensor4({6, 1, 1, 1}, 0.0));
    Graph g;
    const auto out = g.exp(g.param(s));
    g.forward({});
    EXPECT_EQ(g.value(out), Tensor4({6, 1, 1, 1}, 1.0));
}

TEST(Ops, MaskedAvgPoolWithFullMaskIsSpatialMean) {
    std::mt19937_64 rng(2);
    const Tensor4 f = oracle::random_tensor({2, 3, 4, 4}, rng);
    Graph g;
    const auto out = g.masked_avg_pool(g.input("f", f.dims()), g.input("m", {2, 1, 4, 4}));
    g.forward({{"f", f}, {"m", Tensor4({2, 1, 4, 4}, 1.0)}});
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c) {
            double mean = 0.0;
            for (std::size_t i = 0; i < 16; ++i) mean += f.at(n, c, i / 4, i % 4);
            EXPECT_NEAR(g.value(out).at(n, c, 0, 0), mean / 16.0, 1e-14);
        }
}

TEST(Ops, MaskedAvgPoolGroupAveragesSamples) {
    const Tensor4 f({2, 1, 1, 2}, {1, 3, 5, 9});
    const Tensor4 m({2, 1, 1, 2}, {1, 0, 1, 1});
    Graph g;
    const auto out = g.masked_avg_pool(g.input("f", f.dims()), g.input("m", m.dims()), 2);
    g.forward({{"f", f}, {"m", m}});
    ASSERT_EQ(g.dims(out), (svf::Dims4{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(g.value(out)[0], (1.0 + 7.0) / 2.0);
}

TEST(Ops, MaskedAvgPoolRejectsEmptyMask) {
    Graph g;
    g.masked_avg_pool(g.input("f", {1, 2, 2, 2}), g.input("m", {1, 1, 2, 2}));
    EXPECT_THROW(g.forward({{"f", Tensor4({1, 2, 2, 2}, 1.0)}, {"m", Tensor4({1, 1, 2, 2})}}), std::invalid_argument);
}

TEST(Ops, ReluClampsNegatives) {
    const Tensor4 y = run_unary(Tensor4({2, 1, 1, 1}, {-1.0, 2.0}), [](Graph& g, auto x) { return g.relu(x); });
    EXPECT_EQ(y, Tensor4({2, 1, 1, 1}, {0.0, 2.0}));
}

TEST(Ops, AvgPoolAndUpsampleOfConstantAreConstant) {
    const Tensor4 x({1, 2, 4, 6}, 3.5);
    EXPECT_EQ(run_unary(x, [](Graph& g, auto n) { return g.avgpool2(n); }), Tensor4({1, 2, 2, 3}, 3.5));
    EXPECT_EQ(run_unary(x, [](Graph& g, auto n) { return g.upsample(n, 4); }), Tensor4({1, 2, 16, 24}, 3.5));
}

TEST(Ops, UpsampleInterpolatesBetweenCentres) {
    // 1x2 map [0, 1] upsampled x2 along width: half-pixel centres give [0, .25, .75, 1].
    const Tensor4 y = run_unary(Tensor4({1, 1, 1, 2}, {0.0, 1.0}), [](Graph& g, auto n) { return g.upsample(n, 2); });
    EXPECT_EQ(y, Tensor4({1, 1, 2, 4}, {0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0}));
}

TEST(Ops, CosineOfParallelFeaturesIsOne) {
    Tensor4 f({1, 3, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        f.at(0, 0, i / 2, i % 2) = 1.0 + i;
        f.at(0, 1, i / 2, i % 2) = 2.0 * (1.0 + i);
    }
    Param p("p", Tensor4({1, 3, 1, 1}, {1.0, 2.0, 0.0}));
    Graph g;
    const auto out = g.cosine_similarity_map(g.input("f", f.dims()), g.param(p));
    g.forward({{"f", f}});
    for (double v : g.value(out).values()) EXPECT_NEAR(v, 1.0, 1e-8);
}

TEST(Ops, CosineOfZeroFeatureIsZero) {
    Param p("p", Tensor4({1, 2, 1, 1}, {1.0, 1.0}));
    Graph g;
    const auto out = g.cosine_similarity_map(g.input("f", {1, 2, 1, 1}), g.param(p));
    g.forward({{"f", Tensor4({1, 2, 1, 1})}});
    EXPECT_EQ(g.value(out)[0], 0.0);
}

TEST(Ops, SoftmaxXentOfEqualLogitsIsLogK) {
    Graph g;
    const auto out = g.softmax_xent(g.input("z", {1, 3, 2, 2}), g.input("t", {1, 1, 2, 2}));
    g.forward({{"z", Tensor4({1, 3, 2, 2}, 0.7)}, {"t", Tensor4({1, 1, 2, 2}, {0, 1, 2, 1})}});
    EXPECT_NEAR(g.value(out)[0], std::log(3.0), 1e-15);
}

TEST(Ops, BatchNormFrozenIsAffine) {
    Param gamma("g", Tensor4::vector({2.0})), beta("b", Tensor4::vector({1.0}));
    Param mean("m", Tensor4::vector({3.0})), var("v", Tensor4::vector({4.0 - svf::ad::kBatchNormEps}));
    Graph g;
    const auto out = g.batchnorm_frozen(g.input("x", {1, 1, 1, 2}), g.param(gamma), g.param(beta), g.param(mean),
                                        g.param(var));
    g.forward({{"x", Tensor4({1, 1, 1, 2}, {3.0, 5.0})}});
    EXPECT_NEAR(g.value(out)[0], 1.0, 1e-12);
    EXPECT_NEAR(g.value(out)[1], 3.0, 1e-12);
}

TEST(Ops, BatchNormStatisticsMustStayFrozen) {
    Param gamma("g", Tensor4::vector({1.0})), beta("b", Tensor4::vector({0.0}));
    Param mean("m", Tensor4::vector({0.0}), true), var("v", Tensor4::vector({1.0}));
    Graph g;
    g.batchnorm_frozen(g.input("x", {1, 1, 1, 1}), g.param(gamma), g.param(beta), g.param(mean), g.param(var));
    EXPECT_THROW(g.forward({{"x", Tensor4({1, 1, 1, 1})}}), std::logic_error);
}

TEST(Construction, ShapeMismatchFailsAtBuildTime) {
    Graph g;
    const auto x = g.input("x", {1, 3, 4, 4});
    Param w("w", Tensor4({2, 4, 3, 3}));
    EXPECT_THROW(g.conv2d(x, g.param(w), svf::ConvGeometry::square(3, 1, 1)), svf::ShapeError);
    Param s("s", Tensor4::vector({1.0, 1.0}));
    EXPECT_THROW(g.diag_scale(x, g.param(s)), svf::ShapeError);
    EXPECT_THROW(g.add(x, g.input("y", {1, 3, 4, 5})), svf::ShapeError);
    EXPECT_THROW(g.avgpool2(g.input("odd", {1, 1, 3, 3})), svf::ShapeError);
}

TEST(Forward, EmptyGraphPassesInputsThrough) {
    std::mt19937_64 rng(3);
    const Tensor4 x = oracle::random_tensor({1, 2, 3, 3}, rng);
    Graph g;
    const auto in = g.input("x", x.dims());
    g.forward({{"x", x}});
    EXPECT_EQ(g.value(in), x);
}

TEST(Forward, UnboundInputsAndParamsFail) {
    Graph g;
    g.input("x", {1, 1, 1, 1});
    EXPECT_THROW(g.forward({}), std::invalid_argument);
    Graph h;
    h.relu(h.param_slot("w", {1, 1, 1, 1}));
    EXPECT_THROW(h.forward({}), std::logic_error);
}

TEST(Forward, ToyNetIsDeterministic) {
    toy::Net a, b;
    toy::build(a, 5);
    toy::build(b, 5);
    a.graph.forward(a.inputs);
    b.graph.forward(b.inputs);
    a.graph.forward(a.inputs);
    EXPECT_EQ(a.graph.value(a.loss), b.graph.value(b.loss));
}

TEST(Backward, BeforeForwardFails) {
    toy::Net net;
    toy::build(net, 6);
    EXPECT_THROW(net.graph.backward(net.loss), std::logic_error);
}

TEST(Backward, DiagScaleGradientIsChannelSum) {
    std::mt19937_64 rng(7);
    const Tensor4 x = oracle::random_tensor({2, 3, 2, 3}, rng);
    Param s("s", oracle::random_tensor({3, 1, 1, 1}, rng), true);
    Param ones("ones", Tensor4({1, 3, 1, 1}, 1.0));
    // total = sum(y) / 12 via a full-mask pool over both samples and a unit 1x1 conv.
    Graph g;
    const auto y = g.diag_scale(g.input("x", x.dims()), g.param(s));
    const auto pooled = g.masked_avg_pool(y, g.input("m", {2, 1, 2, 3}), 2);
    const auto total = g.conv2d(pooled, g.param(ones), svf::ConvGeometry::square(1));
    g.forward({{"x", x}, {"m", Tensor4({2, 1, 2, 3}, 1.0)}});
    g.backward(total);
    ASSERT_TRUE(s.grad.has_value());
    for (std::size_t c = 0; c < 3; ++c) {
        double sum = 0.0;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 6; ++i) sum += x.at(n, c, i / 3, i % 3);
        EXPECT_NEAR((*s.grad)[c], sum / 12.0, 1e-14);
    }
    EXPECT_FALSE(ones.grad.has_value());
}

TEST(Backward, AllFrozenProducesNoGradients) {
    toy::Net net;
    toy::build(net, 8);
    for (auto* p : net.params()) p->trainable = false;
    net.graph.forward(net.inputs);
    net.graph.backward(net.loss);
    for (auto* p : net.params()) EXPECT_FALSE(p->grad.has_value()) << p->name;
}

TEST(Backward, GradientsAreOverwrittenNotAccumulated) {
    toy::Net net;
    toy::build(net, 9);
    net.graph.forward(net.inputs);
    net.graph.backward(net.loss);
    const Tensor4 first = *net.w1.grad;
    net.graph.backward(net.loss);
    EXPECT_EQ(*net.w1.grad, first);
}

TEST(Backward, NonTrainableGradIsCleared) {
    toy::Net net;
    toy::build(net, 10);
    net.graph.forward(net.inputs);
    net.graph.backward(net.loss);
    ASSERT_TRUE(net.w2.grad.has_value());
    net.w2.trainable = false;
    net.graph.backward(net.loss);
    EXPECT_FALSE(net.w2.grad.has_value());
    EXPECT_FALSE(net.mean.grad.has_value());
    EXPECT_FALSE(net.var.grad.has_value());
}

TEST(Backward, ToyNetMatchesFiniteDifferences) {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        toy::Net net;
        toy::build(net, seed);
        const auto r = toy::check_gradients(net.graph, net.loss, net.inputs, net.trainable());
        EXPECT_GT(r.compared, 100u);
        EXPECT_LE(r.worst, 1e-5) << "seed " << seed << " worst at " << r.worst_at;
    }
}

TEST(Backward, MaskAndPrototypeGradientsMatchFiniteDifferences) {
    // Soft mask and prototype as trainable leaves cover the remaining input gradients.
    std::mt19937_64 rng(14);
    Param feat("feat", oracle::random_tensor({2, 3, 4, 4}, rng), true);
    Tensor4 soft({2, 1, 4, 4});
    std::uniform_real_distribution<double> u(0.2, 1.0);
    for (double& v : soft.values()) v = u(rng);
    Param mask("mask", soft, true);
    Param query("query", oracle::random_tensor({1, 3, 4, 4}, rng), true);
    Param w("w", oracle::random_tensor({2, 4, 1, 1}, rng), true);
    Graph g;
    const auto proto = g.masked_avg_pool(g.param(feat), g.param(mask), 2);
    const auto sim = g.cosine_similarity_map(g.param(query), proto);
    const auto logits = g.conv2d(g.concat_channels(sim, g.param(query)), g.param(w), svf::ConvGeometry::square(1));
    Tensor4 labels({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; i += 3) labels[i] = 1.0;
    const auto loss = g.softmax_xent(logits, g.input("t", labels.dims()));
    const auto r = toy::check_gradients(g, loss, {{"t", labels}}, {&feat, &mask, &query, &w});
    EXPECT_LE(r.worst, 1e-5) << r.worst_at;
}

TEST(Backward, MaskingNeverChangesReceivedGradients) {
    toy::Net full;
    toy::build(full, 15);
    full.graph.forward(full.inputs);
    full.graph.backward(full.loss);

    const std::vector<std::vector<std::string>> frozen_sets = {{"w1"}, {"gamma", "beta"}, {"s", "w2"}, {"s2", "w1", "w2"}};
    for (const auto& frozen : frozen_sets) {
        toy::Net net;
        toy::build(net, 15);
        for (auto* p : net.params())
            if (std::find(frozen.begin(), frozen.end(), p->name) != frozen.end()) p->trainable = false;
        net.graph.forward(net.inputs);
        net.graph.backward(net.loss);
        const auto ref = full.params();
        const auto got = net.params();
        for (std::size_t k = 0; k < got.size(); ++k) {
            if (!got[k]->trainable) {
                EXPECT_FALSE(got[k]->grad.has_value());
                continue;
            }
            ASSERT_TRUE(got[k]->grad.has_value()) << got[k]->name;
            EXPECT_EQ(*got[k]->grad, *ref[k]->grad) << got[k]->name;
        }
    }
}
