#pragma once

// Four-stage convolutional backbone with frozen-statistics batch norm and a
// prototype segmentation head. Stage s: a 1x1 entry conv (stride 2 from stage
// 2 on), then two 3x3 blocks; every conv is followed by batch norm and relu,
// and the stage output is entry + second block.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svf/autodiff.hpp"
#include "svf/episodes.hpp"
#include "svf/strategy.hpp"
#include "svf/svf.hpp"

namespace svf {

using ChannelPlan = std::array<std::size_t, 4>;
inline constexpr ChannelPlan kDefaultChannels{8, 16, 32, 64};

struct BatchNorm {
    ad::Param gamma, beta, mean, var;
};

struct BackboneConv {
    std::string name;  // "s<stage>.down", "s<stage>.b1", "s<stage>.b2"
    int stage = 0;
    std::size_t c_in = 0, c_out = 0, kernel = 1;
    ConvGeometry geometry;
    ad::Param weight;
    std::optional<DecomposedConv> svf;
    BatchNorm bn;

    bool decomposed() const { return svf.has_value(); }
    /// The weight the layer currently computes with (recomposed when decomposed).
    Tensor4 effective_weight() const;
};

class Backbone {
public:
    /// He-normal conv weights from `seed`; batch norm starts as the identity.
    static Backbone init(const ChannelPlan& channels, std::uint64_t seed);

    const ChannelPlan& channels() const { return channels_; }
    std::vector<BackboneConv>& convs() { return convs_; }
    const std::vector<BackboneConv>& convs() const { return convs_; }
    BackboneConv& conv(const std::string& name);

    std::vector<LayerShape> layer_shapes() const;
    /// Every tensor the backbone computes with: plain weights or SVF factors, then batch norm.
    std::vector<ad::Param*> params();
    std::vector<const ad::Param*> params() const;

    enum class NormMode { Frozen, Batch };

    struct Nodes {
        std::array<ad::NodeId, 4> stages{};    // set for emitted stages only
        std::vector<ad::NodeId> conv_outputs;  // pre-norm output of each emitted conv, in convs() order
        std::vector<ad::NodeId> norm_outputs;  // batch norm node of each emitted conv, in convs() order
    };
    /// Emits stages [first, last); x is the input of stage `first`. Batch mode normalises
    /// with batch statistics and ignores the stored mean and var.
    Nodes emit(ad::Graph& g, ad::NodeId x, NormMode mode = NormMode::Frozen, std::size_t first = 0,
               std::size_t last = 4);

    /// Spatial plan: stage s output is (n, channels[s], h / 2^s, w / 2^s) for s = 0..3.
    std::array<Dims4, 4> stage_dims(std::size_t n, std::size_t h, std::size_t w) const;

private:
    ChannelPlan channels_{};
    std::vector<BackboneConv> convs_;
};

/// cosine map + constant channel + query features -> two 3x3 conv-relu blocks -> 1x1 conv to 2 logits.
struct SegHead {
    ad::Param conv1, conv2, classifier;

    static SegHead init(std::size_t feature_channels, std::size_t width, std::uint64_t seed);
    std::vector<ad::Param*> params() { return {&conv1, &conv2, &classifier}; }
    std::vector<const ad::Param*> params() const { return {&conv1, &conv2, &classifier}; }
};

struct FssModel {
    Backbone backbone;
    SegHead head;
    StrategyConfig strategy = StrategyConfig::freeze();

    std::vector<ad::Param*> params();
    std::vector<const ad::Param*> params() const;
    std::vector<ad::Param*> trainable_params();
    std::size_t trainable_backbone_scalars() const;
    std::vector<DecomposedConv*> decomposed();
};

/// Backbone plus a freshly initialised head, with the strategy applied.
FssModel build_fss_model(Backbone backbone, std::size_t head_width, std::uint64_t head_seed,
                         const StrategyConfig& strategy);

/// Sets trainability per strategy, decomposing selected convs for SVF strategies.
/// Head params are always trainable; batch-norm statistics never are.
void apply_strategy(FssModel& model, const StrategyConfig& cfg);

/// Fixed multiplier on the cosine map fed to the head.
inline constexpr double kSimilarityTemperature = 20.0;

/// Validates an input size for the model: a multiple of 16, at least 32.
void check_image_size(std::size_t size);

/// Number of leading backbone stages without a trainable tensor.
std::size_t frozen_stage_prefix(const FssModel& model);

/// Outputs of the first `prefix` backbone stages per episode, keyed by episode address.
/// Valid while those stages' tensors are unchanged and the episodes stay in place.
class StageCache {
public:
    struct Entry {
        std::vector<Tensor4> support;  // per cached stage: (shots, C, h, w)
        std::vector<Tensor4> query;    // per cached stage: (1, C, h, w)
    };

    StageCache(FssModel& model, std::size_t prefix, std::size_t image_size);

    /// Stage indices a graph with this prefix reads from the cache, ascending.
    static std::vector<std::size_t> stages_read(std::size_t prefix);

    void add(std::span<const Episode> episodes);
    const Entry& at(const Episode& e) const;
    std::size_t prefix() const { return prefix_; }

private:
    FssModel& model_;
    std::size_t prefix_, size_;
    std::map<const Episode*, Entry> entries_;
};

/// Graph for `batch` episodes of `shots` supports each. Keeps pointers into the model,
/// which must outlive it and keep its structure. With a nonzero prefix the first stages
/// are not emitted and their outputs come from a StageCache of the same prefix.
class FssGraph {
public:
    FssGraph(FssModel& model, std::size_t batch, std::size_t shots, std::size_t image_size, std::size_t prefix = 0);

    /// Forward pass over exactly `batch` episodes; returns (batch, 2, H, W) logits.
    const Tensor4& forward(std::span<const Episode* const> episodes, const StageCache* cache = nullptr);
    double loss() const { return graph_.value(loss_)[0]; }
    void backward() { graph_.backward(loss_); }

    std::size_t batch() const { return batch_; }
    std::size_t shots() const { return shots_; }
    ad::Graph& graph() { return graph_; }

private:
    ad::Graph graph_;
    ad::NodeId logits_ = 0, loss_ = 0;
    std::size_t batch_, shots_, size_, prefix_;
};

/// Query logits (1, 2, H, W) for one episode; throws on an empty support mask.
Tensor4 segment(FssModel& model, const Episode& episode);

struct PretrainConfig {
    std::size_t epochs = 12;
    std::size_t patches_per_class = 48;
    std::size_t holdout_per_class = 16;
    std::size_t patch_size = 32;
    std::size_t batch = 16;
    std::size_t calibration = 64;
    double lr = 0.03;
    double momentum = 0.9;
    std::uint64_t seed = 321;
};

struct PretrainResult {
    Backbone backbone;
    std::vector<double> epoch_loss;
    double holdout_accuracy = 0.0;  // NaN when epochs = 0
};

/// Patch classification over `base_classes`, trained with batch-statistics normalisation.
/// With epochs = 0 the initial backbone is returned untouched. Otherwise the stored mean and
/// var are set from one batch-mode pass over a calibration sample after training.
PretrainResult pretrain_backbone(const Backbone& init, std::span<const int> base_classes, std::size_t num_classes,
                                 const PretrainConfig& cfg);

}  // namespace svf
