#pragma once

// Reverse-mode differentiation over the small, fixed set of operations used
// by the segmentation model. A Graph is built node by node (shapes are checked
// as nodes are added), then run with forward() and differentiated with
// backward(). Parameters live outside the graph and are referenced by pointer.

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "svf/tensor.hpp"

namespace svf::ad {

/// A named tensor owned by a model. Only trainable params receive gradients.
struct Param {
    std::string name;
    Tensor4 value;
    bool trainable = false;
    std::optional<Tensor4> grad;

    Param() = default;
    Param(std::string n, Tensor4 v, bool train = false) : name(std::move(n)), value(std::move(v)), trainable(train) {}
};

using NodeId = std::size_t;

enum class Op {
    Input,
    Param,
    Conv2d,
    DiagScale,
    Exp,
    Mul,
    Relu,
    AvgPool2,
    Upsample,
    BatchNormFrozen,
    BatchNormBatch,
    Add,
    MaskedAvgPool,
    CosineSimilarity,
    ConcatChannels,
    SoftmaxXent,
};

const char* op_name(Op op);

/// Denominator guard of cosine_similarity_map.
inline constexpr double kCosineEps = 1e-8;
inline constexpr double kBatchNormEps = 1e-5;

class Graph {
public:
    NodeId input(std::string name, const Dims4& dims);
    /// Leaf referencing an external parameter. The same Param always maps to one node.
    NodeId param(Param& p);
    /// Leaf whose parameter is bound later with bind().
    NodeId param_slot(std::string name, const Dims4& dims);
    void bind(NodeId slot, Param& p);

    NodeId conv2d(NodeId x, NodeId w, const ConvGeometry& g);
    /// Multiplies channel c of x by s[c].
    NodeId diag_scale(NodeId x, NodeId s);
    NodeId exp(NodeId s);
    /// Element-wise product of equally shaped tensors.
    NodeId mul(NodeId a, NodeId b);
    NodeId relu(NodeId x);
    /// 2x2 average pooling, stride 2.
    NodeId avgpool2(NodeId x);
    /// Bilinear upsampling by an integer factor (half-pixel centres, edge clamped).
    NodeId upsample(NodeId x, std::size_t factor);
    /// gamma * (x - mean) / sqrt(var + eps) + beta with per-channel constants mean and var.
    NodeId batchnorm_frozen(NodeId x, NodeId gamma, NodeId beta, NodeId mean, NodeId var);
    /// Same affine map, normalised with the per-channel mean and biased variance of the batch;
    /// the gradient flows through the statistics.
    NodeId batchnorm_batch(NodeId x, NodeId gamma, NodeId beta);
    NodeId add(NodeId a, NodeId b);
    /// feat (N, C, h, w), mask (N, 1, h, w) -> (N / group, C, 1, 1): per-sample masked
    /// spatial mean, then averaged over consecutive groups of `group` samples.
    NodeId masked_avg_pool(NodeId feat, NodeId mask, std::size_t group = 1);
    /// feat (N, C, h, w), proto (N, C, 1, 1) -> (N, 1, h, w) cosine similarity per location.
    NodeId cosine_similarity_map(NodeId feat, NodeId proto);
    NodeId concat_channels(NodeId a, NodeId b);
    /// Mean per-pixel softmax cross-entropy; labels (N, 1, h, w) hold class indices.
    NodeId softmax_xent(NodeId logits, NodeId labels);

    /// Binds inputs by name and evaluates every node in insertion order.
    void forward(const std::map<std::string, Tensor4>& inputs);
    /// Overwrites the grad of every trainable param that the loss depends on and
    /// clears the grad of every other param in the graph.
    void backward(NodeId loss);

    const Tensor4& value(NodeId id) const;
    /// Batch mean and biased variance computed by the last forward of a batchnorm_batch node.
    std::pair<std::vector<double>, std::vector<double>> batch_stats(NodeId id) const;
    const Dims4& dims(NodeId id) const { return nodes_.at(id).dims; }
    Op op(NodeId id) const { return nodes_.at(id).op; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool has_run() const noexcept { return forward_done_; }

private:
    struct Node {
        Op op = Op::Input;
        std::vector<NodeId> inputs;
        Dims4 dims{};
        Tensor4 value;
        std::string name;
        Param* param = nullptr;
        ConvGeometry geometry;
        std::size_t factor = 1;
        std::vector<double> stat_mean, stat_var;  // batchnorm_batch only
    };

    static Node make_node(Op op, std::vector<NodeId> inputs, const Dims4& dims, std::string name = {});
    NodeId push(Node n);
    const Node& node(NodeId id) const;
    void evaluate(Node& n);
    bool param_is_constant(NodeId id) const;

    std::vector<Node> nodes_;
    std::map<const Param*, NodeId> param_nodes_;
    bool forward_done_ = false;
};

}  // namespace svf::ad
