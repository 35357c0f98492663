#include "svf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include <fmt/core.h>

namespace svf::ad {

namespace {

using Index = std::int64_t;

std::size_t channels(const Dims4& d) { return d[1]; }
std::size_t plane(const Dims4& d) { return d[2] * d[3]; }
std::size_t numel(const Dims4& d) { return d[0] * d[1] * d[2] * d[3]; }

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

struct Axis {
    std::size_t i0, i1;
    double w0, w1;
};

// Half-pixel bilinear source taps for each output coordinate.
std::vector<Axis> upsample_axis(std::size_t in, std::size_t factor) {
    std::vector<Axis> taps(in * factor);
    for (std::size_t o = 0; o < taps.size(); ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        src = std::max(src, 0.0);
        auto i0 = static_cast<std::size_t>(std::floor(src));
        i0 = std::min(i0, in - 1);
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        const double w1 = src - static_cast<double>(i0);
        taps[o] = {i0, i1, 1.0 - w1, w1};
    }
    return taps;
}

void accumulate(std::optional<Tensor4>& slot, Tensor4&& g) {
    if (!slot) {
        slot = std::move(g);
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Conv2d: return "conv2d";
        case Op::DiagScale: return "diag_scale";
        case Op::Exp: return "exp";
        case Op::Mul: return "mul";
        case Op::Relu: return "relu";
        case Op::AvgPool2: return "avgpool2";
        case Op::Upsample: return "upsample";
        case Op::BatchNormFrozen: return "batchnorm_frozen";
        case Op::BatchNormBatch: return "batchnorm_batch";
        case Op::Add: return "add";
        case Op::MaskedAvgPool: return "masked_avg_pool";
        case Op::CosineSimilarity: return "cosine_similarity_map";
        case Op::ConcatChannels: return "concat_channels";
        case Op::SoftmaxXent: return "softmax_xent";
    }
    return "?";
}

Graph::Node Graph::make_node(Op op, std::vector<NodeId> inputs, const Dims4& dims, std::string name) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.dims = dims;
    n.name = std::move(name);
    return n;
}

NodeId Graph::push(Node n) {
    for (NodeId in : n.inputs)
        if (in >= nodes_.size()) throw std::out_of_range(fmt::format("graph: unknown node id {}", in));
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    return nodes_.size() - 1;
}

const Graph::Node& Graph::node(NodeId id) const {
    if (id >= nodes_.size()) throw std::out_of_range(fmt::format("graph: unknown node id {}", id));
    return nodes_[id];
}

std::pair<std::vector<double>, std::vector<double>> Graph::batch_stats(NodeId id) const {
    const Node& n = node(id);
    if (n.op != Op::BatchNormBatch) throw std::logic_error("batch_stats: node is not batchnorm_batch");
    if (!forward_done_) throw std::logic_error("batch_stats: forward has not run");
    return {n.stat_mean, n.stat_var};
}

const Tensor4& Graph::value(NodeId id) const {
    const Node& n = node(id);
    if (n.op == Op::Param) {
        if (!n.param) throw std::logic_error("graph: param slot '" + n.name + "' is unbound");
        return n.param->value;
    }
    if (!forward_done_) throw std::logic_error("graph: value requested before forward");
    return n.value;
}

NodeId Graph::input(std::string name, const Dims4& dims) {
    Node n = make_node(Op::Input, {}, dims, std::move(name));
    return push(std::move(n));
}

NodeId Graph::param(Param& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    Node n = make_node(Op::Param, {}, p.value.dims(), p.name);
    n.param = &p;
    const NodeId id = push(std::move(n));
    param_nodes_[&p] = id;
    return id;
}

NodeId Graph::param_slot(std::string name, const Dims4& dims) {
    Node n = make_node(Op::Param, {}, dims, std::move(name));
    return push(std::move(n));
}

void Graph::bind(NodeId slot, Param& p) {
    Node& n = nodes_.at(slot);
    if (n.op != Op::Param) throw std::logic_error("graph: bind target is not a param slot");
    if (p.value.dims() != n.dims)
        throw ShapeError(fmt::format("graph: param '{}' has dims {}, slot expects {}", p.name, dims_string(p.value.dims()),
                                     dims_string(n.dims)));
    n.param = &p;
    param_nodes_[&p] = slot;
}

NodeId Graph::conv2d(NodeId x, NodeId w, const ConvGeometry& g) {
    const Dims4 xd = node(x).dims;
    const Dims4 wd = node(w).dims;
    require(xd[1] == wd[1], fmt::format("conv2d: input {} vs weight {}", dims_string(xd), dims_string(wd)));
    require(wd[2] == g.kernel_h && wd[3] == g.kernel_w,
            fmt::format("conv2d: weight {} vs {}x{} kernel", dims_string(wd), g.kernel_h, g.kernel_w));
    const auto [oh, ow] = g.output_size(xd[2], xd[3]);
    Node n = make_node(Op::Conv2d, {x, w}, {xd[0], wd[0], oh, ow});
    n.geometry = g;
    return push(std::move(n));
}

NodeId Graph::diag_scale(NodeId x, NodeId s) {
    const Dims4 xd = node(x).dims;
    require(numel(node(s).dims) == channels(xd),
            fmt::format("diag_scale: {} scales for {} channels", numel(node(s).dims), channels(xd)));
    return push(make_node(Op::DiagScale, {x, s}, xd));
}

NodeId Graph::exp(NodeId s) { return push(make_node(Op::Exp, {s}, node(s).dims)); }

NodeId Graph::mul(NodeId a, NodeId b) {
    require(node(a).dims == node(b).dims,
            fmt::format("mul: {} vs {}", dims_string(node(a).dims), dims_string(node(b).dims)));
    return push(make_node(Op::Mul, {a, b}, node(a).dims));
}

NodeId Graph::relu(NodeId x) { return push(make_node(Op::Relu, {x}, node(x).dims)); }

NodeId Graph::avgpool2(NodeId x) {
    const Dims4 d = node(x).dims;
    require(d[2] % 2 == 0 && d[3] % 2 == 0 && d[2] > 0, "avgpool2: spatial dims must be even, got " + dims_string(d));
    return push(make_node(Op::AvgPool2, {x}, {d[0], d[1], d[2] / 2, d[3] / 2}));
}

NodeId Graph::upsample(NodeId x, std::size_t factor) {
    require(factor >= 1, "upsample: factor must be positive");
    const Dims4 d = node(x).dims;
    Node n = make_node(Op::Upsample, {x}, {d[0], d[1], d[2] * factor, d[3] * factor});
    n.factor = factor;
    return push(std::move(n));
}

NodeId Graph::batchnorm_frozen(NodeId x, NodeId gamma, NodeId beta, NodeId mean, NodeId var) {
    const Dims4 d = node(x).dims;
    for (NodeId p : {gamma, beta, mean, var})
        require(numel(node(p).dims) == channels(d), "batchnorm_frozen: per-channel vector size mismatch");
    for (NodeId p : {mean, var})
        if (node(p).op != Op::Param) throw std::logic_error("batchnorm_frozen: statistics must be param leaves");
    return push(make_node(Op::BatchNormFrozen, {x, gamma, beta, mean, var}, d));
}

NodeId Graph::batchnorm_batch(NodeId x, NodeId gamma, NodeId beta) {
    const Dims4 d = node(x).dims;
    for (NodeId p : {gamma, beta})
        require(numel(node(p).dims) == channels(d), "batchnorm_batch: per-channel vector size mismatch");
    require(d[0] * plane(d) >= 2, "batchnorm_batch: needs at least two values per channel");
    return push(make_node(Op::BatchNormBatch, {x, gamma, beta}, d));
}

NodeId Graph::add(NodeId a, NodeId b) {
    require(node(a).dims == node(b).dims,
            fmt::format("add: {} vs {}", dims_string(node(a).dims), dims_string(node(b).dims)));
    return push(make_node(Op::Add, {a, b}, node(a).dims));
}

NodeId Graph::masked_avg_pool(NodeId feat, NodeId mask, std::size_t group) {
    const Dims4 f = node(feat).dims;
    const Dims4 m = node(mask).dims;
    require(m[0] == f[0] && m[1] == 1 && m[2] == f[2] && m[3] == f[3],
            fmt::format("masked_avg_pool: mask {} vs features {}", dims_string(m), dims_string(f)));
    require(group >= 1 && f[0] % group == 0, "masked_avg_pool: batch not divisible by group");
    Node n = make_node(Op::MaskedAvgPool, {feat, mask}, {f[0] / group, f[1], 1, 1});
    n.factor = group;
    return push(std::move(n));
}

NodeId Graph::cosine_similarity_map(NodeId feat, NodeId proto) {
    const Dims4 f = node(feat).dims;
    const Dims4 p = node(proto).dims;
    require(p[0] == f[0] && p[1] == f[1] && p[2] == 1 && p[3] == 1,
            fmt::format("cosine_similarity_map: prototype {} vs features {}", dims_string(p), dims_string(f)));
    return push(make_node(Op::CosineSimilarity, {feat, proto}, {f[0], 1, f[2], f[3]}));
}

NodeId Graph::concat_channels(NodeId a, NodeId b) {
    const Dims4 x = node(a).dims;
    const Dims4 y = node(b).dims;
    require(x[0] == y[0] && x[2] == y[2] && x[3] == y[3],
            fmt::format("concat_channels: {} vs {}", dims_string(x), dims_string(y)));
    return push(make_node(Op::ConcatChannels, {a, b}, {x[0], x[1] + y[1], x[2], x[3]}));
}

NodeId Graph::softmax_xent(NodeId logits, NodeId labels) {
    const Dims4 l = node(logits).dims;
    const Dims4 t = node(labels).dims;
    require(t[0] == l[0] && t[1] == 1 && t[2] == l[2] && t[3] == l[3] && l[1] >= 2,
            fmt::format("softmax_xent: labels {} vs logits {}", dims_string(t), dims_string(l)));
    return push(make_node(Op::SoftmaxXent, {logits, labels}, {1, 1, 1, 1}));
}

bool Graph::param_is_constant(NodeId id) const {
    const Node& n = nodes_[id];
    return n.op != Op::Param || !n.param || !n.param->trainable;
}

void Graph::forward(const std::map<std::string, Tensor4>& inputs) {
    for (Node& n : nodes_) {
        if (n.op == Op::Input) {
            auto it = inputs.find(n.name);
            if (it == inputs.end()) throw std::invalid_argument("graph: no value bound for input '" + n.name + "'");
            if (it->second.dims() != n.dims)
                throw ShapeError(fmt::format("graph: input '{}' has dims {}, expected {}", n.name,
                                             dims_string(it->second.dims()), dims_string(n.dims)));
            n.value = it->second;
        } else if (n.op == Op::Param) {
            if (!n.param) throw std::logic_error("graph: param slot '" + n.name + "' is unbound");
            if (n.param->value.dims() != n.dims)
                throw ShapeError("graph: param '" + n.name + "' changed shape since graph construction");
        }
    }
    forward_done_ = true;
    for (Node& n : nodes_)
        if (n.op != Op::Input && n.op != Op::Param) evaluate(n);
}

void Graph::evaluate(Node& n) {
    auto in = [&](std::size_t k) -> const Tensor4& { return value(n.inputs[k]); };
    const Dims4& d = n.dims;
    switch (n.op) {
        case Op::Input:
        case Op::Param:
            return;
        case Op::Conv2d:
            svf::conv2d_into(in(0), in(1), n.geometry, n.value);
            return;
        case Op::DiagScale: {
            const Tensor4& x = in(0);
            const Tensor4& s = in(1);
            n.value.resize_for_overwrite(d);
            const std::size_t hw = plane(d);
            for (std::size_t b = 0; b < d[0]; ++b)
                for (std::size_t c = 0; c < d[1]; ++c) {
                    const std::size_t off = (b * d[1] + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) n.value[off + i] = x[off + i] * s[c];
                }
            return;
        }
        case Op::Exp: {
            const Tensor4& s = in(0);
            n.value.resize_for_overwrite(d);
            for (std::size_t i = 0; i < s.size(); ++i) n.value[i] = std::exp(s[i]);
            return;
        }
        case Op::Mul: {
            const Tensor4& a = in(0);
            const Tensor4& b = in(1);
            n.value.resize_for_overwrite(d);
            for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] * b[i];
            return;
        }
        case Op::Relu: {
            const Tensor4& x = in(0);
            n.value.resize_for_overwrite(d);
            for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] > 0.0 ? x[i] : 0.0;
            return;
        }
        case Op::AvgPool2: {
            const Tensor4& x = in(0);
            n.value.resize_for_overwrite(d);
            for (std::size_t b = 0; b < d[0]; ++b)
                for (std::size_t c = 0; c < d[1]; ++c)
                    for (std::size_t y = 0; y < d[2]; ++y)
                        for (std::size_t xx = 0; xx < d[3]; ++xx)
                            n.value.at(b, c, y, xx) = 0.25 * (x.at(b, c, 2 * y, 2 * xx) + x.at(b, c, 2 * y, 2 * xx + 1) +
                                                              x.at(b, c, 2 * y + 1, 2 * xx) +
                                                              x.at(b, c, 2 * y + 1, 2 * xx + 1));
            return;
        }
        case Op::Upsample: {
            const Tensor4& x = in(0);
            const Dims4& xd = x.dims();
            const auto ty = upsample_axis(xd[2], n.factor);
            const auto tx = upsample_axis(xd[3], n.factor);
            n.value.resize_for_overwrite(d);
            for (std::size_t b = 0; b < d[0]; ++b)
                for (std::size_t c = 0; c < d[1]; ++c)
                    for (std::size_t y = 0; y < d[2]; ++y) {
                        const Axis& ay = ty[y];
                        for (std::size_t xx = 0; xx < d[3]; ++xx) {
                            const Axis& ax = tx[xx];
                            n.value.at(b, c, y, xx) = ay.w0 * (ax.w0 * x.at(b, c, ay.i0, ax.i0) + ax.w1 * x.at(b, c, ay.i0, ax.i1)) +
                                                      ay.w1 * (ax.w0 * x.at(b, c, ay.i1, ax.i0) + ax.w1 * x.at(b, c, ay.i1, ax.i1));
                        }
                    }
            return;
        }
        case Op::BatchNormFrozen: {
            for (std::size_t k = 3; k < 5; ++k)
                if (!param_is_constant(n.inputs[k]))
                    throw std::logic_error("batchnorm_frozen: statistics param '" + nodes_[n.inputs[k]].name +
                                           "' is flagged trainable");
            const Tensor4& x = in(0);
            const Tensor4& gamma = in(1);
            const Tensor4& beta = in(2);
            const Tensor4& mean = in(3);
            const Tensor4& var = in(4);
            n.value.resize_for_overwrite(d);
            const std::size_t hw = plane(d);
            for (std::size_t c = 0; c < d[1]; ++c) {
                const double inv = 1.0 / std::sqrt(var[c] + kBatchNormEps);
                const double scale = gamma[c] * inv;
                const double shift = beta[c] - mean[c] * scale;
                for (std::size_t b = 0; b < d[0]; ++b) {
                    const std::size_t off = (b * d[1] + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) n.value[off + i] = x[off + i] * scale + shift;
                }
            }
            return;
        }
        case Op::BatchNormBatch: {
            const Tensor4& x = in(0);
            const Tensor4& gamma = in(1);
            const Tensor4& beta = in(2);
            n.value.resize_for_overwrite(d);
            const std::size_t hw = plane(d);
            const double m = static_cast<double>(d[0] * hw);
            n.stat_mean.assign(d[1], 0.0);
            n.stat_var.assign(d[1], 0.0);
            for (std::size_t c = 0; c < d[1]; ++c) {
                double sum = 0.0;
                for (std::size_t b = 0; b < d[0]; ++b) {
                    const std::size_t off = (b * d[1] + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) sum += x[off + i];
                }
                const double mean = sum / m;
                double sq = 0.0;
                for (std::size_t b = 0; b < d[0]; ++b) {
                    const std::size_t off = (b * d[1] + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) sq += (x[off + i] - mean) * (x[off + i] - mean);
                }
                const double var = sq / m;
                n.stat_mean[c] = mean;
                n.stat_var[c] = var;
                const double scale = gamma[c] / std::sqrt(var + kBatchNormEps);
                const double shift = beta[c] - mean * scale;
                for (std::size_t b = 0; b < d[0]; ++b) {
                    const std::size_t off = (b * d[1] + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) n.value[off + i] = x[off + i] * scale + shift;
                }
            }
            return;
        }
        case Op::Add: {
            const Tensor4& a = in(0);
            const Tensor4& b = in(1);
            n.value.resize_for_overwrite(d);
            for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] + b[i];
            return;
        }
        case Op::MaskedAvgPool: {
            const Tensor4& f = in(0);
            const Tensor4& m = in(1);
            const Dims4& fd = f.dims();
            const std::size_t hw = plane(fd);
            const std::size_t group = n.factor;
            n.value.resize_for_overwrite(d);
            n.value.fill(0.0);
            for (std::size_t s = 0; s < fd[0]; ++s) {
                double area = 0.0;
                for (std::size_t i = 0; i < hw; ++i) area += m[s * hw + i];
                if (!(area > 0.0))
                    throw std::invalid_argument(fmt::format("masked_avg_pool: sample {} has an empty mask", s));
                const std::size_t out = s / group;
                for (std::size_t c = 0; c < fd[1]; ++c) {
                    const std::size_t off = (s * fd[1] + c) * hw;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) acc += f[off + i] * m[s * hw + i];
                    n.value.at(out, c, 0, 0) += acc / area / static_cast<double>(group);
                }
            }
            return;
        }
        case Op::CosineSimilarity: {
            const Tensor4& f = in(0);
            const Tensor4& p = in(1);
            const Dims4& fd = f.dims();
            const std::size_t hw = plane(fd);
            n.value.resize_for_overwrite(d);
            for (std::size_t b = 0; b < fd[0]; ++b) {
                double pn = 0.0;
                for (std::size_t c = 0; c < fd[1]; ++c) pn += p.at(b, c, 0, 0) * p.at(b, c, 0, 0);
                pn = std::sqrt(pn);
                for (std::size_t i = 0; i < hw; ++i) {
                    double dot = 0.0;
                    double fn = 0.0;
                    for (std::size_t c = 0; c < fd[1]; ++c) {
                        const double fv = f[(b * fd[1] + c) * hw + i];
                        dot += fv * p.at(b, c, 0, 0);
                        fn += fv * fv;
                    }
                    n.value[b * hw + i] = dot / (std::sqrt(fn) * pn + kCosineEps);
                }
            }
            return;
        }
        case Op::ConcatChannels: {
            const Tensor4& a = in(0);
            const Tensor4& b = in(1);
            const std::size_t hw = plane(d);
            const std::size_t ca = a.dim(1), cb = b.dim(1);
            n.value.resize_for_overwrite(d);
            for (std::size_t s = 0; s < d[0]; ++s) {
                std::copy_n(a.data() + s * ca * hw, ca * hw, n.value.data() + s * d[1] * hw);
                std::copy_n(b.data() + s * cb * hw, cb * hw, n.value.data() + (s * d[1] + ca) * hw);
            }
            return;
        }
        case Op::SoftmaxXent: {
            const Tensor4& z = in(0);
            const Tensor4& t = in(1);
            const Dims4& zd = z.dims();
            const std::size_t hw = plane(zd);
            const std::size_t k = zd[1];
            double total = 0.0;
            for (std::size_t b = 0; b < zd[0]; ++b)
                for (std::size_t i = 0; i < hw; ++i) {
                    const double label = t[b * hw + i];
                    const auto cls = static_cast<std::size_t>(label);
                    if (label < 0.0 || static_cast<double>(cls) != label || cls >= k)
                        throw std::invalid_argument(fmt::format("softmax_xent: label {} outside [0, {})", label, k));
                    double zmax = z[(b * k) * hw + i];
                    for (std::size_t c = 1; c < k; ++c) zmax = std::max(zmax, z[(b * k + c) * hw + i]);
                    double sum = 0.0;
                    for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[(b * k + c) * hw + i] - zmax);
                    total += std::log(sum) + zmax - z[(b * k + cls) * hw + i];
                }
            n.value = Tensor4({1, 1, 1, 1}, total / static_cast<double>(zd[0] * hw));
            return;
        }
    }
}

void Graph::backward(NodeId loss) {
    if (!forward_done_) throw std::logic_error("graph: backward called before forward");
    const Node& ln = node(loss);
    if (numel(ln.dims) != 1) throw std::logic_error("graph: backward needs a scalar loss, got " + dims_string(ln.dims));

    // needs[i]: node i depends on some trainable param, so its gradient is wanted.
    std::vector<bool> needs(nodes_.size(), false);
    for (NodeId i = 0; i <= loss; ++i) {
        const Node& n = nodes_[i];
        if (n.op == Op::Param) {
            needs[i] = n.param && n.param->trainable;
        } else {
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                if (n.op == Op::BatchNormFrozen && k >= 3) continue;
                if (n.op == Op::SoftmaxXent && k == 1) continue;
                if (needs[n.inputs[k]]) needs[i] = true;
            }
        }
    }

    std::vector<std::optional<Tensor4>> grads(nodes_.size());
    grads[loss] = Tensor4(ln.dims, 1.0);

    for (NodeId idx = loss + 1; idx-- > 0;) {
        Node& n = nodes_[idx];
        if (!needs[idx] || !grads[idx] || n.op == Op::Input || n.op == Op::Param) continue;
        const Tensor4& g = *grads[idx];
        const Dims4& d = n.dims;
        auto want = [&](std::size_t k) { return needs[n.inputs[k]]; };
        auto in = [&](std::size_t k) -> const Tensor4& { return value(n.inputs[k]); };
        auto give = [&](std::size_t k, Tensor4&& t) { accumulate(grads[n.inputs[k]], std::move(t)); };

        switch (n.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Conv2d: {
                const Tensor4& x = in(0);
                const Tensor4& w = in(1);
                if (want(0)) give(0, conv2d_grad_input(g, w, n.geometry, x.dims()));
                if (want(1)) give(1, conv2d_grad_weight(x, g, n.geometry, w.dims()));
                break;
            }
            case Op::DiagScale: {
                const Tensor4& x = in(0);
                const Tensor4& s = in(1);
                const std::size_t hw = plane(d);
                if (want(0)) {
                    Tensor4 dx(d);
                    for (std::size_t b = 0; b < d[0]; ++b)
                        for (std::size_t c = 0; c < d[1]; ++c) {
                            const std::size_t off = (b * d[1] + c) * hw;
                            for (std::size_t i = 0; i < hw; ++i) dx[off + i] = g[off + i] * s[c];
                        }
                    give(0, std::move(dx));
                }
                if (want(1)) {
                    Tensor4 ds(s.dims());
                    for (std::size_t b = 0; b < d[0]; ++b)
                        for (std::size_t c = 0; c < d[1]; ++c) {
                            const std::size_t off = (b * d[1] + c) * hw;
                            double acc = 0.0;
                            for (std::size_t i = 0; i < hw; ++i) acc += g[off + i] * x[off + i];
                            ds[c] += acc;
                        }
                    give(1, std::move(ds));
                }
                break;
            }
            case Op::Exp: {
                Tensor4 ds(d);
                for (std::size_t i = 0; i < ds.size(); ++i) ds[i] = g[i] * n.value[i];
                give(0, std::move(ds));
                break;
            }
            case Op::Mul: {
                const Tensor4& a = in(0);
                const Tensor4& b = in(1);
                if (want(0)) {
                    Tensor4 da(d);
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] = g[i] * b[i];
                    give(0, std::move(da));
                }
                if (want(1)) {
                    Tensor4 db(d);
                    for (std::size_t i = 0; i < db.size(); ++i) db[i] = g[i] * a[i];
                    give(1, std::move(db));
                }
                break;
            }
            case Op::Relu: {
                const Tensor4& x = in(0);
                Tensor4 dx(d);
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
                give(0, std::move(dx));
                break;
            }
            case Op::AvgPool2: {
                const Dims4 xd = in(0).dims();
                Tensor4 dx(xd);
                for (std::size_t b = 0; b < d[0]; ++b)
                    for (std::size_t c = 0; c < d[1]; ++c)
                        for (std::size_t y = 0; y < d[2]; ++y)
                            for (std::size_t xx = 0; xx < d[3]; ++xx) {
                                const double v = 0.25 * g.at(b, c, y, xx);
                                dx.at(b, c, 2 * y, 2 * xx) += v;
                                dx.at(b, c, 2 * y, 2 * xx + 1) += v;
                                dx.at(b, c, 2 * y + 1, 2 * xx) += v;
                                dx.at(b, c, 2 * y + 1, 2 * xx + 1) += v;
                            }
                give(0, std::move(dx));
                break;
            }
            case Op::Upsample: {
                const Dims4 xd = in(0).dims();
                const auto ty = upsample_axis(xd[2], n.factor);
                const auto tx = upsample_axis(xd[3], n.factor);
                Tensor4 dx(xd);
                for (std::size_t b = 0; b < d[0]; ++b)
                    for (std::size_t c = 0; c < d[1]; ++c)
                        for (std::size_t y = 0; y < d[2]; ++y) {
                            const Axis& ay = ty[y];
                            for (std::size_t xx = 0; xx < d[3]; ++xx) {
                                const Axis& ax = tx[xx];
                                const double v = g.at(b, c, y, xx);
                                dx.at(b, c, ay.i0, ax.i0) += ay.w0 * ax.w0 * v;
                                dx.at(b, c, ay.i0, ax.i1) += ay.w0 * ax.w1 * v;
                                dx.at(b, c, ay.i1, ax.i0) += ay.w1 * ax.w0 * v;
                                dx.at(b, c, ay.i1, ax.i1) += ay.w1 * ax.w1 * v;
                            }
                        }
                give(0, std::move(dx));
                break;
            }
            case Op::BatchNormFrozen: {
                const Tensor4& x = in(0);
                const Tensor4& gamma = in(1);
                const Tensor4& mean = in(3);
                const Tensor4& var = in(4);
                const std::size_t hw = plane(d);
                Tensor4 dx(d);
                Tensor4 dgamma(gamma.dims());
                Tensor4 dbeta(gamma.dims());
                for (std::size_t c = 0; c < d[1]; ++c) {
                    const double inv = 1.0 / std::sqrt(var[c] + kBatchNormEps);
                    const double scale = gamma[c] * inv;
                    double sg = 0.0, sb = 0.0;
                    for (std::size_t b = 0; b < d[0]; ++b) {
                        const std::size_t off = (b * d[1] + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            dx[off + i] = g[off + i] * scale;
                            sg += g[off + i] * (x[off + i] - mean[c]) * inv;
                            sb += g[off + i];
                        }
                    }
                    dgamma[c] = sg;
                    dbeta[c] = sb;
                }
                if (want(0)) give(0, std::move(dx));
                if (want(1)) give(1, std::move(dgamma));
                if (want(2)) give(2, std::move(dbeta));
                break;
            }
            case Op::BatchNormBatch: {
                const Tensor4& x = in(0);
                const Tensor4& gamma = in(1);
                const std::size_t hw = plane(d);
                const double m = static_cast<double>(d[0] * hw);
                Tensor4 dx(d);
                Tensor4 dgamma(gamma.dims());
                Tensor4 dbeta(gamma.dims());
                for (std::size_t c = 0; c < d[1]; ++c) {
                    const double mean = n.stat_mean[c];
                    const double inv = 1.0 / std::sqrt(n.stat_var[c] + kBatchNormEps);
                    double sg = 0.0, sb = 0.0;
                    for (std::size_t b = 0; b < d[0]; ++b) {
                        const std::size_t off = (b * d[1] + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            sg += g[off + i] * (x[off + i] - mean) * inv;
                            sb += g[off + i];
                        }
                    }
                    dgamma[c] = sg;
                    dbeta[c] = sb;
                    // dx = gamma * inv * (g - mean(g) - xhat * mean(g * xhat))
                    const double k = gamma[c] * inv;
                    for (std::size_t b = 0; b < d[0]; ++b) {
                        const std::size_t off = (b * d[1] + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            const double xhat = (x[off + i] - mean) * inv;
                            dx[off + i] = k * (g[off + i] - sb / m - xhat * sg / m);
                        }
                    }
                }
                if (want(0)) give(0, std::move(dx));
                if (want(1)) give(1, std::move(dgamma));
                if (want(2)) give(2, std::move(dbeta));
                break;
            }
            case Op::Add: {
                if (want(0)) give(0, Tensor4(g));
                if (want(1)) give(1, Tensor4(g));
                break;
            }
            case Op::MaskedAvgPool: {
                const Tensor4& f = in(0);
                const Tensor4& m = in(1);
                const Dims4& fd = f.dims();
                const std::size_t hw = plane(fd);
                const std::size_t group = n.factor;
                Tensor4 df(fd);
                Tensor4 dm(m.dims());
                for (std::size_t s = 0; s < fd[0]; ++s) {
                    double area = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) area += m[s * hw + i];
                    const std::size_t out = s / group;
                    const double k = 1.0 / (area * static_cast<double>(group));
                    for (std::size_t c = 0; c < fd[1]; ++c) {
                        const std::size_t off = (s * fd[1] + c) * hw;
                        const double go = g.at(out, c, 0, 0);
                        double pooled = 0.0;
                        for (std::size_t i = 0; i < hw; ++i) pooled += f[off + i] * m[s * hw + i];
                        pooled /= area;
                        for (std::size_t i = 0; i < hw; ++i) {
                            df[off + i] = go * m[s * hw + i] * k;
                            dm[s * hw + i] += go * (f[off + i] - pooled) * k;
                        }
                    }
                }
                if (want(0)) give(0, std::move(df));
                if (want(1)) give(1, std::move(dm));
                break;
            }
            case Op::CosineSimilarity: {
                const Tensor4& f = in(0);
                const Tensor4& p = in(1);
                const Dims4& fd = f.dims();
                const std::size_t hw = plane(fd);
                const std::size_t cn = fd[1];
                Tensor4 df(fd);
                Tensor4 dp(p.dims());
                for (std::size_t b = 0; b < fd[0]; ++b) {
                    double pn = 0.0;
                    for (std::size_t c = 0; c < cn; ++c) pn += p.at(b, c, 0, 0) * p.at(b, c, 0, 0);
                    pn = std::sqrt(pn);
                    for (std::size_t i = 0; i < hw; ++i) {
                        double dot = 0.0, fn = 0.0;
                        for (std::size_t c = 0; c < cn; ++c) {
                            const double fv = f[(b * cn + c) * hw + i];
                            dot += fv * p.at(b, c, 0, 0);
                            fn += fv * fv;
                        }
                        fn = std::sqrt(fn);
                        const double denom = fn * pn + kCosineEps;
                        const double gi = g[b * hw + i];
                        const double a = gi / denom;
                        const double q = gi * dot / (denom * denom);
                        const double cf = fn > 0.0 ? q * pn / fn : 0.0;
                        const double cp = pn > 0.0 ? q * fn / pn : 0.0;
                        for (std::size_t c = 0; c < cn; ++c) {
                            const std::size_t fi = (b * cn + c) * hw + i;
                            df[fi] = a * p.at(b, c, 0, 0) - cf * f[fi];
                            dp.at(b, c, 0, 0) += a * f[fi] - cp * p.at(b, c, 0, 0);
                        }
                    }
                }
                if (want(0)) give(0, std::move(df));
                if (want(1)) give(1, std::move(dp));
                break;
            }
            case Op::ConcatChannels: {
                const Dims4 ad = in(0).dims();
                const Dims4 bd = in(1).dims();
                const std::size_t hw = plane(d);
                if (want(0)) {
                    Tensor4 da(ad);
                    for (std::size_t s = 0; s < d[0]; ++s)
                        std::copy_n(g.data() + s * d[1] * hw, ad[1] * hw, da.data() + s * ad[1] * hw);
                    give(0, std::move(da));
                }
                if (want(1)) {
                    Tensor4 db(bd);
                    for (std::size_t s = 0; s < d[0]; ++s)
                        std::copy_n(g.data() + (s * d[1] + ad[1]) * hw, bd[1] * hw, db.data() + s * bd[1] * hw);
                    give(1, std::move(db));
                }
                break;
            }
            case Op::SoftmaxXent: {
                const Tensor4& z = in(0);
                const Tensor4& t = in(1);
                const Dims4& zd = z.dims();
                const std::size_t hw = plane(zd);
                const std::size_t k = zd[1];
                const double scale = g[0] / static_cast<double>(zd[0] * hw);
                Tensor4 dz(zd);
                for (std::size_t b = 0; b < zd[0]; ++b)
                    for (std::size_t i = 0; i < hw; ++i) {
                        const auto cls = static_cast<std::size_t>(t[b * hw + i]);
                        double zmax = z[(b * k) * hw + i];
                        for (std::size_t c = 1; c < k; ++c) zmax = std::max(zmax, z[(b * k + c) * hw + i]);
                        double sum = 0.0;
                        for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[(b * k + c) * hw + i] - zmax);
                        for (std::size_t c = 0; c < k; ++c) {
                            const double prob = std::exp(z[(b * k + c) * hw + i] - zmax) / sum;
                            dz[(b * k + c) * hw + i] = scale * (prob - (c == cls ? 1.0 : 0.0));
                        }
                    }
                give(0, std::move(dz));
                break;
            }
        }
        if (n.op != Op::Param) grads[idx].reset();
    }

    for (const auto& [p, id] : param_nodes_) {
        Param* param = nodes_[id].param;
        if (!param) continue;
        if (param->trainable && id <= loss && grads[id])
            param->grad = std::move(*grads[id]);
        else
            param->grad.reset();
    }
}

}  // namespace svf::ad
