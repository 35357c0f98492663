#include "svf/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/core.h>

#include "svf/optim.hpp"

namespace svf {

namespace {

// derive_seed streams owned by this module
constexpr std::uint64_t kStreamPretrainPatches = 101;
constexpr std::uint64_t kStreamPretrainHoldout = 102;
constexpr std::uint64_t kStreamPretrainOrder = 103;
constexpr std::uint64_t kStreamPretrainFc = 104;

Tensor4 he_normal(const Dims4& d, std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(d[1] * d[2] * d[3]);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor4 t(d);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

BatchNorm identity_bn(const std::string& name, std::size_t c) {
    return {ad::Param(name + ".bn.gamma", Tensor4({c, 1, 1, 1}, 1.0)), ad::Param(name + ".bn.beta", Tensor4({c, 1, 1, 1})),
            ad::Param(name + ".bn.mean", Tensor4({c, 1, 1, 1})), ad::Param(name + ".bn.var", Tensor4({c, 1, 1, 1}, 1.0))};
}

}  // namespace

Tensor4 BackboneConv::effective_weight() const { return svf ? recompose(*svf) : weight.value; }

Backbone Backbone::init(const ChannelPlan& channels, std::uint64_t seed) {
    for (std::size_t c : channels)
        if (c == 0) throw std::invalid_argument("backbone: channel counts must be positive");
    Backbone b;
    b.channels_ = channels;
    std::mt19937_64 rng(seed);
    std::size_t in = 3;
    auto add = [&](std::string name, int stage, std::size_t c_in, std::size_t c_out, std::size_t k, ConvGeometry g) {
        BackboneConv c;
        c.name = name;
        c.stage = stage;
        c.c_in = c_in;
        c.c_out = c_out;
        c.kernel = k;
        c.geometry = g;
        c.weight = ad::Param(name + ".weight", he_normal({c_out, c_in, k, k}, rng));
        c.bn = identity_bn(name, c_out);
        b.convs_.push_back(std::move(c));
    };
    for (int s = 1; s <= 4; ++s) {
        const std::size_t c = channels[s - 1];
        add(fmt::format("s{}.down", s), s, in, c, 1, ConvGeometry::square(1, s == 1 ? 1 : 2, 0));
        add(fmt::format("s{}.b1", s), s, c, c, 3, ConvGeometry::square(3, 1, 1));
        add(fmt::format("s{}.b2", s), s, c, c, 3, ConvGeometry::square(3, 1, 1));
        in = c;
    }
    return b;
}

BackboneConv& Backbone::conv(const std::string& name) {
    for (auto& c : convs_)
        if (c.name == name) return c;
    throw std::out_of_range("backbone: no conv named '" + name + "'");
}

std::vector<LayerShape> Backbone::layer_shapes() const {
    std::vector<LayerShape> out;
    for (const auto& c : convs_) out.push_back({c.stage, c.c_out, c.c_in, c.kernel});
    return out;
}

std::vector<ad::Param*> Backbone::params() {
    std::vector<ad::Param*> out;
    for (auto& c : convs_) {
        if (c.svf) {
            out.push_back(&c.svf->conv_v);
            out.push_back(&c.svf->scale);
            out.push_back(&c.svf->conv_u);
            if (c.svf->s_prime) out.push_back(&*c.svf->s_prime);
        } else {
            out.push_back(&c.weight);
        }
        for (ad::Param* p : {&c.bn.gamma, &c.bn.beta, &c.bn.mean, &c.bn.var}) out.push_back(p);
    }
    return out;
}

std::vector<const ad::Param*> Backbone::params() const {
    auto mut = const_cast<Backbone*>(this)->params();
    return {mut.begin(), mut.end()};
}

Backbone::Nodes Backbone::emit(ad::Graph& g, ad::NodeId x, NormMode mode, std::size_t first, std::size_t last) {
    if (first > last || last > 4) throw std::invalid_argument(fmt::format("Backbone::emit: bad stage range [{}, {})", first, last));
    Nodes out;
    auto block = [&](BackboneConv& c, ad::NodeId in) {
        const ad::NodeId y = c.svf ? emit_svf(g, *c.svf, in) : g.conv2d(in, g.param(c.weight), c.geometry);
        out.conv_outputs.push_back(y);
        const ad::NodeId n =
            mode == NormMode::Batch
                ? g.batchnorm_batch(y, g.param(c.bn.gamma), g.param(c.bn.beta))
                : g.batchnorm_frozen(y, g.param(c.bn.gamma), g.param(c.bn.beta), g.param(c.bn.mean), g.param(c.bn.var));
        out.norm_outputs.push_back(n);
        return g.relu(n);
    };
    ad::NodeId h = x;
    for (std::size_t s = first; s < last; ++s) {
        const ad::NodeId entry = block(convs_[3 * s], h);
        const ad::NodeId b1 = block(convs_[3 * s + 1], entry);
        const ad::NodeId b2 = block(convs_[3 * s + 2], b1);
        h = g.add(b2, entry);
        out.stages[s] = h;
    }
    return out;
}

std::array<Dims4, 4> Backbone::stage_dims(std::size_t n, std::size_t h, std::size_t w) const {
    std::array<Dims4, 4> out{};
    for (std::size_t s = 0; s < 4; ++s) out[s] = {n, channels_[s], h >> s, w >> s};
    return out;
}

SegHead SegHead::init(std::size_t feature_channels, std::size_t width, std::uint64_t seed) {
    if (width == 0) throw std::invalid_argument("head: width must be positive");
    std::mt19937_64 rng(seed);
    SegHead h;
    h.conv1 = ad::Param("head.conv1", he_normal({width, feature_channels + 2, 3, 3}, rng), true);
    h.conv2 = ad::Param("head.conv2", he_normal({width, width, 3, 3}, rng), true);
    h.classifier = ad::Param("head.classifier", Tensor4({2, width, 1, 1}), true);
    return h;
}

std::vector<ad::Param*> FssModel::params() {
    auto out = backbone.params();
    for (ad::Param* p : head.params()) out.push_back(p);
    return out;
}

std::vector<const ad::Param*> FssModel::params() const {
    auto mut = const_cast<FssModel*>(this)->params();
    return {mut.begin(), mut.end()};
}

std::vector<ad::Param*> FssModel::trainable_params() {
    std::vector<ad::Param*> out;
    for (ad::Param* p : params())
        if (p->trainable) out.push_back(p);
    return out;
}

std::size_t FssModel::trainable_backbone_scalars() const {
    std::size_t n = 0;
    for (const ad::Param* p : backbone.params())
        if (p->trainable) n += p->value.size();
    return n;
}

std::vector<DecomposedConv*> FssModel::decomposed() {
    std::vector<DecomposedConv*> out;
    for (auto& c : backbone.convs())
        if (c.svf) out.push_back(&*c.svf);
    return out;
}

void apply_strategy(FssModel& model, const StrategyConfig& cfg) {
    cfg.validate();
    for (auto& c : model.backbone.convs()) {
        if (c.svf && !cfg.decomposes(c.stage, c.kernel))
            throw std::logic_error("apply_strategy: '" + c.name + "' is decomposed but not selected by " + cfg.label());
        if (c.svf && c.svf->variant != cfg.variant)
            throw std::logic_error("apply_strategy: '" + c.name + "' is decomposed with another variant");
    }
    for (auto& c : model.backbone.convs()) {
        const bool selected = cfg.selects(c.stage, c.kernel);
        c.weight.trainable = false;
        if (cfg.kind == StrategyKind::Svf) {
            if (selected) {
                if (!c.svf) c.svf = decompose_conv(c.weight.value, c.geometry, cfg.variant, c.name);
                c.svf->conv_v.trainable = cfg.subspaces.v;
                c.svf->conv_u.trainable = cfg.subspaces.u;
                c.svf->scale.trainable = false;
                c.svf->singular_param().trainable = cfg.subspaces.s;
            }
        } else {
            c.weight.trainable = selected;
        }
        const bool bn = cfg.bn_trainable && cfg.stages.count(c.stage) > 0;
        c.bn.gamma.trainable = bn;
        c.bn.beta.trainable = bn;
        c.bn.mean.trainable = false;
        c.bn.var.trainable = false;
    }
    for (ad::Param* p : model.head.params()) p->trainable = true;
    model.strategy = cfg;
}

FssModel build_fss_model(Backbone backbone, std::size_t head_width, std::uint64_t head_seed,
                         const StrategyConfig& strategy) {
    FssModel m;
    const auto& ch = backbone.channels();
    m.backbone = std::move(backbone);
    m.head = SegHead::init(ch[2] + ch[3], head_width, head_seed);
    apply_strategy(m, strategy);
    return m;
}

void check_image_size(std::size_t size) {
    if (size < 32 || size % 16 != 0)
        throw std::invalid_argument(fmt::format("image size {} unsupported: need a multiple of 16, at least 32", size));
}

std::size_t frozen_stage_prefix(const FssModel& model) {
    std::array<bool, 4> trainable{};
    for (const auto& c : model.backbone.convs()) {
        bool any = c.weight.trainable || c.bn.gamma.trainable || c.bn.beta.trainable;
        if (c.svf) {
            const DecomposedConv& d = *c.svf;
            any = any || d.conv_v.trainable || d.scale.trainable || d.conv_u.trainable || (d.s_prime && d.s_prime->trainable);
        }
        if (any) trainable[static_cast<std::size_t>(c.stage - 1)] = true;
    }
    std::size_t p = 0;
    while (p < 4 && !trainable[p]) ++p;
    return p;
}

std::vector<std::size_t> StageCache::stages_read(std::size_t prefix) {
    if (prefix > 4) throw std::invalid_argument("StageCache: prefix above 4");
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < prefix; ++s)
        if (s + 1 == prefix || s >= 2) out.push_back(s);
    return out;
}

StageCache::StageCache(FssModel& model, std::size_t prefix, std::size_t image_size)
    : model_(model), prefix_(prefix), size_(image_size) {
    check_image_size(image_size);
    if (prefix > frozen_stage_prefix(model))
        throw std::invalid_argument(fmt::format("StageCache: stage {} has trainable tensors", frozen_stage_prefix(model) + 1));
}

void StageCache::add(std::span<const Episode> episodes) {
    if (prefix_ == 0) return;
    constexpr std::size_t kChunk = 8;
    const std::size_t n = size_;
    const auto read = stages_read(prefix_);
    std::vector<const Tensor4*> images;
    for (const auto& e : episodes) {
        for (const auto& sc : e.supports) images.push_back(&sc.image);
        images.push_back(&e.query.image);
    }
    std::vector<std::vector<Tensor4>> features(images.size());
    std::map<std::size_t, std::pair<std::unique_ptr<ad::Graph>, Backbone::Nodes>> graphs;
    const std::size_t img = 3 * n * n;
    for (std::size_t first = 0; first < images.size(); first += kChunk) {
        const std::size_t b = std::min(kChunk, images.size() - first);
        auto& [graph, nodes] = graphs[b];
        if (!graph) {
            graph = std::make_unique<ad::Graph>();
            nodes = model_.backbone.emit(*graph, graph->input("x", {b, 3, n, n}), Backbone::NormMode::Frozen, 0, prefix_);
        }
        Tensor4 x({b, 3, n, n});
        for (std::size_t i = 0; i < b; ++i) {
            const Tensor4& im = *images[first + i];
            if (im.dims() != Dims4{1, 3, n, n}) throw ShapeError("StageCache: image size mismatch");
            std::copy_n(im.data(), img, x.data() + i * img);
        }
        std::map<std::string, Tensor4> in;
        in.emplace("x", std::move(x));
        graph->forward(in);
        for (std::size_t s : read) {
            const Tensor4& v = graph->value(nodes.stages[s]);
            const Dims4& d = v.dims();
            const std::size_t plane = d[1] * d[2] * d[3];
            for (std::size_t i = 0; i < b; ++i)
                features[first + i].emplace_back(Dims4{1, d[1], d[2], d[3]},
                                                 std::vector<double>(v.data() + i * plane, v.data() + (i + 1) * plane));
        }
    }
    std::size_t next = 0;
    for (const auto& e : episodes) {
        Entry entry;
        for (std::size_t r = 0; r < read.size(); ++r) {
            const Dims4 d = features[next][r].dims();
            Tensor4 sup({e.shots(), d[1], d[2], d[3]});
            const std::size_t plane = d[1] * d[2] * d[3];
            for (std::size_t k = 0; k < e.shots(); ++k)
                std::copy_n(features[next + k][r].data(), plane, sup.data() + k * plane);
            entry.support.push_back(std::move(sup));
            entry.query.push_back(std::move(features[next + e.shots()][r]));
        }
        next += e.shots() + 1;
        entries_[&e] = std::move(entry);
    }
}

const StageCache::Entry& StageCache::at(const Episode& e) const {
    const auto it = entries_.find(&e);
    if (it == entries_.end()) throw std::invalid_argument("StageCache: episode was not added");
    return it->second;
}

FssGraph::FssGraph(FssModel& model, std::size_t batch, std::size_t shots, std::size_t image_size, std::size_t prefix)
    : batch_(batch), shots_(shots), size_(image_size), prefix_(prefix) {
    check_image_size(image_size);
    if (batch == 0 || shots == 0) throw std::invalid_argument("FssGraph: batch and shots must be positive");
    if (prefix > frozen_stage_prefix(model))
        throw std::invalid_argument(fmt::format("FssGraph: cannot skip stage {}, it has trainable tensors", frozen_stage_prefix(model) + 1));
    auto& g = graph_;
    const std::size_t n = image_size;
    const auto dims = model.backbone.stage_dims(1, n, n);
    const auto read = StageCache::stages_read(prefix);
    auto stage_inputs = [&](const std::string& name, std::size_t count) {
        std::array<ad::NodeId, 4> out{};
        for (std::size_t s : read) {
            Dims4 d = dims[s];
            d[0] = count;
            out[s] = g.input(fmt::format("{}.stage{}", name, s + 1), d);
        }
        return out;
    };
    auto features = [&](const std::string& name, std::size_t count) {
        std::array<ad::NodeId, 4> st = stage_inputs(name, count);
        if (prefix < 4) {
            const ad::NodeId x = prefix == 0 ? g.input(name, {count, 3, n, n}) : st[prefix - 1];
            const auto nodes = model.backbone.emit(g, x, Backbone::NormMode::Frozen, prefix, 4);
            for (std::size_t s = prefix; s < 4; ++s) st[s] = nodes.stages[s];
        }
        return g.concat_channels(st[2], g.upsample(st[3], 2));
    };
    const auto ms = g.input("support_mask", {batch * shots, 1, n, n});
    const auto labels = g.input("labels", {batch, 1, n, n});
    const auto ones = g.input("ones", {batch, 1, n / 4, n / 4});
    const auto temperature = g.input("temperature", {batch, 1, n / 4, n / 4});
    const auto fs = features("support", batch * shots);
    const auto fq = features("query", batch);
    const auto proto = g.masked_avg_pool(fs, g.avgpool2(g.avgpool2(ms)), shots);
    const auto sim = g.mul(g.cosine_similarity_map(fq, proto), temperature);
    ad::NodeId h = g.concat_channels(g.concat_channels(sim, ones), fq);
    h = g.relu(g.conv2d(h, g.param(model.head.conv1), ConvGeometry::square(3, 1, 1)));
    h = g.relu(g.conv2d(h, g.param(model.head.conv2), ConvGeometry::square(3, 1, 1)));
    h = g.conv2d(h, g.param(model.head.classifier), ConvGeometry::square(1));
    logits_ = g.upsample(h, 4);
    loss_ = g.softmax_xent(logits_, labels);
}

const Tensor4& FssGraph::forward(std::span<const Episode* const> episodes, const StageCache* cache) {
    if (episodes.size() != batch_)
        throw std::invalid_argument(fmt::format("FssGraph: {} episodes for a batch of {}", episodes.size(), batch_));
    if (prefix_ > 0 && (!cache || cache->prefix() != prefix_))
        throw std::invalid_argument(fmt::format("FssGraph: needs a stage cache with prefix {}", prefix_));
    const std::size_t n = size_;
    const std::size_t img = 3 * n * n, msk = n * n;
    std::map<std::string, Tensor4> in;
    Tensor4 xs({batch_ * shots_, 3, n, n}), ms({batch_ * shots_, 1, n, n});
    Tensor4 xq({batch_, 3, n, n}), labels({batch_, 1, n, n});
    const auto read = StageCache::stages_read(prefix_);
    std::vector<Tensor4> cs, cq;
    for (std::size_t r = 0; r < read.size(); ++r) {
        const Tensor4& proto = cache->at(*episodes.front()).query[r];
        const Dims4& d = proto.dims();
        cs.emplace_back(Dims4{batch_ * shots_, d[1], d[2], d[3]});
        cq.emplace_back(Dims4{batch_, d[1], d[2], d[3]});
    }
    for (std::size_t b = 0; b < batch_; ++b) {
        const Episode& e = *episodes[b];
        if (e.shots() != shots_)
            throw std::invalid_argument(fmt::format("FssGraph: episode with {} supports, graph expects {}", e.shots(), shots_));
        if (e.query.image.dims() != Dims4{1, 3, n, n})
            throw ShapeError("FssGraph: query image " + dims_string(e.query.image.dims()) + " does not match the graph");
        for (std::size_t k = 0; k < shots_; ++k) {
            const Scene& s = e.supports[k];
            if (s.image.dims() != Dims4{1, 3, n, n}) throw ShapeError("FssGraph: support image size mismatch");
            if (prefix_ == 0) std::copy_n(s.image.data(), img, xs.data() + (b * shots_ + k) * img);
            std::copy_n(s.mask.data(), msk, ms.data() + (b * shots_ + k) * msk);
        }
        if (prefix_ == 0) std::copy_n(e.query.image.data(), img, xq.data() + b * img);
        std::copy_n(e.query.mask.data(), msk, labels.data() + b * msk);
        if (prefix_ > 0) {
            const StageCache::Entry& entry = cache->at(e);
            for (std::size_t r = 0; r < read.size(); ++r) {
                const std::size_t sup = entry.support[r].size(), q = entry.query[r].size();
                std::copy_n(entry.support[r].data(), sup, cs[r].data() + b * sup);
                std::copy_n(entry.query[r].data(), q, cq[r].data() + b * q);
            }
        }
    }
    if (prefix_ == 0) {
        in.emplace("support", std::move(xs));
        in.emplace("query", std::move(xq));
    }
    for (std::size_t r = 0; r < read.size(); ++r) {
        in.emplace(fmt::format("support.stage{}", read[r] + 1), std::move(cs[r]));
        in.emplace(fmt::format("query.stage{}", read[r] + 1), std::move(cq[r]));
    }
    in.emplace("support_mask", std::move(ms));
    in.emplace("labels", std::move(labels));
    in.emplace("ones", Tensor4({batch_, 1, n / 4, n / 4}, 1.0));
    in.emplace("temperature", Tensor4({batch_, 1, n / 4, n / 4}, kSimilarityTemperature));
    graph_.forward(in);
    return graph_.value(logits_);
}

Tensor4 segment(FssModel& model, const Episode& episode) {
    if (episode.shots() == 0) throw std::invalid_argument("segment: episode has no supports");
    for (std::size_t k = 0; k < episode.shots(); ++k) {
        const auto& m = episode.supports[k].mask.values();
        if (std::none_of(m.begin(), m.end(), [](double v) { return v != 0.0; }))
            throw std::invalid_argument(fmt::format("segment: support {} has an empty mask", k));
    }
    FssGraph g(model, 1, episode.shots(), episode.query.image.dim(2));
    const Episode* e = &episode;
    return g.forward(std::span<const Episode* const>(&e, 1));
}

namespace {

struct Patch {
    Tensor4 image;
    std::size_t label;
};

struct ClassifierGraph {
    ad::Graph graph;
    ad::NodeId logits = 0, loss = 0;
    std::vector<ad::NodeId> norm_outputs;
    std::size_t batch = 0, size = 0;

    ClassifierGraph(Backbone& bb, ad::Param& fc, std::size_t b, std::size_t n, Backbone::NormMode mode)
        : batch(b), size(n) {
        const auto x = graph.input("x", {b, 3, n, n});
        const auto labels = graph.input("labels", {b, 1, 1, 1});
        const auto nodes = bb.emit(graph, x, mode);
        norm_outputs = nodes.norm_outputs;
        const Dims4 s4 = graph.dims(nodes.stages[3]);
        const auto ones = graph.input("ones", {b, 1, s4[2], s4[3]});
        logits = graph.conv2d(graph.masked_avg_pool(nodes.stages[3], ones), graph.param(fc), ConvGeometry::square(1));
        loss = graph.softmax_xent(logits, labels);
    }

    void forward(const std::vector<const Patch*>& batch_patches) {
        const std::size_t img = 3 * size * size;
        Tensor4 x({batch, 3, size, size}), labels({batch, 1, 1, 1});
        for (std::size_t i = 0; i < batch; ++i) {
            std::copy_n(batch_patches[i]->image.data(), img, x.data() + i * img);
            labels[i] = static_cast<double>(batch_patches[i]->label);
        }
        std::map<std::string, Tensor4> in;
        in.emplace("x", std::move(x));
        in.emplace("labels", std::move(labels));
        const std::size_t s4 = size / 8;
        in.emplace("ones", Tensor4({batch, 1, s4, s4}, 1.0));
        graph.forward(in);
    }
};

std::vector<Patch> render_patches(std::span<const int> base, const std::vector<ClassSpec>& classes, std::size_t per_class,
                                  std::size_t size, std::uint64_t seed, std::uint64_t stream) {
    std::vector<Patch> out(base.size() * per_class);
    const SceneConfig scene{size, 0};
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.size()); ++i) {
        const std::size_t ci = static_cast<std::size_t>(i) / per_class;
        std::mt19937_64 rng(derive_seed(seed, stream, static_cast<std::uint64_t>(i)));
        out[i] = {render_scene(classes[base[ci]], {}, scene, rng).image, ci};
    }
    return out;
}

}  // namespace

PretrainResult pretrain_backbone(const Backbone& init, std::span<const int> base_classes, std::size_t num_classes,
                                 const PretrainConfig& cfg) {
    if (base_classes.size() < 2)
        throw std::invalid_argument(
            fmt::format("pretrain: {} base class(es); classification needs at least two", base_classes.size()));
    PretrainResult r{init, {}, std::numeric_limits<double>::quiet_NaN()};
    if (cfg.epochs == 0) return r;
    check_image_size(cfg.patch_size);
    if (cfg.batch == 0 || cfg.patches_per_class == 0 || cfg.calibration == 0)
        throw std::invalid_argument("pretrain: batch, patches_per_class and calibration must be positive");

    const auto classes = make_classes(num_classes, cfg.patch_size);
    for (int c : base_classes)
        if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
            throw std::invalid_argument(fmt::format("pretrain: class {} outside 0..{}", c, num_classes - 1));
    const auto train = render_patches(base_classes, classes, cfg.patches_per_class, cfg.patch_size, cfg.seed,
                                      kStreamPretrainPatches);
    const auto holdout = render_patches(base_classes, classes, cfg.holdout_per_class, cfg.patch_size, cfg.seed,
                                        kStreamPretrainHoldout);

    Backbone& bb = r.backbone;
    for (auto& c : bb.convs())
        if (c.svf) throw std::logic_error("pretrain: backbone must not be decomposed");
    std::mt19937_64 fc_rng(derive_seed(cfg.seed, kStreamPretrainFc, 0));
    ad::Param fc("pretrain.fc", he_normal({base_classes.size(), bb.channels()[3], 1, 1}, fc_rng), true);

    using Mode = Backbone::NormMode;
    std::map<std::pair<std::size_t, Mode>, std::unique_ptr<ClassifierGraph>> graphs;
    auto graph_for = [&](std::size_t b, Mode mode) -> ClassifierGraph& {
        auto& slot = graphs[{b, mode}];
        if (!slot) slot = std::make_unique<ClassifierGraph>(bb, fc, b, cfg.patch_size, mode);
        return *slot;
    };

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (auto& c : bb.convs()) {
        c.weight.trainable = true;
        c.bn.gamma.trainable = true;
        c.bn.beta.trainable = true;
    }
    std::vector<ad::Param*> params = bb.params();
    params.push_back(&fc);
    Sgd sgd(params, cfg.momentum);

    const std::size_t steps_per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
    const std::size_t total = cfg.epochs * steps_per_epoch;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, kStreamPretrainOrder, epoch + 1));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
            const std::size_t b = std::min(cfg.batch, order.size() - first);
            std::vector<const Patch*> batch;
            for (std::size_t i = 0; i < b; ++i) batch.push_back(&train[order[first + i]]);
            ClassifierGraph& cg = graph_for(b, Mode::Batch);
            cg.forward(batch);
            loss_sum += cg.graph.value(cg.loss)[0] * static_cast<double>(b);
            cg.graph.backward(cg.loss);
            sgd.step(cosine_lr(step++, total, cfg.lr));
        }
        r.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    }

    for (auto& c : bb.convs()) {
        c.weight.trainable = false;
        c.bn.gamma.trainable = false;
        c.bn.beta.trainable = false;
    }

    // Frozen statistics: batch statistics of the trained network over a calibration sample.
    {
        std::mt19937_64 calib_rng(derive_seed(cfg.seed, kStreamPretrainOrder, 0));
        std::shuffle(order.begin(), order.end(), calib_rng);
        std::vector<const Patch*> calib;
        for (std::size_t i = 0; i < std::min(cfg.calibration, order.size()); ++i) calib.push_back(&train[order[i]]);
        ClassifierGraph& cg = graph_for(calib.size(), Mode::Batch);
        cg.forward(calib);
        for (std::size_t i = 0; i < bb.convs().size(); ++i) {
            auto [mean, var] = cg.graph.batch_stats(cg.norm_outputs[i]);
            auto& bn = bb.convs()[i].bn;
            for (std::size_t c = 0; c < mean.size(); ++c) {
                bn.mean.value[c] = mean[c];
                bn.var.value[c] = var[c];
            }
        }
    }

    std::size_t correct = 0;
    for (std::size_t first = 0; first < holdout.size(); first += cfg.batch) {
        const std::size_t b = std::min(cfg.batch, holdout.size() - first);
        std::vector<const Patch*> batch;
        for (std::size_t i = 0; i < b; ++i) batch.push_back(&holdout[first + i]);
        ClassifierGraph& cg = graph_for(b, Mode::Frozen);
        cg.forward(batch);
        const Tensor4& z = cg.graph.value(cg.logits);
        for (std::size_t i = 0; i < b; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < z.dim(1); ++c)
                if (z.at(i, c, 0, 0) > z.at(i, best, 0, 0)) best = c;
            correct += best == batch[i]->label;
        }
    }
    r.holdout_accuracy = holdout.empty() ? std::numeric_limits<double>::quiet_NaN()
                                         : static_cast<double>(correct) / static_cast<double>(holdout.size());
    return r;
}

}  // namespace svf
