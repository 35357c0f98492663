#include "svf/training.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <tuple>

#include <fmt/core.h>

#include "svf/optim.hpp"

namespace svf {

namespace {

// derive_seed streams owned by this module
constexpr std::uint64_t kStreamTrainEpisodes = 201;
constexpr std::uint64_t kStreamTrainOrder = 202;
constexpr std::uint64_t kStreamValidation = 203;

class GraphCache {
public:
    explicit GraphCache(FssModel& model, std::size_t image_size) : model_(model), size_(image_size) {}

    FssGraph& get(std::size_t batch, std::size_t shots, std::size_t prefix) {
        auto& slot = graphs_[{batch, shots, prefix}];
        if (!slot) slot = std::make_unique<FssGraph>(model_, batch, shots, size_, prefix);
        return *slot;
    }

private:
    FssModel& model_;
    std::size_t size_;
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::unique_ptr<FssGraph>> graphs_;
};

void score(const Tensor4& logits, std::span<const Episode* const> batch, ConfusionTally& tally, FbTally* fb) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const BinaryMask pred = BinaryMask::from_logits(logits, b);
        const BinaryMask gt = BinaryMask::from_tensor(batch[b]->query.mask);
        accumulate(tally, pred, gt, batch[b]->class_id);
        if (fb) accumulate(*fb, pred, gt);
    }
}

EvalResult evaluate_with(GraphCache& cache, const StageCache* stages, std::span<const Episode> episodes,
                         std::size_t batch) {
    if (episodes.empty()) throw std::invalid_argument("evaluate: no episodes");
    if (batch == 0) throw std::invalid_argument("evaluate: batch must be positive");
    EvalResult r;
    for (std::size_t first = 0; first < episodes.size(); first += batch) {
        const std::size_t b = std::min(batch, episodes.size() - first);
        std::vector<const Episode*> ptrs;
        for (std::size_t i = 0; i < b; ++i) ptrs.push_back(&episodes[first + i]);
        FssGraph& g = cache.get(b, ptrs.front()->shots(), stages ? stages->prefix() : 0);
        score(g.forward(ptrs, stages), ptrs, r.tally, &r.fb);
    }
    r.miou = miou(r.tally);
    r.fb_iou = fb_iou(r.fb);
    return r;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must lie in [0, 1)");
    if (batch == 0 || episodes_per_epoch == 0) throw std::invalid_argument("train: batch and episodes_per_epoch must be positive");
    if (val_episodes == 0 || eval_batch == 0) throw std::invalid_argument("train: val_episodes and eval_batch must be positive");
    if (precision != Precision::Double)
        throw std::invalid_argument("train: only double precision is implemented");
}

void write_history_csv(std::ostream& out, const History& history) {
    out << "epoch,train_loss,train_miou,val_miou\n";
    for (const auto& h : history)
        out << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", h.epoch, h.train_loss, h.train_miou, h.val_miou);
}

EvalResult evaluate(FssModel& model, std::span<const Episode> episodes, std::size_t batch) {
    if (episodes.empty()) throw std::invalid_argument("evaluate: no episodes");
    GraphCache cache(model, episodes.front().query.image.dim(2));
    return evaluate_with(cache, nullptr, episodes, batch);
}

std::vector<Episode> validation_episodes(const SplitPlan& plan, const EpisodeConfig& cfg, std::uint64_t seed,
                                         std::size_t count) {
    return sample_episodes(plan, Split::Test, cfg, seed, kStreamValidation, 0, count);
}

TrainResult train(FssModel& model, const SplitPlan& plan, const EpisodeConfig& episodes, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    plan.validate();
    const std::size_t size = episodes.scene.image_size;
    GraphCache cache(model, size);
    const auto val = validation_episodes(plan, episodes, cfg.seed, cfg.val_episodes);
    // Frozen leading stages give the same outputs every epoch, so they run once per episode.
    StageCache stages(model, frozen_stage_prefix(model), size);
    stages.add(val);

    TrainResult result;
    if (cfg.epochs == 0) {
        result.final_val = evaluate_with(cache, &stages, val, cfg.eval_batch);
        return result;
    }

    std::vector<Episode> pool;
    if (cfg.train_pool > 0) {
        pool = sample_episodes(plan, Split::Train, episodes, cfg.seed, kStreamTrainEpisodes, 0, cfg.train_pool);
        stages.add(pool);
    }

    Sgd sgd(model.trainable_params(), cfg.momentum);
    const std::size_t steps_per_epoch = (cfg.episodes_per_epoch + cfg.batch - 1) / cfg.batch;
    const std::size_t total = cfg.epochs * steps_per_epoch;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Episode> fresh;
        std::optional<StageCache> fresh_stages;
        std::vector<const Episode*> order;
        if (cfg.train_pool > 0) {
            std::mt19937_64 rng(derive_seed(cfg.seed, kStreamTrainOrder, epoch));
            std::vector<std::size_t> idx(pool.size());
            std::iota(idx.begin(), idx.end(), 0);
            while (order.size() < cfg.episodes_per_epoch) {
                std::shuffle(idx.begin(), idx.end(), rng);
                for (std::size_t i : idx)
                    if (order.size() < cfg.episodes_per_epoch) order.push_back(&pool[i]);
            }
        } else {
            fresh = sample_episodes(plan, Split::Train, episodes, cfg.seed, kStreamTrainEpisodes,
                                    epoch * cfg.episodes_per_epoch, cfg.episodes_per_epoch);
            for (const auto& e : fresh) order.push_back(&e);
            fresh_stages.emplace(model, stages.prefix(), size);
            fresh_stages->add(fresh);
        }
        const StageCache& train_stages = fresh_stages ? *fresh_stages : stages;

        ConfusionTally train_tally;
        double loss_sum = 0.0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
            const std::size_t b = std::min(cfg.batch, order.size() - first);
            const std::span<const Episode* const> batch(order.data() + first, b);
            FssGraph& g = cache.get(b, episodes.shots, stages.prefix());
            score(g.forward(batch, &train_stages), batch, train_tally, nullptr);
            loss_sum += g.loss() * static_cast<double>(b);
            g.backward();
            sgd.step(cosine_lr(step++, total, cfg.lr));
        }

        result.final_val = evaluate_with(cache, &stages, val, cfg.eval_batch);
        HistoryRecord rec{epoch + 1, loss_sum / static_cast<double>(order.size()), miou(train_tally),
                          result.final_val.miou};
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

}  // namespace svf
