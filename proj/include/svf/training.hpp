#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "svf/episodes.hpp"
#include "svf/metrics.hpp"
#include "svf/model.hpp"

namespace svf {

enum class Precision { Double, Single };

struct TrainConfig {
    double lr = 0.015;
    double momentum = 0.9;
    std::size_t epochs = 40;
    std::size_t episodes_per_epoch = 32;
    /// Fixed pool of training episodes sampled from each epoch; 0 draws fresh episodes every epoch.
    std::size_t train_pool = 64;
    std::size_t batch = 4;
    std::size_t val_episodes = 200;
    std::size_t eval_batch = 8;
    std::uint64_t seed = 321;
    Precision precision = Precision::Double;

    void validate() const;
};

struct HistoryRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_miou = 0.0;
    double val_miou = 0.0;
};

using History = std::vector<HistoryRecord>;

/// `epoch,train_loss,train_miou,val_miou` with 6 decimals.
void write_history_csv(std::ostream& out, const History& history);

struct EvalResult {
    double miou = 0.0;
    double fb_iou = 0.0;
    ConfusionTally tally;
    FbTally fb;
};

/// Pooled metrics of the model's argmax predictions over the episodes, evaluated in
/// batches of at most `batch`.
EvalResult evaluate(FssModel& model, std::span<const Episode> episodes, std::size_t batch);

/// The fixed validation set: `count` test-split episodes determined by the seed alone.
std::vector<Episode> validation_episodes(const SplitPlan& plan, const EpisodeConfig& cfg, std::uint64_t seed,
                                         std::size_t count);

struct TrainResult {
    History history;
    EvalResult final_val;  // validation metrics after the last epoch (empty run: before training)
};

using EpochCallback = std::function<void(const HistoryRecord&)>;

/// Episodic training of the model's trainable params with SGD, momentum and cosine decay.
/// Each epoch runs ceil(episodes_per_epoch / batch) steps on train-split episodes and then
/// evaluates the validation set.
TrainResult train(FssModel& model, const SplitPlan& plan, const EpisodeConfig& episodes, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace svf
