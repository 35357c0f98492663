#pragma once

// The four experiment commands. Each writes its artifacts under the config's
// output directory and progress lines prefixed `[epoch N]` to `progress`:
//
//   <output_dir>/checkpoints/backbone/   pretrain
//   <output_dir>/checkpoints/model/      train
//   <output_dir>/history.csv             train
//   <output_dir>/result.csv              train
//   <output_dir>/svd_changes.csv         train, decomposed models only
//   <output_dir>/eval.csv                eval
//   <output_dir>/ablate-<axis>.csv       ablate

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "svf/config.hpp"
#include "svf/metrics.hpp"
#include "svf/svf.hpp"
#include "svf/training.hpp"

namespace svf {

struct PretrainOutcome {
    std::filesystem::path checkpoint;
    double holdout_accuracy = 0.0;  // NaN for a zero-epoch run
};

PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, std::ostream& progress);

struct TrainOutcome {
    History history;
    ResultRow result;
    std::vector<SvdChangeRecord> svd_changes;  // empty when nothing is decomposed
};

TrainOutcome cmd_train(const ExperimentConfig& cfg, std::ostream& progress);

/// Evaluates a saved model on the validation set once per configured shot count.
std::vector<ResultRow> cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                std::ostream& progress);

/// Axes: bn, layers, convkind, subspace, svf-layers.
std::vector<std::string> ablation_axes();
/// The variants an axis runs, in table order. SVF rows use the configured variant (A or B).
std::vector<StrategyConfig> ablation_strategies(const std::string& axis, SvfVariant variant = SvfVariant::A);
std::vector<ResultRow> cmd_ablate(const ExperimentConfig& cfg, const std::string& axis, std::ostream& progress);

}  // namespace svf
