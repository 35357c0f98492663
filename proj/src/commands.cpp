#include "svf/commands.hpp"

#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <fmt/core.h>

#include "svf/checkpoint.hpp"

namespace svf {

namespace fs = std::filesystem;

namespace {

void prepare_output(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
        throw std::runtime_error(fmt::format("cannot create output directory '{}': {}", dir.string(), ec.message()));
}

template <typename Writer>
void write_file(const fs::path& path, Writer&& write) {
    std::ostringstream buf;
    write(buf);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << buf.str();
    out.close();
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Reads a CSV back and checks its header and row count.
void check_csv(const fs::path& path, const std::string& header, std::size_t rows) {
    std::ifstream in(path);
    std::string line;
    if (!in || !std::getline(in, line) || line != header)
        throw std::runtime_error(fmt::format("{} did not read back with header '{}'", path.string(), header));
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    if (n != rows) throw std::runtime_error(fmt::format("{} read back {} rows, expected {}", path.string(), n, rows));
}

const char* kResultsHeader = "fold,strategy,k,miou,fb_iou";

void write_results(const fs::path& path, const std::vector<ResultRow>& rows) {
    write_file(path, [&](std::ostream& o) { write_results_csv(o, rows); });
    check_csv(path, kResultsHeader, rows.size());
}

Backbone load_pretrained(const ExperimentConfig& cfg) {
    const fs::path dir = cfg.backbone_dir();
    if (!fs::exists(dir / "manifest.txt"))
        throw std::runtime_error(fmt::format("no pretrained backbone checkpoint at '{}' (run pretrain first)", dir.string()));
    Backbone bb = load_backbone(dir);
    if (bb.channels() != cfg.channels)
        throw std::runtime_error(fmt::format("backbone at '{}' has channels {}, config asks for {}", dir.string(),
                                             channels_string(bb.channels()), channels_string(cfg.channels)));
    return bb;
}

struct RunOutcome {
    FssModel model;
    TrainResult result;
};

RunOutcome run_strategy(const ExperimentConfig& cfg, const Backbone& backbone, const StrategyConfig& strategy,
                        std::ostream& progress, const std::string& tag) {
    FssModel model = build_fss_model(backbone, cfg.head_width, cfg.head_seed(), strategy);
    TrainResult r = train(model, cfg.plan, cfg.episodes, cfg.train, [&](const HistoryRecord& h) {
        progress << fmt::format("[epoch {}] {}train_loss={:.6f} train_miou={:.6f} val_miou={:.6f}\n", h.epoch, tag,
                                h.train_loss, h.train_miou, h.val_miou);
        progress.flush();
    });
    return {std::move(model), std::move(r)};
}

ResultRow result_row(const ExperimentConfig& cfg, const StrategyConfig& s, std::size_t k, const EvalResult& e) {
    return {cfg.plan.fold, s.label(), k, e.miou, e.fb_iou};
}

}  // namespace

PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, std::ostream& progress) {
    prepare_output(cfg.output_dir);
    const Backbone init = Backbone::init(cfg.channels, cfg.backbone_init_seed());
    const auto base = cfg.plan.train_classes();
    PretrainResult r = pretrain_backbone(init, base, cfg.plan.num_classes, cfg.pretrain);
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e)
        progress << fmt::format("[epoch {}] pretrain_loss={:.6f}\n", e + 1, r.epoch_loss[e]);
    progress << fmt::format("pretrain holdout accuracy {:.4f} over {} base classes\n", r.holdout_accuracy, base.size());

    const fs::path dir = cfg.backbone_dir();
    save_backbone(dir, r.backbone,
                  {{"seed", std::to_string(cfg.seed)},
                   {"fold", std::to_string(cfg.plan.fold)},
                   {"pretrain.epochs", std::to_string(cfg.pretrain.epochs)},
                   {"holdout_accuracy", fmt::format("{:.6f}", r.holdout_accuracy)}});
    load_backbone(dir);
    return {dir, r.holdout_accuracy};
}

TrainOutcome cmd_train(const ExperimentConfig& cfg, std::ostream& progress) {
    const Backbone backbone = load_pretrained(cfg);
    prepare_output(cfg.output_dir);
    RunOutcome run = run_strategy(cfg, backbone, cfg.strategy, progress, "");

    TrainOutcome out;
    out.history = run.result.history;
    out.result = result_row(cfg, cfg.strategy, cfg.episodes.shots, run.result.final_val);
    for (const auto& c : run.model.backbone.convs())
        if (c.svf) {
            const auto rows = singular_value_report(c.name, c.svf->initial_scale, c.svf->effective_scale());
            out.svd_changes.insert(out.svd_changes.end(), rows.begin(), rows.end());
        }

    const fs::path history = cfg.output_dir / "history.csv";
    write_file(history, [&](std::ostream& o) { write_history_csv(o, out.history); });
    check_csv(history, "epoch,train_loss,train_miou,val_miou", out.history.size());
    write_results(cfg.output_dir / "result.csv", {out.result});

    const fs::path svd = cfg.output_dir / "svd_changes.csv";
    if (run.model.decomposed().empty()) {
        fs::remove(svd);
    } else {
        write_file(svd, [&](std::ostream& o) { write_svd_changes_csv(o, out.svd_changes); });
        check_csv(svd, "layer,position,initial,final,delta", out.svd_changes.size());
    }

    save_model(cfg.model_dir(), run.model, {{"seed", std::to_string(cfg.seed)}, {"fold", std::to_string(cfg.plan.fold)}});
    load_model(cfg.model_dir());
    progress << fmt::format("final {} val_miou={:.4f} fb_iou={:.4f}\n", out.result.strategy, out.result.miou,
                            out.result.fb_iou);
    return out;
}

std::vector<ResultRow> cmd_eval(const ExperimentConfig& cfg, const fs::path& checkpoint, std::ostream& progress) {
    if (!fs::exists(checkpoint / "manifest.txt"))
        throw std::runtime_error(fmt::format("no model checkpoint at '{}'", checkpoint.string()));
    FssModel model = load_model(checkpoint);
    prepare_output(cfg.output_dir);
    std::vector<ResultRow> rows;
    for (std::size_t k : cfg.eval_shots) {
        EpisodeConfig ec = cfg.episodes;
        ec.shots = k;
        const auto val = validation_episodes(cfg.plan, ec, cfg.seed, cfg.train.val_episodes);
        const EvalResult e = evaluate(model, val, cfg.train.eval_batch);
        rows.push_back(result_row(cfg, model.strategy, k, e));
        progress << fmt::format("eval k={} miou={:.4f} fb_iou={:.4f}\n", k, e.miou, e.fb_iou);
    }
    write_results(cfg.output_dir / "eval.csv", rows);
    return rows;
}

std::vector<std::string> ablation_axes() { return {"bn", "layers", "convkind", "subspace", "svf-layers"}; }

std::vector<StrategyConfig> ablation_strategies(const std::string& axis, SvfVariant variant) {
    const std::set<int> late{2, 3, 4};
    auto svf = [&](const char* sub, std::set<int> stages) {
        return StrategyConfig::svf(parse_subspaces(sub), std::move(stages), variant);
    };
    if (axis == "bn") {
        StrategyConfig bn_only = StrategyConfig::freeze();
        bn_only.stages = late;
        bn_only.bn_trainable = true;
        StrategyConfig bn_s = svf("S", late);
        bn_s.bn_trainable = true;
        return {StrategyConfig::freeze(), bn_only, bn_s, svf("S", late)};
    }
    if (axis == "layers")
        return {StrategyConfig::freeze(), StrategyConfig::full(),       StrategyConfig::layers(late),
                StrategyConfig::layers({3, 4}), StrategyConfig::layers({4}), svf("S", late)};
    if (axis == "convkind")
        return {StrategyConfig::freeze(), StrategyConfig::conv_kind(KernelSelect::Both, late),
                StrategyConfig::conv_kind(KernelSelect::Conv3x3, late),
                StrategyConfig::conv_kind(KernelSelect::Conv1x1, late), svf("S", late)};
    if (axis == "subspace")
        return {svf("U", late),   svf("S", late),   svf("V", late),    svf("U,S", late),
                svf("S,V", late), svf("U,V", late), svf("U,S,V", late)};
    if (axis == "svf-layers") return {svf("S", {4}), svf("S", {3, 4}), svf("S", late), svf("S", {1, 2, 3, 4})};
    std::string known;
    for (const auto& a : ablation_axes()) known += (known.empty() ? "" : ", ") + a;
    throw std::invalid_argument(fmt::format("unknown ablation axis '{}' (expected one of {})", axis, known));
}

std::vector<ResultRow> cmd_ablate(const ExperimentConfig& cfg, const std::string& axis, std::ostream& progress) {
    const auto strategies = ablation_strategies(axis, cfg.strategy.variant);
    const Backbone backbone = load_pretrained(cfg);
    prepare_output(cfg.output_dir);
    std::vector<ResultRow> rows;
    for (const auto& s : strategies) {
        RunOutcome run = run_strategy(cfg, backbone, s, progress, s.label() + " ");
        rows.push_back(result_row(cfg, s, cfg.episodes.shots, run.result.final_val));
    }
    write_results(cfg.output_dir / fmt::format("ablate-{}.csv", axis), rows);
    return rows;
}

}  // namespace svf
