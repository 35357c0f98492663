#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "svf/commands.hpp"
#include "svf/config.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
};

void add_common(CLI::App& cmd, CommonArgs& args) {
    cmd.add_option("--config", args.config, "Experiment config (INI)")->required();
    cmd.add_option("--seed", args.seed, "Override experiment.seed");
    cmd.add_option("overrides", args.overrides, "Config overrides as section.key=value");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Singular value fine-tuning experiments on synthetic few-shot segmentation"};
    app.require_subcommand(1);

    CommonArgs pre_args, train_args, eval_args, ablate_args;
    std::string checkpoint, axis;

    auto* pre = app.add_subcommand("pretrain", "Pretrain the backbone on base-class patch classification");
    add_common(*pre, pre_args);
    auto* trn = app.add_subcommand("train", "Fine-tune with the configured strategy and write history and results");
    add_common(*trn, train_args);
    auto* evl = app.add_subcommand("eval", "Evaluate a saved model for each configured shot count");
    add_common(*evl, eval_args);
    evl->add_option("--checkpoint", checkpoint, "Model checkpoint directory (default: <output_dir>/checkpoints/model)");
    auto* abl = app.add_subcommand("ablate", "Run one ablation table and write a combined results CSV");
    add_common(*abl, ablate_args);
    abl->add_option("--axis", axis, "bn | layers | convkind | subspace | svf-layers")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        auto load = [](const CommonArgs& a) { return svf::load_config(a.config, a.overrides, a.seed); };
        if (pre->parsed()) {
            svf::cmd_pretrain(load(pre_args), std::cout);
        } else if (trn->parsed()) {
            svf::cmd_train(load(train_args), std::cout);
        } else if (evl->parsed()) {
            const auto cfg = load(eval_args);
            svf::cmd_eval(cfg, checkpoint.empty() ? cfg.model_dir() : std::filesystem::path(checkpoint), std::cout);
        } else if (abl->parsed()) {
            const auto cfg = load(ablate_args);
            svf::ablation_strategies(axis);
            svf::cmd_ablate(cfg, axis, std::cout);
        }
    } catch (const svf::ConfigError& e) {
        std::cerr << "svf_lab: config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "svf_lab: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
