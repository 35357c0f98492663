#pragma once

// Experiment configuration: one INI file with a section per module. Parsing is
// strict: unknown sections or keys, malformed values and duplicates are errors.
// Overrides use `section.key=value` and are applied before validation.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "svf/episodes.hpp"
#include "svf/model.hpp"
#include "svf/strategy.hpp"
#include "svf/training.hpp"

namespace svf {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::uint64_t seed = 321;
    std::filesystem::path output_dir = "runs/default";
    std::filesystem::path backbone;  // empty: <output_dir>/checkpoints/backbone

    SplitPlan plan;
    EpisodeConfig episodes;
    ChannelPlan channels = kDefaultChannels;
    std::size_t head_width = 32;
    PretrainConfig pretrain;
    StrategyConfig strategy = StrategyConfig::svf();
    TrainConfig train;
    std::vector<std::size_t> eval_shots{1, 5};

    std::filesystem::path backbone_dir() const;
    std::filesystem::path model_dir() const { return output_dir / "checkpoints" / "model"; }
    /// Seeds of the backbone initialisation and of the head, both derived from `seed`.
    std::uint64_t backbone_init_seed() const;
    std::uint64_t head_seed() const;
    /// Copies `seed` into the pretrain and train configs.
    void propagate_seed();
};

/// Parses INI text. `origin` names the source in error messages.
ExperimentConfig parse_config(std::istream& in, const std::string& origin,
                              const std::vector<std::string>& overrides = {},
                              std::optional<std::uint64_t> seed = std::nullopt);
/// Throws ConfigError naming the path when the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                             std::optional<std::uint64_t> seed = std::nullopt);

/// Canonical INI text for the config; parsing it yields the same config.
std::string to_ini(const ExperimentConfig& cfg);

}  // namespace svf
