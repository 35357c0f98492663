#include "svf/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/core.h>

#include "svf/checkpoint.hpp"

namespace svf {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

// derive_seed streams owned by this module
constexpr std::uint64_t kStreamBackboneInit = 1;
constexpr std::uint64_t kStreamHeadInit = 2;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    T v{};
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || end != s.data() + s.size())
        throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, raw));
    return v;
}

std::size_t parse_size(const std::string& key, const std::string& raw) { return parse_number<std::size_t>(key, raw); }

bool parse_bool(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError(fmt::format("{}: expected true or false, got '{}'", key, raw));
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& raw) {
    std::vector<std::size_t> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
    return out;
}

Precision parse_precision(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    if (s == "double") return Precision::Double;
    if (s == "single") return Precision::Single;
    throw ConfigError(fmt::format("{}: expected double or single, got '{}'", key, raw));
}

std::string list_string(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
    return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

// Strategy fields are collected first; the default stage set depends on the kind.
struct StrategyFields {
    std::optional<std::string> kind, stages, kernels, subspaces, variant, bn_trainable;
};

template <typename F>
Setter wrap(F f) {
    return [f](ExperimentConfig& c, const std::string& key, const std::string& v) {
        try {
            f(c, key, v);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(fmt::format("{}: {}", key, e.what()));
        }
    };
}

const std::map<std::string, std::map<std::string, Setter>>& setters() {
    static const std::map<std::string, std::map<std::string, Setter>> table = {
        {"experiment",
         {{"seed", wrap([](auto& c, auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); })},
          {"output_dir", wrap([](auto& c, auto&, auto& v) { c.output_dir = trim(v); })},
          {"backbone", wrap([](auto& c, auto&, auto& v) { c.backbone = trim(v); })}}},
        {"data",
         {{"num_classes", wrap([](auto& c, auto& k, auto& v) { c.plan.num_classes = parse_size(k, v); })},
          {"folds", wrap([](auto& c, auto& k, auto& v) { c.plan.folds = parse_size(k, v); })},
          {"fold", wrap([](auto& c, auto& k, auto& v) { c.plan.fold = parse_size(k, v); })},
          {"image_size", wrap([](auto& c, auto& k, auto& v) { c.episodes.scene.image_size = parse_size(k, v); })},
          {"max_distractors",
           wrap([](auto& c, auto& k, auto& v) { c.episodes.scene.max_distractors = parse_size(k, v); })},
          {"shots", wrap([](auto& c, auto& k, auto& v) { c.episodes.shots = parse_size(k, v); })}}},
        {"model",
         {{"channels", wrap([](auto& c, auto&, auto& v) { c.channels = parse_channels(v); })},
          {"head_width", wrap([](auto& c, auto& k, auto& v) { c.head_width = parse_size(k, v); })}}},
        {"pretrain",
         {{"epochs", wrap([](auto& c, auto& k, auto& v) { c.pretrain.epochs = parse_size(k, v); })},
          {"patches_per_class", wrap([](auto& c, auto& k, auto& v) { c.pretrain.patches_per_class = parse_size(k, v); })},
          {"holdout_per_class", wrap([](auto& c, auto& k, auto& v) { c.pretrain.holdout_per_class = parse_size(k, v); })},
          {"patch_size", wrap([](auto& c, auto& k, auto& v) { c.pretrain.patch_size = parse_size(k, v); })},
          {"batch", wrap([](auto& c, auto& k, auto& v) { c.pretrain.batch = parse_size(k, v); })},
          {"calibration", wrap([](auto& c, auto& k, auto& v) { c.pretrain.calibration = parse_size(k, v); })},
          {"lr", wrap([](auto& c, auto& k, auto& v) { c.pretrain.lr = parse_number<double>(k, v); })},
          {"momentum", wrap([](auto& c, auto& k, auto& v) { c.pretrain.momentum = parse_number<double>(k, v); })}}},
        {"train",
         {{"lr", wrap([](auto& c, auto& k, auto& v) { c.train.lr = parse_number<double>(k, v); })},
          {"momentum", wrap([](auto& c, auto& k, auto& v) { c.train.momentum = parse_number<double>(k, v); })},
          {"epochs", wrap([](auto& c, auto& k, auto& v) { c.train.epochs = parse_size(k, v); })},
          {"episodes_per_epoch", wrap([](auto& c, auto& k, auto& v) { c.train.episodes_per_epoch = parse_size(k, v); })},
          {"train_pool", wrap([](auto& c, auto& k, auto& v) { c.train.train_pool = parse_size(k, v); })},
          {"batch", wrap([](auto& c, auto& k, auto& v) { c.train.batch = parse_size(k, v); })},
          {"val_episodes", wrap([](auto& c, auto& k, auto& v) { c.train.val_episodes = parse_size(k, v); })},
          {"eval_batch", wrap([](auto& c, auto& k, auto& v) { c.train.eval_batch = parse_size(k, v); })},
          {"precision", wrap([](auto& c, auto& k, auto& v) { c.train.precision = parse_precision(k, v); })}}},
        {"eval", {{"shots", wrap([](auto& c, auto& k, auto& v) { c.eval_shots = parse_size_list(k, v); })}}},
    };
    return table;
}

const std::set<std::string> kStrategyKeys{"kind", "stages", "kernels", "subspaces", "variant", "bn_trainable"};

StrategyConfig build_strategy(const StrategyFields& f) {
    StrategyConfig s;
    auto guarded = [](const std::string& key, auto fn) {
        try {
            fn();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(fmt::format("strategy.{}: {}", key, e.what()));
        }
    };
    s.kind = StrategyKind::Svf;
    if (f.kind) guarded("kind", [&] { s.kind = parse_strategy_kind(*f.kind); });
    switch (s.kind) {
        case StrategyKind::Freeze: s.stages = {}; break;
        case StrategyKind::Full: s.stages = {1, 2, 3, 4}; break;
        default: s.stages = {2, 3, 4}; break;
    }
    if (f.stages && !trim(*f.stages).empty()) guarded("stages", [&] { s.stages = parse_stages(*f.stages); });
    if (f.kernels) guarded("kernels", [&] { s.kernels = parse_kernel_select(*f.kernels); });
    if (f.subspaces) guarded("subspaces", [&] { s.subspaces = parse_subspaces(*f.subspaces); });
    if (f.variant) guarded("variant", [&] { s.variant = parse_variant(*f.variant); });
    if (f.bn_trainable) s.bn_trainable = parse_bool("strategy.bn_trainable", *f.bn_trainable);
    guarded("kind", [&] { s.validate(); });
    return s;
}

void apply_override(pt::ptree& tree, const std::string& ov) {
    const auto eq = ov.find('=');
    const auto dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq)
        throw ConfigError(fmt::format("override '{}': expected section.key=value", ov));
    const std::string section = trim(ov.substr(0, dot));
    const std::string key = trim(ov.substr(dot + 1, eq - dot - 1));
    if (key.find('.') != std::string::npos) throw ConfigError(fmt::format("override '{}': key contains '.'", ov));
    auto child = tree.get_child_optional(section);
    if (!child) child = tree.add_child(section, pt::ptree());
    child->put(pt::ptree::path_type(key, '\0'), trim(ov.substr(eq + 1)));
}

void validate(const ExperimentConfig& c) {
    auto guarded = [](const char* section, auto fn) {
        try {
            fn();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(fmt::format("[{}] {}", section, e.what()));
        }
    };
    guarded("data", [&] {
        c.plan.validate();
        check_image_size(c.episodes.scene.image_size);
        if (c.episodes.shots == 0) throw std::invalid_argument("shots must be positive");
    });
    guarded("model", [&] {
        if (c.head_width == 0) throw std::invalid_argument("head_width must be positive");
    });
    guarded("pretrain", [&] {
        const auto& p = c.pretrain;
        if (!(p.lr > 0.0)) throw std::invalid_argument("lr must be positive");
        if (p.momentum < 0.0 || p.momentum >= 1.0) throw std::invalid_argument("momentum must lie in [0, 1)");
        if (p.batch == 0 || p.patches_per_class == 0 || p.holdout_per_class == 0 || p.calibration < 2)
            throw std::invalid_argument("batch, patches_per_class and holdout_per_class must be positive, calibration at least 2");
        if (p.patch_size < 16 || p.patch_size % 16 != 0 || p.patch_size > c.episodes.scene.image_size)
            throw std::invalid_argument("patch_size must be a multiple of 16 between 16 and image_size");
    });
    guarded("train", [&] { c.train.validate(); });
    guarded("eval", [&] {
        for (std::size_t k : c.eval_shots)
            if (k == 0) throw std::invalid_argument("shots must be positive");
    });
}

}  // namespace

fs::path ExperimentConfig::backbone_dir() const {
    return backbone.empty() ? output_dir / "checkpoints" / "backbone" : backbone;
}

std::uint64_t ExperimentConfig::backbone_init_seed() const { return derive_seed(seed, kStreamBackboneInit, 0); }
std::uint64_t ExperimentConfig::head_seed() const { return derive_seed(seed, kStreamHeadInit, 0); }

void ExperimentConfig::propagate_seed() {
    pretrain.seed = seed;
    train.seed = seed;
}

ExperimentConfig parse_config(std::istream& in, const std::string& origin, const std::vector<std::string>& overrides,
                              std::optional<std::uint64_t> seed) {
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(fmt::format("{}:{}: {}", origin, e.line(), e.message()));
    }
    for (const auto& ov : overrides) apply_override(tree, ov);

    ExperimentConfig cfg;
    StrategyFields strategy;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError(fmt::format("{}: key '{}' outside a section", origin, section));
        if (section == "strategy") {
            for (const auto& [key, node] : body) {
                if (!kStrategyKeys.count(key)) throw ConfigError(fmt::format("{}: unknown key 'strategy.{}'", origin, key));
                const std::string v = node.data();
                if (key == "kind") strategy.kind = v;
                else if (key == "stages") strategy.stages = v;
                else if (key == "kernels") strategy.kernels = v;
                else if (key == "subspaces") strategy.subspaces = v;
                else if (key == "variant") strategy.variant = v;
                else strategy.bn_trainable = v;
            }
            continue;
        }
        const auto sec = setters().find(section);
        if (sec == setters().end()) throw ConfigError(fmt::format("{}: unknown section '[{}]'", origin, section));
        for (const auto& [key, node] : body) {
            const auto it = sec->second.find(key);
            if (it == sec->second.end())
                throw ConfigError(fmt::format("{}: unknown key '{}.{}'", origin, section, key));
            it->second(cfg, section + "." + key, node.data());
        }
    }
    cfg.strategy = build_strategy(strategy);
    if (seed) cfg.seed = *seed;
    cfg.propagate_seed();
    validate(cfg);
    return cfg;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides,
                             std::optional<std::uint64_t> seed) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot read config file '{}'", path.string()));
    return parse_config(in, path.string(), overrides, seed);
}

std::string to_ini(const ExperimentConfig& c) {
    const auto& s = c.strategy;
    const auto& p = c.pretrain;
    const auto& t = c.train;
    std::string out;
    out += fmt::format("[experiment]\nseed = {}\noutput_dir = {}\nbackbone = {}\n\n", c.seed, c.output_dir.string(),
                       c.backbone.string());
    out += fmt::format("[data]\nnum_classes = {}\nfolds = {}\nfold = {}\nimage_size = {}\nmax_distractors = {}\nshots = {}\n\n",
                       c.plan.num_classes, c.plan.folds, c.plan.fold, c.episodes.scene.image_size,
                       c.episodes.scene.max_distractors, c.episodes.shots);
    out += fmt::format("[model]\nchannels = {}\nhead_width = {}\n\n", channels_string(c.channels), c.head_width);
    out += fmt::format(
        "[pretrain]\nepochs = {}\npatches_per_class = {}\nholdout_per_class = {}\npatch_size = {}\nbatch = {}\n"
        "calibration = {}\nlr = {}\nmomentum = {}\n\n",
        p.epochs, p.patches_per_class, p.holdout_per_class, p.patch_size, p.batch, p.calibration, p.lr, p.momentum);
    out += fmt::format("[strategy]\nkind = {}\nstages = {}\nkernels = {}\nsubspaces = {}\nvariant = {}\nbn_trainable = {}\n\n",
                       to_string(s.kind), stages_string(s.stages), to_string(s.kernels), s.subspaces.label(),
                       to_string(s.variant), s.bn_trainable ? "true" : "false");
    out += fmt::format(
        "[train]\nlr = {}\nmomentum = {}\nepochs = {}\nepisodes_per_epoch = {}\ntrain_pool = {}\nbatch = {}\n"
        "val_episodes = {}\neval_batch = {}\nprecision = {}\n\n",
        t.lr, t.momentum, t.epochs, t.episodes_per_epoch, t.train_pool, t.batch, t.val_episodes, t.eval_batch,
        t.precision == Precision::Double ? "double" : "single");
    out += fmt::format("[eval]\nshots = {}\n", list_string(c.eval_shots));
    return out;
}

}  // namespace svf
