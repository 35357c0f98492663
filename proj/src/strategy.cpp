#include "svf/strategy.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

namespace svf {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string Subspaces::label() const {
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += '+';
        out += name;
    };
    add(u, "U");
    add(s, "S");
    add(v, "V");
    return out;
}

StrategyConfig StrategyConfig::freeze() {
    StrategyConfig c;
    c.kind = StrategyKind::Freeze;
    return c;
}

StrategyConfig StrategyConfig::full() {
    StrategyConfig c;
    c.kind = StrategyKind::Full;
    c.stages = {1, 2, 3, 4};
    return c;
}

StrategyConfig StrategyConfig::layers(std::set<int> stages) {
    StrategyConfig c;
    c.kind = StrategyKind::LayerSubset;
    c.stages = std::move(stages);
    return c;
}

StrategyConfig StrategyConfig::conv_kind(KernelSelect k, std::set<int> stages) {
    StrategyConfig c;
    c.kind = StrategyKind::ConvKind;
    c.kernels = k;
    c.stages = std::move(stages);
    return c;
}

StrategyConfig StrategyConfig::svf(Subspaces s, std::set<int> stages, SvfVariant v) {
    StrategyConfig c;
    c.kind = StrategyKind::Svf;
    c.subspaces = s;
    c.stages = std::move(stages);
    c.variant = v;
    return c;
}

void StrategyConfig::validate() const {
    for (int s : stages)
        if (s < 1 || s > 4) throw std::invalid_argument("strategy: stage " + std::to_string(s) + " outside 1..4");
    if (kind == StrategyKind::Svf && subspaces.empty())
        throw std::invalid_argument("strategy: SVF needs at least one of U, S, V");
    if (kind == StrategyKind::Full && stages != std::set<int>{1, 2, 3, 4})
        throw std::invalid_argument("strategy: full fine-tuning always covers stages 1-4");
}

bool StrategyConfig::selects(int stage, std::size_t kernel) const {
    switch (kind) {
        case StrategyKind::Freeze:
            return false;
        case StrategyKind::Full:
            return true;
        case StrategyKind::LayerSubset:
        case StrategyKind::Svf:
            return stages.count(stage) > 0;
        case StrategyKind::ConvKind:
            if (!stages.count(stage)) return false;
            if (kernels == KernelSelect::Both) return true;
            return (kernels == KernelSelect::Conv3x3) == (kernel == 3);
    }
    return false;
}

std::string StrategyConfig::label() const {
    std::string out;
    switch (kind) {
        case StrategyKind::Freeze: out = "freeze"; break;
        case StrategyKind::Full: out = "full"; break;
        case StrategyKind::LayerSubset: out = "layers-" + stages_string(stages); break;
        case StrategyKind::ConvKind: out = "convkind-" + to_string(kernels) + "-" + stages_string(stages); break;
        case StrategyKind::Svf:
            out = "svf-" + subspaces.label() + "-" + stages_string(stages);
            if (variant == SvfVariant::B) out += "-B";
            break;
    }
    std::erase(out, ',');
    if (bn_trainable) out += "+bn";
    return out;
}

StrategyKind parse_strategy_kind(const std::string& raw) {
    const std::string s = lower(trim(raw));
    if (s == "freeze") return StrategyKind::Freeze;
    if (s == "full") return StrategyKind::Full;
    if (s == "layers") return StrategyKind::LayerSubset;
    if (s == "convkind") return StrategyKind::ConvKind;
    if (s == "svf") return StrategyKind::Svf;
    throw std::invalid_argument("unknown strategy kind '" + raw + "' (freeze|full|layers|convkind|svf)");
}

KernelSelect parse_kernel_select(const std::string& raw) {
    const std::string s = lower(trim(raw));
    if (s == "3x3") return KernelSelect::Conv3x3;
    if (s == "1x1") return KernelSelect::Conv1x1;
    if (s == "both") return KernelSelect::Both;
    throw std::invalid_argument("unknown conv kind '" + raw + "' (3x3|1x1|both)");
}

Subspaces parse_subspaces(const std::string& raw) {
    Subspaces out{false, false, false};
    std::string spaced = raw;
    std::replace(spaced.begin(), spaced.end(), '+', ',');
    std::stringstream ss(spaced);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = lower(trim(item));
        if (item == "u") out.u = true;
        else if (item == "s") out.s = true;
        else if (item == "v") out.v = true;
        else if (!item.empty()) throw std::invalid_argument("unknown subspace '" + item + "' (U, S, V)");
    }
    return out;
}

SvfVariant parse_variant(const std::string& raw) {
    const std::string s = lower(trim(raw));
    if (s == "a") return SvfVariant::A;
    if (s == "b") return SvfVariant::B;
    throw std::invalid_argument("unknown SVF variant '" + raw + "' (A|B)");
}

std::set<int> parse_stages(const std::string& raw) {
    std::set<int> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw std::invalid_argument("bad stage '" + item + "'");
        out.insert(v);
    }
    return out;
}

std::string to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::Freeze: return "freeze";
        case StrategyKind::Full: return "full";
        case StrategyKind::LayerSubset: return "layers";
        case StrategyKind::ConvKind: return "convkind";
        case StrategyKind::Svf: return "svf";
    }
    return "?";
}

std::string to_string(KernelSelect k) {
    switch (k) {
        case KernelSelect::Conv3x3: return "3x3";
        case KernelSelect::Conv1x1: return "1x1";
        case KernelSelect::Both: return "both";
    }
    return "?";
}

std::string to_string(SvfVariant v) { return v == SvfVariant::A ? "A" : "B"; }

std::string stages_string(const std::set<int>& stages) {
    std::string out;
    for (int s : stages) {
        if (!out.empty()) out += ',';
        out += std::to_string(s);
    }
    return out;
}

}  // namespace svf
