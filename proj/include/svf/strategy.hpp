#pragma once

#include <cstddef>
#include <set>
#include <string>

namespace svf {

enum class SvfVariant {
    A,  // the singular values themselves are trainable
    B,  // frozen singular values times exp(s'), with trainable s' starting at zero
};

enum class StrategyKind { Freeze, Full, LayerSubset, ConvKind, Svf };

enum class KernelSelect { Conv3x3, Conv1x1, Both };

struct Subspaces {
    bool u = false;
    bool s = true;
    bool v = false;

    bool empty() const { return !u && !s && !v; }
    std::string label() const;  // e.g. "U+S"
    bool operator==(const Subspaces&) const = default;
};

/// Which backbone parameters are fine-tuned.
struct StrategyConfig {
    StrategyKind kind = StrategyKind::Svf;
    std::set<int> stages{2, 3, 4};
    KernelSelect kernels = KernelSelect::Both;
    Subspaces subspaces{};
    SvfVariant variant = SvfVariant::A;
    bool bn_trainable = false;

    static StrategyConfig freeze();
    static StrategyConfig full();
    static StrategyConfig layers(std::set<int> stages);
    static StrategyConfig conv_kind(KernelSelect k, std::set<int> stages = {2, 3, 4});
    static StrategyConfig svf(Subspaces s = {}, std::set<int> stages = {2, 3, 4}, SvfVariant v = SvfVariant::A);

    /// Throws std::invalid_argument on an empty SVF subspace set or a stage outside 1..4.
    void validate() const;

    /// True when a conv of this stage and kernel size is fine-tuned (plain) or decomposed (SVF).
    bool selects(int stage, std::size_t kernel) const;
    bool decomposes(int stage, std::size_t kernel) const { return kind == StrategyKind::Svf && selects(stage, kernel); }

    /// Short stable label used in result files, e.g. "svf-S-234" or "freeze+bn".
    std::string label() const;

    bool operator==(const StrategyConfig&) const = default;
};

StrategyKind parse_strategy_kind(const std::string& s);
KernelSelect parse_kernel_select(const std::string& s);
Subspaces parse_subspaces(const std::string& s);
SvfVariant parse_variant(const std::string& s);
std::set<int> parse_stages(const std::string& s);

std::string to_string(StrategyKind k);
std::string to_string(KernelSelect k);
std::string to_string(SvfVariant v);
std::string stages_string(const std::set<int>& stages);  // "2,3,4"

}  // namespace svf
