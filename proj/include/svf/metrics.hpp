#pragma once

// Pixel-count segmentation metrics. Counts are pooled over every accumulated
// mask before any ratio is taken.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "svf/tensor.hpp"

namespace svf {

struct BinaryMask {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> bits;  // row-major, 0 or 1

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b);
    /// Sample n of an (N, 1, H, W) tensor; entries must be exactly 0 or 1.
    static BinaryMask from_tensor(const Tensor4& t, std::size_t n = 0);
    /// Per-pixel argmax of sample n of (N, 2, H, W) logits; ties go to background.
    static BinaryMask from_logits(const Tensor4& logits, std::size_t n = 0);
    std::size_t size() const { return bits.size(); }
    bool operator==(const BinaryMask&) const = default;
};

struct Counts {
    std::uint64_t tp = 0, fp = 0, fn = 0;

    std::uint64_t denominator() const { return tp + fp + fn; }
    Counts& operator+=(const Counts& o);
    bool operator==(const Counts&) const = default;
};

Counts count_pixels(const BinaryMask& pred, const BinaryMask& gt);

struct ConfusionTally {
    std::map<int, Counts> per_class;

    void merge(const ConfusionTally& other);
    bool operator==(const ConfusionTally&) const = default;
};

void accumulate(ConfusionTally& tally, const BinaryMask& pred, const BinaryMask& gt, int class_id);

/// Mean over `classes` of TP / (TP + FP + FN); throws when a class has no pixels counted.
double miou(const ConfusionTally& tally, std::span<const int> classes);
/// Mean over every class present in the tally.
double miou(const ConfusionTally& tally);

/// Foreground and background counts pooled over episodes, ignoring class identity.
struct FbTally {
    Counts foreground, background;

    void merge(const FbTally& other);
    bool operator==(const FbTally&) const = default;
};

void accumulate(FbTally& tally, const BinaryMask& pred, const BinaryMask& gt);
double fb_iou(const FbTally& tally);

struct ResultRow {
    std::size_t fold = 0;
    std::string strategy;
    std::size_t k = 1;
    double miou = 0.0;
    double fb_iou = 0.0;
};

/// `fold,strategy,k,miou,fb_iou` with 4 decimals.
void write_results_csv(std::ostream& out, std::span<const ResultRow> rows);

}  // namespace svf
