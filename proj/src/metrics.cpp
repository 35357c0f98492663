#include "svf/metrics.hpp"

#include <ostream>
#include <stdexcept>

#include <fmt/core.h>

namespace svf {

namespace {

double ratio(const Counts& c, const char* what) {
    if (c.denominator() == 0) throw std::domain_error(fmt::format("{}: IoU undefined, no pixels counted", what));
    return static_cast<double>(c.tp) / static_cast<double>(c.denominator());
}

void check_same(const BinaryMask& a, const BinaryMask& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError(fmt::format("metrics: mask {}x{} vs {}x{}", a.height, a.width, b.height, b.width));
}

}  // namespace

BinaryMask::BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b) : height(h), width(w), bits(std::move(b)) {
    if (bits.size() != h * w) throw ShapeError(fmt::format("BinaryMask: {} bits for {}x{}", bits.size(), h, w));
    for (auto v : bits)
        if (v > 1) throw std::invalid_argument("BinaryMask: entries must be 0 or 1");
}

BinaryMask BinaryMask::from_tensor(const Tensor4& t, std::size_t n) {
    const auto& d = t.dims();
    if (d[1] != 1 || n >= d[0]) throw ShapeError("BinaryMask: expected (N, 1, H, W) mask, got " + dims_string(d));
    std::vector<std::uint8_t> bits(d[2] * d[3]);
    for (std::size_t i = 0; i < bits.size(); ++i) {
        const double v = t[n * bits.size() + i];
        if (v != 0.0 && v != 1.0) throw std::invalid_argument(fmt::format("BinaryMask: non-binary value {}", v));
        bits[i] = v == 1.0 ? 1 : 0;
    }
    return BinaryMask(d[2], d[3], std::move(bits));
}

BinaryMask BinaryMask::from_logits(const Tensor4& logits, std::size_t n) {
    const auto& d = logits.dims();
    if (d[1] != 2 || n >= d[0]) throw ShapeError("BinaryMask: expected (N, 2, H, W) logits, got " + dims_string(d));
    const std::size_t hw = d[2] * d[3];
    std::vector<std::uint8_t> bits(hw);
    const double* bg = logits.data() + n * 2 * hw;
    const double* fg = bg + hw;
    for (std::size_t i = 0; i < hw; ++i) bits[i] = fg[i] > bg[i] ? 1 : 0;
    return BinaryMask(d[2], d[3], std::move(bits));
}

Counts& Counts::operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
}

Counts count_pixels(const BinaryMask& pred, const BinaryMask& gt) {
    check_same(pred, gt);
    Counts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.bits[i], g = gt.bits[i];
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

void ConfusionTally::merge(const ConfusionTally& other) {
    for (const auto& [cls, c] : other.per_class) per_class[cls] += c;
}

void accumulate(ConfusionTally& tally, const BinaryMask& pred, const BinaryMask& gt, int class_id) {
    tally.per_class[class_id] += count_pixels(pred, gt);
}

double miou(const ConfusionTally& tally, std::span<const int> classes) {
    if (classes.empty()) throw std::invalid_argument("miou: empty class set");
    double sum = 0.0;
    for (int cls : classes) {
        auto it = tally.per_class.find(cls);
        if (it == tally.per_class.end()) throw std::domain_error(fmt::format("miou: class {} never evaluated", cls));
        sum += ratio(it->second, "miou");
    }
    return sum / static_cast<double>(classes.size());
}

double miou(const ConfusionTally& tally) {
    std::vector<int> classes;
    for (const auto& [cls, c] : tally.per_class) classes.push_back(cls);
    return miou(tally, classes);
}

void FbTally::merge(const FbTally& other) {
    foreground += other.foreground;
    background += other.background;
}

void accumulate(FbTally& tally, const BinaryMask& pred, const BinaryMask& gt) {
    check_same(pred, gt);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.bits[i], g = gt.bits[i];
        tally.foreground.tp += p && g;
        tally.foreground.fp += p && !g;
        tally.foreground.fn += !p && g;
        tally.background.tp += !p && !g;
        tally.background.fp += !p && g;
        tally.background.fn += p && !g;
    }
}

double fb_iou(const FbTally& tally) {
    return 0.5 * (ratio(tally.foreground, "fb_iou foreground") + ratio(tally.background, "fb_iou background"));
}

void write_results_csv(std::ostream& out, std::span<const ResultRow> rows) {
    out << "fold,strategy,k,miou,fb_iou\n";
    for (const auto& r : rows) {
        if (r.strategy.find_first_of(",\n\"") != std::string::npos)
            throw std::invalid_argument("results csv: strategy label '" + r.strategy + "' needs quoting");
        out << fmt::format("{},{},{},{:.4f},{:.4f}\n", r.fold, r.strategy, r.k, r.miou, r.fb_iou);
    }
}

}  // namespace svf
