#include "svf/svf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <fmt/core.h>

namespace svf {

std::vector<double> DecomposedConv::effective_scale() const {
    std::vector<double> out(scale.value.values().begin(), scale.value.values().end());
    if (s_prime)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= std::exp(s_prime->value[i]);
    return out;
}

DecomposedConv decompose_conv(const Tensor4& w, const ConvGeometry& g, SvfVariant variant, const std::string& name) {
    const Dims4& wd = w.dims();
    if (wd[2] != g.kernel_h || wd[3] != g.kernel_w)
        throw ShapeError(fmt::format("decompose_conv: weight {} does not match {}x{} kernel", dims_string(wd), g.kernel_h,
                                     g.kernel_w));
    const SvdFactors f = svd(fold_weights(w));
    const std::size_t r = f.rank();

    DecomposedConv d;
    d.geometry = g;
    d.variant = variant;
    d.original_dims = wd;
    d.conv_v = ad::Param(name + ".conv_v", unfold_weights(f.vt, {r, wd[1], wd[2], wd[3]}));
    d.conv_u = ad::Param(name + ".conv_u", Tensor4({wd[0], r, 1, 1}, std::vector<double>(f.u.values().begin(), f.u.values().end())));
    d.scale = ad::Param(name + ".scale", Tensor4::vector(f.s), variant == SvfVariant::A);
    if (variant == SvfVariant::B)
        d.s_prime = ad::Param(name + ".s_prime", Tensor4::vector(std::vector<double>(r, 0.0)), true);
    d.initial_scale = d.effective_scale();
    return d;
}

Tensor4 svf_forward(const DecomposedConv& d, const Tensor4& x) {
    Tensor4 y = conv2d(x, d.conv_v.value, d.geometry);
    const std::vector<double> s = d.effective_scale();
    const Dims4& yd = y.dims();
    const std::size_t hw = yd[2] * yd[3];
    for (std::size_t b = 0; b < yd[0]; ++b)
        for (std::size_t c = 0; c < yd[1]; ++c) {
            double* p = y.data() + (b * yd[1] + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] *= s[c];
        }
    return conv2d(y, d.conv_u.value, ConvGeometry::square(1));
}

Tensor4 recompose(const DecomposedConv& d) {
    const std::size_t r = d.rank();
    const Dims4& od = d.original_dims;
    Matrix us(od[0], r, std::vector<double>(d.conv_u.value.values().begin(), d.conv_u.value.values().end()));
    const std::vector<double> s = d.effective_scale();
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < r; ++j) us(i, j) *= s[j];
    return unfold_weights(matmul(us, fold_weights(d.conv_v.value)), od);
}

ad::NodeId emit_svf(ad::Graph& graph, DecomposedConv& d, ad::NodeId x) {
    ad::NodeId y = graph.conv2d(x, graph.param(d.conv_v), d.geometry);
    ad::NodeId s = graph.param(d.scale);
    if (d.s_prime) s = graph.mul(s, graph.exp(graph.param(*d.s_prime)));
    y = graph.diag_scale(y, s);
    return graph.conv2d(y, graph.param(d.conv_u), ConvGeometry::square(1));
}

std::vector<SvdChangeRecord> singular_value_report(const std::string& layer, std::span<const double> initial,
                                                   std::span<const double> final, std::size_t top_k) {
    if (initial.size() != final.size())
        throw ShapeError(fmt::format("singular_value_report: rank {} before vs {} after", initial.size(), final.size()));
    std::vector<std::size_t> order(initial.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return initial[a] > initial[b]; });
    const std::size_t n = std::min(top_k, order.size());
    std::vector<SvdChangeRecord> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = order[k];
        out.push_back({layer, k + 1, initial[i], final[i], final[i] - initial[i]});
    }
    return out;
}

std::vector<SvdChangeRecord> singular_value_report(const std::string& layer, const DecomposedConv& before,
                                                   const DecomposedConv& after, std::size_t top_k) {
    const auto b = before.effective_scale();
    const auto a = after.effective_scale();
    return singular_value_report(layer, b, a, top_k);
}

std::string format_sig9(double v) { return fmt::format("{:.9g}", v); }

void write_svd_changes_csv(std::ostream& out, std::span<const SvdChangeRecord> records) {
    out << "layer,position,initial,final,delta\n";
    for (const auto& r : records)
        out << r.layer << ',' << r.position << ',' << format_sig9(r.initial) << ',' << format_sig9(r.final) << ','
            << format_sig9(r.delta) << '\n';
}

std::size_t trainable_conv_scalars(std::span<const LayerShape> layers, const StrategyConfig& strategy) {
    strategy.validate();
    std::size_t total = 0;
    for (const LayerShape& l : layers) {
        if (l.stage < 1 || !strategy.selects(l.stage, l.kernel)) continue;
        if (strategy.kind != StrategyKind::Svf) {
            total += l.weights();
            continue;
        }
        const std::size_t r = l.rank();
        if (strategy.subspaces.u) total += l.c_out * r;
        if (strategy.subspaces.s) total += r;
        if (strategy.subspaces.v) total += r * l.c_in * l.kernel * l.kernel;
    }
    return total;
}

double trainable_param_ratio(std::span<const LayerShape> layers, const StrategyConfig& strategy) {
    if (layers.empty()) throw std::invalid_argument("trainable_param_ratio: empty layer list");
    std::size_t all = 0;
    for (const LayerShape& l : layers) all += l.weights();
    return static_cast<double>(trainable_conv_scalars(layers, strategy)) / static_cast<double>(all);
}

std::vector<LayerShape> resnet50_conv_shapes() {
    std::vector<LayerShape> out;
    out.push_back({0, 64, 3, 7});
    std::size_t in = 64;
    const std::size_t widths[4] = {64, 128, 256, 512};
    const int blocks[4] = {3, 4, 6, 3};
    for (int stage = 1; stage <= 4; ++stage) {
        const std::size_t w = widths[stage - 1];
        for (int b = 0; b < blocks[stage - 1]; ++b) {
            out.push_back({stage, w, in, 1});
            out.push_back({stage, w, w, 3});
            out.push_back({stage, 4 * w, w, 1});
            if (b == 0) out.push_back({stage, 4 * w, in, 1});
            in = 4 * w;
        }
    }
    return out;
}

}  // namespace svf
