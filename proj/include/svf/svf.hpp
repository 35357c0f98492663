#pragma once

// Singular value fine-tuning: a convolution W is folded to W' = U S V^T and
// replaced by three layers, conv_v (R x C_i x K x K, carrying stride and
// padding), a per-channel scale by the singular values, and conv_u
// (C_o x R x 1 x 1). Only the scale is meant to be trained.

#include <algorithm>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svf/autodiff.hpp"
#include "svf/strategy.hpp"
#include "svf/tensor.hpp"

namespace svf {

struct DecomposedConv {
    ad::Param conv_v;                  // (R, C_i, K, K)
    ad::Param scale;                   // (R,1,1,1): trainable s (variant A) or the frozen s (variant B)
    ad::Param conv_u;                  // (C_o, R, 1, 1)
    std::optional<ad::Param> s_prime;  // variant B only, (R,1,1,1), starts at zero
    ConvGeometry geometry;
    SvfVariant variant = SvfVariant::A;
    Dims4 original_dims{};
    /// Effective singular values at decomposition time, kept for change reports.
    std::vector<double> initial_scale;

    std::size_t rank() const { return scale.value.size(); }
    /// scale (A) or scale * exp(s_prime) (B).
    std::vector<double> effective_scale() const;
    /// The trainable singular-value param: scale (A) or s_prime (B).
    ad::Param& singular_param() { return s_prime ? *s_prime : scale; }
};

/// Rank of a folded C_o x (C_i K^2) weight.
inline std::size_t svf_rank(std::size_t c_out, std::size_t c_in, std::size_t kh, std::size_t kw) {
    return std::min(c_out, c_in * kh * kw);
}

/// Decomposes w (C_o, C_i, K_h, K_w). Params are named "<name>.conv_v", "<name>.scale",
/// "<name>.conv_u" and "<name>.s_prime"; all start frozen except the singular-value param.
DecomposedConv decompose_conv(const Tensor4& w, const ConvGeometry& g, SvfVariant variant,
                              const std::string& name = "conv");

/// conv(x, conv_v, g) -> per-channel scale -> conv(., conv_u, 1x1).
Tensor4 svf_forward(const DecomposedConv& d, const Tensor4& x);

/// unfold(U diag(effective scale) V^T) in the original (C_o, C_i, K, K) shape.
Tensor4 recompose(const DecomposedConv& d);

/// Adds the three-layer form to a graph and returns the output node.
ad::NodeId emit_svf(ad::Graph& graph, DecomposedConv& d, ad::NodeId x);

struct SvdChangeRecord {
    std::string layer;
    std::size_t position = 0;  // 1-based rank by initial value
    double initial = 0.0;
    double final = 0.0;
    double delta = 0.0;
};

/// Changes of the top_k largest initial singular values (top_k clamped to the rank).
std::vector<SvdChangeRecord> singular_value_report(const std::string& layer, std::span<const double> initial,
                                                   std::span<const double> final, std::size_t top_k = 30);
std::vector<SvdChangeRecord> singular_value_report(const std::string& layer, const DecomposedConv& before,
                                                   const DecomposedConv& after, std::size_t top_k = 30);

/// CSV with header `layer,position,initial,final,delta`, floats to 9 significant digits.
void write_svd_changes_csv(std::ostream& out, std::span<const SvdChangeRecord> records);
std::string format_sig9(double v);

/// One convolution of a backbone for parameter counting.
struct LayerShape {
    int stage = 0;  // 0 for a stem that no strategy touches
    std::size_t c_out = 0, c_in = 0, kernel = 0;

    std::size_t weights() const { return c_out * c_in * kernel * kernel; }
    std::size_t rank() const { return svf_rank(c_out, c_in, kernel, kernel); }
};

/// Trainable backbone scalars under a strategy (conv weights and SVF factors only).
std::size_t trainable_conv_scalars(std::span<const LayerShape> layers, const StrategyConfig& strategy);
/// trainable_conv_scalars / all conv weight scalars.
double trainable_param_ratio(std::span<const LayerShape> layers, const StrategyConfig& strategy);

/// Conv shapes of the standard 50-layer bottleneck residual network (stem + 4 stages, with
/// projection shortcuts), tagged by stage.
std::vector<LayerShape> resnet50_conv_shapes();

}  // namespace svf
