#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "svf/linalg.hpp"

namespace svf {

using Dims4 = std::array<std::size_t, 4>;

std::string dims_string(const Dims4& d);

/// Dense 4-D tensor of doubles in lexicographic (d0, d1, d2, d3) order.
/// Weights are (C_o, C_i, K_h, K_w); feature maps are (N, C, H, W).
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(const Dims4& dims, double fill = 0.0);
    Tensor4(const Dims4& dims, std::vector<double> values);

    /// (n, 1, 1, 1) tensor holding a plain vector.
    static Tensor4 vector(std::vector<double> values);

    const Dims4& dims() const noexcept { return dims_; }
    std::size_t dim(std::size_t i) const { return dims_[i]; }
    std::size_t size() const noexcept { return values_.size(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return values_[((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d];
    }
    double at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return values_[((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d];
    }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    bool all_finite() const;
    void fill(double v);
    /// Sets dims and keeps the allocation when the volume is unchanged. Values are unspecified
    /// afterwards; callers overwrite every element.
    void resize_for_overwrite(const Dims4& dims);

    bool operator==(const Tensor4&) const = default;

private:
    Dims4 dims_{0, 0, 0, 0};
    std::vector<double> values_;
};

/// Kernel, stride and zero padding of a 2-D convolution.
struct ConvGeometry {
    std::size_t kernel_h = 1, kernel_w = 1;
    std::size_t stride_h = 1, stride_w = 1;
    std::size_t pad_h = 0, pad_w = 0;

    static ConvGeometry square(std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0) {
        return {kernel, kernel, stride, stride, pad, pad};
    }

    /// Output spatial size, floor((H + 2p - K) / s) + 1 per axis; throws ShapeError when the
    /// padded map is smaller than the kernel.
    std::array<std::size_t, 2> output_size(std::size_t height, std::size_t width) const;

    bool operator==(const ConvGeometry&) const = default;
};

/// (C_o, C_i, K_h, K_w) -> C_o x (C_i K_h K_w); column index runs over (ci, kh, kw).
Matrix fold_weights(const Tensor4& w);
/// Exact inverse of fold_weights.
Tensor4 unfold_weights(const Matrix& m, const Dims4& dims);

/// Cross-correlation with zero padding via im2col + GEMM. x is (N, C_i, H, W).
Tensor4 conv2d(const Tensor4& x, const Tensor4& w, const ConvGeometry& g);
/// conv2d writing into y, reusing its storage when the output volume matches.
void conv2d_into(const Tensor4& x, const Tensor4& w, const ConvGeometry& g, Tensor4& y);

/// Gradient of conv2d with respect to its input, given the output gradient.
Tensor4 conv2d_grad_input(const Tensor4& grad_out, const Tensor4& w, const ConvGeometry& g, const Dims4& x_dims);
/// Gradient of conv2d with respect to the weight. Batch partials are summed in image order.
Tensor4 conv2d_grad_weight(const Tensor4& x, const Tensor4& grad_out, const ConvGeometry& g, const Dims4& w_dims);

// Binary tensor format: "SVFT", u32 version, 4 x u64 dims, then float64 values; little-endian.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor4& t);
Tensor4 read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor4& t);
Tensor4 load_tensor(const std::filesystem::path& path);

}  // namespace svf
