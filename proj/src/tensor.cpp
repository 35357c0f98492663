#include "svf/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>

#include <fmt/core.h>

#include "svf/kernels.hpp"

namespace svf {

std::string dims_string(const Dims4& d) { return fmt::format("({}, {}, {}, {})", d[0], d[1], d[2], d[3]); }

namespace {

std::size_t volume(const Dims4& d) { return d[0] * d[1] * d[2] * d[3]; }

kernels::Im2colShape im2col_shape(const Dims4& x, const ConvGeometry& g) {
    const auto [oh, ow] = g.output_size(x[2], x[3]);
    return {x[1], x[2], x[3], g.kernel_h, g.kernel_w, g.stride_h, g.stride_w, g.pad_h, g.pad_w, oh, ow};
}

void check_conv_shapes(const Dims4& x, const Dims4& w) {
    if (x[1] != w[1])
        throw ShapeError(fmt::format("conv2d: input {} has {} channels, weight {} expects {}", dims_string(x), x[1],
                                     dims_string(w), w[1]));
}

using Index = std::int64_t;

}  // namespace

Tensor4::Tensor4(const Dims4& dims, double fill) : dims_(dims), values_(volume(dims), fill) {}

Tensor4::Tensor4(const Dims4& dims, std::vector<double> values) : dims_(dims), values_(std::move(values)) {
    if (values_.size() != volume(dims_))
        throw ShapeError(fmt::format("Tensor4: {} values for dims {}", values_.size(), dims_string(dims_)));
}

Tensor4 Tensor4::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor4({n, 1, 1, 1}, std::move(values));
}

bool Tensor4::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor4::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

void Tensor4::resize_for_overwrite(const Dims4& dims) {
    dims_ = dims;
    values_.resize(volume(dims));
}

std::array<std::size_t, 2> ConvGeometry::output_size(std::size_t height, std::size_t width) const {
    if (kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0)
        throw ShapeError("ConvGeometry: kernel and stride must be positive");
    const std::size_t ph = height + 2 * pad_h;
    const std::size_t pw = width + 2 * pad_w;
    if (ph < kernel_h || pw < kernel_w)
        throw ShapeError(fmt::format("ConvGeometry: {}x{} kernel does not fit a padded {}x{} map", kernel_h, kernel_w,
                                     ph, pw));
    return {(ph - kernel_h) / stride_h + 1, (pw - kernel_w) / stride_w + 1};
}

Matrix fold_weights(const Tensor4& w) {
    const auto& d = w.dims();
    return Matrix(d[0], d[1] * d[2] * d[3], std::vector<double>(w.values().begin(), w.values().end()));
}

Tensor4 unfold_weights(const Matrix& m, const Dims4& dims) {
    if (m.rows() != dims[0] || m.cols() != dims[1] * dims[2] * dims[3])
        throw ShapeError(fmt::format("unfold_weights: {} matrix cannot hold dims {}", m.shape_string(), dims_string(dims)));
    return Tensor4(dims, std::vector<double>(m.values().begin(), m.values().end()));
}

namespace {

// A 1x1, stride-1, unpadded conv's im2col matrix is the input plane itself.
bool cols_are_input(const kernels::Im2colShape& s) {
    return s.kernel_h == 1 && s.kernel_w == 1 && s.stride_h == 1 && s.stride_w == 1 && s.pad_h == 0 && s.pad_w == 0;
}

// Per-thread im2col buffer, grown on demand and never cleared.
double* scratch(std::size_t n) {
    thread_local std::vector<double> buf;
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

}  // namespace

Tensor4 conv2d(const Tensor4& x, const Tensor4& w, const ConvGeometry& g) {
    Tensor4 y;
    conv2d_into(x, w, g, y);
    return y;
}

void conv2d_into(const Tensor4& x, const Tensor4& w, const ConvGeometry& g, Tensor4& y) {
    const Dims4& xd = x.dims();
    const Dims4& wd = w.dims();
    check_conv_shapes(xd, wd);
    if (wd[2] != g.kernel_h || wd[3] != g.kernel_w)
        throw ShapeError(fmt::format("conv2d: weight {} does not match {}x{} kernel", dims_string(wd), g.kernel_h,
                                     g.kernel_w));
    const auto s = im2col_shape(xd, g);
    y.resize_for_overwrite({xd[0], wd[0], s.out_h, s.out_w});
    const std::size_t in_plane = xd[1] * xd[2] * xd[3];
    const std::size_t out_plane = wd[0] * s.col_cols();

#pragma omp parallel for schedule(static) if (xd[0] > 1)
    for (Index n = 0; n < static_cast<Index>(xd[0]); ++n) {
        const double* in = x.data() + n * in_plane;
        std::fill_n(y.data() + n * out_plane, out_plane, 0.0);
        if (cols_are_input(s))
            kernels::gemm_nn(wd[0], s.col_cols(), s.col_rows(), w.data(), in, y.data() + n * out_plane);
        else
            kernels::conv_forward(s, wd[0], w.data(), in, y.data() + n * out_plane, scratch(kernels::conv_scratch_size(s)));
    }
}

Tensor4 conv2d_grad_input(const Tensor4& grad_out, const Tensor4& w, const ConvGeometry& g, const Dims4& x_dims) {
    const Dims4& wd = w.dims();
    check_conv_shapes(x_dims, wd);
    const auto s = im2col_shape(x_dims, g);
    Tensor4 dx(x_dims);
    const std::size_t in_plane = x_dims[1] * x_dims[2] * x_dims[3];
    const std::size_t out_plane = wd[0] * s.col_cols();

#pragma omp parallel for schedule(static) if (x_dims[0] > 1)
    for (Index n = 0; n < static_cast<Index>(x_dims[0]); ++n) {
        if (cols_are_input(s)) {
            kernels::gemm_tn(s.col_rows(), s.col_cols(), wd[0], w.data(), grad_out.data() + n * out_plane,
                             dx.data() + n * in_plane);
            continue;
        }
        double* cols = scratch(s.col_rows() * s.col_cols());
        std::fill_n(cols, s.col_rows() * s.col_cols(), 0.0);
        kernels::gemm_tn(s.col_rows(), s.col_cols(), wd[0], w.data(), grad_out.data() + n * out_plane, cols);
        kernels::col2im(s, cols, dx.data() + n * in_plane);
    }
    return dx;
}

Tensor4 conv2d_grad_weight(const Tensor4& x, const Tensor4& grad_out, const ConvGeometry& g, const Dims4& w_dims) {
    const Dims4& xd = x.dims();
    check_conv_shapes(xd, w_dims);
    const auto s = im2col_shape(xd, g);
    const std::size_t in_plane = xd[1] * xd[2] * xd[3];
    const std::size_t out_plane = w_dims[0] * s.col_cols();
    const std::size_t wsize = volume(w_dims);
    std::vector<std::vector<double>> partial(xd[0], std::vector<double>(wsize, 0.0));

#pragma omp parallel for schedule(static) if (xd[0] > 1)
    for (Index n = 0; n < static_cast<Index>(xd[0]); ++n) {
        const double* in = x.data() + n * in_plane;
        if (cols_are_input(s))
            kernels::gemm_nt(w_dims[0], s.col_rows(), s.col_cols(), grad_out.data() + n * out_plane, in, partial[n].data());
        else
            kernels::conv_grad_weight(s, w_dims[0], grad_out.data() + n * out_plane, in, partial[n].data(),
                                      scratch(kernels::conv_scratch_size(s)));
    }
    Tensor4 dw(w_dims);
    for (const auto& p : partial)
        for (std::size_t i = 0; i < wsize; ++i) dw[i] += p[i];
    return dw;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

std::uint64_t get_u(std::istream& in, int bytes) {
    unsigned char b[8] = {};
    if (!in.read(reinterpret_cast<char*>(b), bytes)) throw std::runtime_error("read_tensor: truncated stream");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor4& t) {
    out.write("SVFT", 4);
    put_u32(out, kTensorFormatVersion);
    for (std::size_t d : t.dims()) put_u64(out, d);
    for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor4 read_tensor(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "SVFT") throw std::runtime_error("read_tensor: bad magic");
    const auto version = static_cast<std::uint32_t>(get_u(in, 4));
    if (version != kTensorFormatVersion)
        throw std::runtime_error(fmt::format("read_tensor: unsupported version {}", version));
    Dims4 dims{};
    for (auto& d : dims) d = get_u(in, 8);
    const std::size_t n = volume(dims);
    if (n > (std::size_t{1} << 32)) throw std::runtime_error("read_tensor: implausible tensor size");
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(get_u(in, 8));
    return Tensor4(dims, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor4& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_tensor(out, t);
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor4 load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return read_tensor(in);
}

}  // namespace svf
