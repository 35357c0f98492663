#pragma once

// Independent brute-force references used by the test suites. Nothing here
// calls into the kernels it is meant to check.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "svf/linalg.hpp"
#include "svf/tensor.hpp"

namespace oracle {

inline svf::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    svf::Matrix m(rows, cols);
    for (double& v : m.values()) v = dist(rng);
    return m;
}

inline svf::Tensor4 random_tensor(const svf::Dims4& dims, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    svf::Tensor4 t(dims);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

inline svf::Matrix naive_matmul(const svf::Matrix& a, const svf::Matrix& b) {
    svf::Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

/// Direct 7-loop cross-correlation with zero padding.
inline svf::Tensor4 naive_conv2d(const svf::Tensor4& x, const svf::Tensor4& w, const svf::ConvGeometry& g) {
    const auto& xd = x.dims();
    const auto& wd = w.dims();
    const std::size_t oh = (xd[2] + 2 * g.pad_h - g.kernel_h) / g.stride_h + 1;
    const std::size_t ow = (xd[3] + 2 * g.pad_w - g.kernel_w) / g.stride_w + 1;
    svf::Tensor4 y({xd[0], wd[0], oh, ow});
    for (std::size_t n = 0; n < xd[0]; ++n)
        for (std::size_t co = 0; co < wd[0]; ++co)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double s = 0.0;
                    for (std::size_t ci = 0; ci < wd[1]; ++ci)
                        for (std::size_t ky = 0; ky < wd[2]; ++ky)
                            for (std::size_t kx = 0; kx < wd[3]; ++kx) {
                                const long iy = static_cast<long>(oy * g.stride_h + ky) - static_cast<long>(g.pad_h);
                                const long ix = static_cast<long>(ox * g.stride_w + kx) - static_cast<long>(g.pad_w);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xd[2]) || ix >= static_cast<long>(xd[3]))
                                    continue;
                                s += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    y.at(n, co, oy, ox) = s;
                }
    return y;
}

inline double max_abs_diff(const svf::Tensor4& a, const svf::Tensor4& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs(const svf::Tensor4& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

inline double rel_frobenius(const svf::Tensor4& a, const svf::Tensor4& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(1.0, std::sqrt(den));
}

}  // namespace oracle
