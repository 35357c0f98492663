#include "svf/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#if defined(__AVX512F__) || defined(__FMA__)
#include <immintrin.h>
#endif

namespace svf::kernels {

namespace {

using Index = std::int64_t;

inline void row_nn(std::size_t i, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
}

inline void row_tn(std::size_t i, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                   double* c) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = a[p * m + i];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
}

// Register tile of kMr rows by two vectors of columns. Every c(i, j) still receives its k
// products in ascending p order, one fused multiply-add each, exactly as in the row loops.
#if defined(__AVX512F__)
constexpr std::size_t kLanes = 8;
#else
constexpr std::size_t kLanes = 4;
#endif
using Vec = double __attribute__((vector_size(kLanes * sizeof(double))));
using VecU = double __attribute__((vector_size(kLanes * sizeof(double)), aligned(8)));
#if defined(__AVX512F__)
constexpr std::size_t kMr = 8;
#else
constexpr std::size_t kMr = 4;
#endif
constexpr std::size_t kNr = 2 * kLanes;

inline Vec loadv(const double* p) { return *reinterpret_cast<const VecU*>(p); }
inline void storev(double* p, Vec v) { *reinterpret_cast<VecU*>(p) = v; }

inline Vec fmav(Vec a, Vec b, Vec c) {
#if defined(__AVX512F__)
    return reinterpret_cast<Vec>(_mm512_fmadd_pd(reinterpret_cast<__m512d>(a), reinterpret_cast<__m512d>(b),
                                                 reinterpret_cast<__m512d>(c)));
#elif defined(__FMA__)
    return reinterpret_cast<Vec>(_mm256_fmadd_pd(reinterpret_cast<__m256d>(a), reinterpret_cast<__m256d>(b),
                                                 reinterpret_cast<__m256d>(c)));
#else
    for (std::size_t l = 0; l < kLanes; ++l) c[l] = std::fma(a[l], b[l], c[l]);
    return c;
#endif
}

template <std::size_t kMr, std::size_t kNv = 2>
inline void tile_full(std::size_t ldb, std::size_t ldc, std::size_t k, const double* a, std::size_t ars, std::size_t acs,
                      const double* b, double* c) {
    // Fully unrolled so that acc stays in registers.
    Vec acc[kMr][kNv];
#pragma GCC unroll 16
    for (std::size_t r = 0; r < kMr; ++r)
#pragma GCC unroll 2
        for (std::size_t v = 0; v < kNv; ++v) acc[r][v] = loadv(c + r * ldc + v * kLanes);
    for (std::size_t p = 0; p < k; ++p) {
        Vec bv[kNv];
#pragma GCC unroll 2
        for (std::size_t v = 0; v < kNv; ++v) bv[v] = loadv(b + p * ldb + v * kLanes);
#pragma GCC unroll 16
        for (std::size_t r = 0; r < kMr; ++r) {
            const Vec va = Vec{} + a[r * ars + p * acs];
#pragma GCC unroll 2
            for (std::size_t v = 0; v < kNv; ++v) acc[r][v] = fmav(va, bv[v], acc[r][v]);
        }
    }
#pragma GCC unroll 16
    for (std::size_t r = 0; r < kMr; ++r)
#pragma GCC unroll 2
        for (std::size_t v = 0; v < kNv; ++v) storev(c + r * ldc + v * kLanes, acc[r][v]);
}

inline void tile_edge(std::size_t rows, std::size_t cols, std::size_t ldb, std::size_t ldc, std::size_t k, const double* a,
                      std::size_t ars, std::size_t acs, const double* b, double* c) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = c[r * ldc + j];
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[r * ars + p * acs], b[p * ldb + j], acc);
            c[r * ldc + j] = acc;
        }
}

// a(i, p) = a[i * ars + p * acs]; b(p, j) = b[p * ldb + j]; c(i, j) = c[i * ldc + j].
void tiled_gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t ars, std::size_t acs,
                const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    const Index col_tiles = static_cast<Index>((n + kNr - 1) / kNr);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
    for (Index jt = 0; jt < col_tiles; ++jt) {
        const std::size_t j = static_cast<std::size_t>(jt) * kNr;
        const std::size_t cols = std::min(kNr, n - j);
        std::size_t i = 0;
        if (cols == kNr) {
            for (; i + kMr <= m; i += kMr) tile_full<kMr>(ldb, ldc, k, a + i * ars, ars, acs, b + j, c + i * ldc + j);
            for (; i + 4 <= m; i += 4) tile_full<4>(ldb, ldc, k, a + i * ars, ars, acs, b + j, c + i * ldc + j);
            if (i < m) tile_edge(m - i, cols, ldb, ldc, k, a + i * ars, ars, acs, b + j, c + i * ldc + j);
            continue;
        }
        std::size_t done = 0;
        if (cols >= kLanes) {
            for (; i + kMr <= m; i += kMr)
                tile_full<kMr, 1>(ldb, ldc, k, a + i * ars, ars, acs, b + j, c + i * ldc + j);
            for (; i + 4 <= m; i += 4) tile_full<4, 1>(ldb, ldc, k, a + i * ars, ars, acs, b + j, c + i * ldc + j);
            if (i < m) tile_edge(m - i, kLanes, ldb, ldc, k, a + i * ars, ars, acs, b + j, c + i * ldc + j);
            done = kLanes;
        }
        if (done < cols) tile_edge(m, cols - done, ldb, ldc, k, a, ars, acs, b + j + done, c + j + done);
    }
}

std::vector<double> transpose(std::size_t rows, std::size_t cols, const double* src) {
    std::vector<double> out(rows * cols);
    constexpr std::size_t kBlock = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
        for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
            const std::size_t r1 = std::min(rows, r0 + kBlock);
            const std::size_t c1 = std::min(cols, c0 + kBlock);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = src[r * cols + c];
        }
    }
    return out;
}

// Output rows [oy0, oy1) of im2col row `row`, written contiguously to `out`.
inline void im2col_row_range(const Im2colShape& s, std::size_t row, std::size_t oy0, std::size_t oy1, const double* img,
                             double* out) {
    const std::size_t kj = row % s.kernel_w;
    const std::size_t ki = (row / s.kernel_w) % s.kernel_h;
    const std::size_t ch = row / (s.kernel_w * s.kernel_h);
    const double* plane = img + ch * s.height * s.width;
    // Valid output columns [lo, hi): 0 <= ox * stride + kj - pad < width.
    const Index off = static_cast<Index>(kj) - static_cast<Index>(s.pad_w);
    const Index st = static_cast<Index>(s.stride_w);
    const Index w = static_cast<Index>(s.width);
    const Index out_w = static_cast<Index>(s.out_w);
    const Index lo = std::min(out_w, off >= 0 ? 0 : (-off + st - 1) / st);
    const Index hi = std::max(lo, std::min(out_w, w - off <= 0 ? 0 : (w - off + st - 1) / st));
    for (std::size_t oy = oy0; oy < oy1; ++oy) {
        const Index y = static_cast<Index>(oy * s.stride_h + ki) - static_cast<Index>(s.pad_h);
        double* orow = out + (oy - oy0) * s.out_w;
        if (y < 0 || y >= static_cast<Index>(s.height)) {
            std::fill(orow, orow + s.out_w, 0.0);
            continue;
        }
        const double* irow = plane + static_cast<std::size_t>(y) * s.width;
        std::fill(orow, orow + lo, 0.0);
        if (st == 1) {
            std::copy(irow + lo + off, irow + hi + off, orow + lo);
        } else {
            for (Index ox = lo; ox < hi; ++ox) orow[ox] = irow[ox * st + off];
        }
        std::fill(orow + hi, orow + out_w, 0.0);
    }
}

inline void im2col_row(const Im2colShape& s, std::size_t row, const double* img, double* cols) {
    im2col_row_range(s, row, 0, s.out_h, img, cols + row * s.col_cols());
}

// Accumulates into one input channel plane from all kernel rows of that channel,
// in fixed (ki, kj, oy, ox) order.
inline void col2im_channel(const Im2colShape& s, std::size_t ch, const double* cols, double* img) {
    double* plane = img + ch * s.height * s.width;
    for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
        for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
            const std::size_t row = (ch * s.kernel_h + ki) * s.kernel_w + kj;
            const double* in = cols + row * s.col_cols();
            const Index off = static_cast<Index>(kj) - static_cast<Index>(s.pad_w);
            const Index st = static_cast<Index>(s.stride_w);
            const Index w = static_cast<Index>(s.width);
            const Index out_w = static_cast<Index>(s.out_w);
            const Index lo = std::min(out_w, off >= 0 ? 0 : (-off + st - 1) / st);
            const Index hi = std::max(lo, std::min(out_w, w - off <= 0 ? 0 : (w - off + st - 1) / st));
            for (std::size_t oy = 0; oy < s.out_h; ++oy) {
                const Index y = static_cast<Index>(oy * s.stride_h + ki) - static_cast<Index>(s.pad_h);
                if (y < 0 || y >= static_cast<Index>(s.height)) continue;
                double* prow = plane + static_cast<std::size_t>(y) * s.width;
                const double* irow = in + oy * s.out_w;
                if (st == 1) {
                    for (Index ox = lo; ox < hi; ++ox) prow[ox + off] += irow[ox];
                } else {
                    for (Index ox = lo; ox < hi; ++ox) prow[ox * st + off] += irow[ox];
                }
            }
        }
    }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    tiled_gemm(m, n, k, a, k, 1, b, n, c, n);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    tiled_gemm(m, n, k, a, 1, m, b, n, c, n);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    const std::vector<double> bt = transpose(n, k, b);
    gemm_nn(m, n, k, a, bt.data(), c);
}

void im2col(const Im2colShape& s, const double* img, double* cols) {
#pragma omp parallel for schedule(static) if (s.col_rows() * s.col_cols() > 65536)
    for (Index r = 0; r < static_cast<Index>(s.col_rows()); ++r) im2col_row(s, static_cast<std::size_t>(r), img, cols);
}

void col2im(const Im2colShape& s, const double* cols, double* img) {
#pragma omp parallel for schedule(static) if (s.col_rows() * s.col_cols() > 65536)
    for (Index ch = 0; ch < static_cast<Index>(s.channels); ++ch)
        col2im_channel(s, static_cast<std::size_t>(ch), cols, img);
}

std::size_t conv_block_rows(const Im2colShape& s) {
    // At most 64k doubles of im2col per block, in whole multiples of the tile width when possible.
    const std::size_t per_row = std::max<std::size_t>(s.col_rows() * s.out_w, 1);
    std::size_t rows = std::clamp<std::size_t>(65536 / per_row, 1, s.out_h);
    const std::size_t align = kNr / std::gcd(s.out_w == 0 ? kNr : s.out_w, kNr);
    if (rows < s.out_h && rows >= align) rows -= rows % align;
    return rows;
}

void conv_forward(const Im2colShape& s, std::size_t c_out, const double* w, const double* img, double* out,
                  double* scratch) {
    const std::size_t rows = conv_block_rows(s);
    const std::size_t hw = s.col_cols();
    for (std::size_t oy0 = 0; oy0 < s.out_h; oy0 += rows) {
        const std::size_t oy1 = std::min(s.out_h, oy0 + rows);
        const std::size_t nb = (oy1 - oy0) * s.out_w;
        for (std::size_t r = 0; r < s.col_rows(); ++r) im2col_row_range(s, r, oy0, oy1, img, scratch + r * nb);
        tiled_gemm(c_out, nb, s.col_rows(), w, s.col_rows(), 1, scratch, nb, out + oy0 * s.out_w, hw);
    }
}

void conv_grad_weight(const Im2colShape& s, std::size_t c_out, const double* grad_out, const double* img, double* dw,
                      double* scratch) {
    const std::size_t rows = conv_block_rows(s);
    const std::size_t hw = s.col_cols();
    const std::size_t kr = s.col_rows();
    for (std::size_t oy0 = 0; oy0 < s.out_h; oy0 += rows) {
        const std::size_t oy1 = std::min(s.out_h, oy0 + rows);
        const std::size_t nb = (oy1 - oy0) * s.out_w;
        // scratch holds the block transposed: (nb x kr), so dW += G_block * scratch.
        double* block = scratch + kr * nb;
        for (std::size_t r = 0; r < kr; ++r) im2col_row_range(s, r, oy0, oy1, img, block + r * nb);
        for (std::size_t r = 0; r < kr; ++r)
            for (std::size_t q = 0; q < nb; ++q) scratch[q * kr + r] = block[r * nb + q];
        tiled_gemm(c_out, kr, nb, grad_out + oy0 * s.out_w, hw, 1, scratch, kr, dw, kr);
    }
}

namespace reference {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) row_nn(i, n, k, a, b, c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) row_tn(i, m, n, k, a, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] = std::fma(av, b[j * k + p], c[i * n + j]);
        }
    }
}

void im2col(const Im2colShape& s, const double* img, double* cols) {
    for (std::size_t r = 0; r < s.col_rows(); ++r) im2col_row(s, r, img, cols);
}

void col2im(const Im2colShape& s, const double* cols, double* img) {
    for (std::size_t ch = 0; ch < s.channels; ++ch) col2im_channel(s, ch, cols, img);
}

void conv_forward(const Im2colShape& s, std::size_t c_out, const double* w, const double* img, double* out) {
    std::vector<double> cols(s.col_rows() * s.col_cols());
    reference::im2col(s, img, cols.data());
    reference::gemm_nn(c_out, s.col_cols(), s.col_rows(), w, cols.data(), out);
}

void conv_grad_weight(const Im2colShape& s, std::size_t c_out, const double* grad_out, const double* img, double* dw) {
    std::vector<double> cols(s.col_rows() * s.col_cols());
    reference::im2col(s, img, cols.data());
    reference::gemm_nt(c_out, s.col_rows(), s.col_cols(), grad_out, cols.data(), dw);
}

}  // namespace reference

}  // namespace svf::kernels
