#pragma once

// Dense inner loops shared by the matrix and convolution code.
//
// Every kernel has a parallel version (OpenMP over output rows or images) and
// a serial twin in `kernels::reference`. Both accumulate each output element in
// the same order, so their results are bit-identical for any thread count.

#include <cstddef>

namespace svf::kernels {

struct Im2colShape {
    std::size_t channels;
    std::size_t height, width;
    std::size_t kernel_h, kernel_w;
    std::size_t stride_h, stride_w;
    std::size_t pad_h, pad_w;
    std::size_t out_h, out_w;

    std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
    std::size_t col_cols() const { return out_h * out_w; }
};

// C[M x N] += A[M x K] * B[K x N]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[M x N] += A[K x M]^T * B[K x N]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[M x N] += A[M x K] * B[N x K]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = img[c][oy*sh + i - ph][ox*sw + j - pw], zero outside.
void im2col(const Im2colShape& s, const double* img, double* cols);
// Adjoint of im2col: img += scatter(cols).
void col2im(const Im2colShape& s, const double* cols, double* img);

// One image: out[c_out x out_h*out_w] += w[c_out x col_rows] * im2col(img), in blocks of
// output rows. `scratch` holds conv_scratch_size(s) doubles.
void conv_forward(const Im2colShape& s, std::size_t c_out, const double* w, const double* img, double* out,
                  double* scratch);
// One image: dw[c_out x col_rows] += grad_out[c_out x out_h*out_w] * im2col(img)^T.
void conv_grad_weight(const Im2colShape& s, std::size_t c_out, const double* grad_out, const double* img, double* dw,
                      double* scratch);
std::size_t conv_block_rows(const Im2colShape& s);
inline std::size_t conv_scratch_size(const Im2colShape& s) {
    return 2 * s.col_rows() * conv_block_rows(s) * s.out_w;
}

namespace reference {
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void im2col(const Im2colShape& s, const double* img, double* cols);
void col2im(const Im2colShape& s, const double* cols, double* img);
void conv_forward(const Im2colShape& s, std::size_t c_out, const double* w, const double* img, double* out);
void conv_grad_weight(const Im2colShape& s, std::size_t c_out, const double* grad_out, const double* img, double* dw);
}  // namespace reference

}  // namespace svf::kernels
