#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace svf {

/// Raised when operand shapes do not fit an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    Matrix transposed() const;
    double frobenius_norm() const;
    bool all_finite() const;

    std::string shape_string() const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

/// Thin SVD factors: m = u * diag(s) * vt with r = min(rows, cols).
struct SvdFactors {
    Matrix u;               // m x r
    std::vector<double> s;  // r, non-increasing, >= 0
    Matrix vt;              // r x n

    std::size_t rank() const noexcept { return s.size(); }
    Matrix reconstruct() const;
};

/// Thrown when the Jacobi sweeps fail to converge within the sweep cap.
class SvdConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Full-rank thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Singular values come back sorted descending (stable among ties). Each
/// column of u is sign-normalised so that its largest-magnitude entry is
/// non-negative; the matching row of vt is flipped with it. Columns of u that
/// belong to zero singular values are completed to an orthonormal basis.
SvdFactors svd(const Matrix& m);

Matrix matmul(const Matrix& a, const Matrix& b);

/// max |(m^T m - I)_{ij}|, i.e. how far the columns of m are from orthonormal.
double orthonormality_defect(const Matrix& m);

}  // namespace svf
