#include "svf/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/core.h>


namespace svf {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols)
        throw ShapeError(fmt::format("Matrix: {} values for a {}x{} shape", values_.size(), rows, cols));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
        values_.insert(values_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

double Matrix::frobenius_norm() const {
    double sum = 0.0;
    for (double v : values_) sum += v * v;
    return std::sqrt(sum);
}

bool Matrix::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

Matrix SvdFactors::reconstruct() const {
    Matrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s[j];
    return matmul(us, vt);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError(fmt::format("matmul: {} times {}", a.shape_string(), b.shape_string()));
    // Unfused multiply then add, ascending in p: the plain triple loop's rounding.
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols(), k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            const double* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

double orthonormality_defect(const Matrix& m) {
    double defect = 0.0;
    for (std::size_t i = 0; i < m.cols(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < m.rows(); ++r) dot += m(r, i) * m(r, j);
            defect = std::max(defect, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    return defect;
}

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kRotationTol = 1e-12;

double dot(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

void rotate(std::vector<double>& x, std::vector<double>& y, double c, double s) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double yi = y[i];
        x[i] = c * xi - s * yi;
        y[i] = s * xi + c * yi;
    }
}

struct TallResult {
    std::vector<std::vector<double>> u;  // q columns of length p
    std::vector<double> s;               // q
    std::vector<std::vector<double>> v;  // q columns of length q
};

// Replaces the listed columns by unit vectors orthogonal to all the others
// (modified Gram-Schmidt over the canonical basis).
void complete_basis(std::vector<std::vector<double>>& cols, const std::vector<bool>& keep) {
    const std::size_t p = cols.empty() ? 0 : cols.front().size();
    std::size_t next_axis = 0;
    for (std::size_t j = 0; j < cols.size(); ++j) {
        if (keep[j]) continue;
        bool placed = false;
        while (!placed && next_axis < p) {
            std::vector<double> cand(p, 0.0);
            cand[next_axis++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t o = 0; o < cols.size(); ++o) {
                    if (o == j || (!keep[o] && o > j)) continue;
                    const double proj = dot(cand, cols[o]);
                    for (std::size_t r = 0; r < p; ++r) cand[r] -= proj * cols[o][r];
                }
            }
            const double norm = std::sqrt(dot(cand, cand));
            if (norm > 0.5) {
                for (double& v : cand) v /= norm;
                cols[j] = std::move(cand);
                placed = true;
            }
        }
        if (!placed) throw SvdConvergenceError("svd: could not complete an orthonormal basis");
    }
}

// One-sided Jacobi on a p x q matrix with p >= q, given as q columns.
TallResult jacobi_tall(std::vector<std::vector<double>> cols, double frob, const std::string& shape) {
    const std::size_t q = cols.size();
    const std::size_t p = q == 0 ? 0 : cols.front().size();
    std::vector<std::vector<double>> v(q, std::vector<double>(q, 0.0));
    for (std::size_t i = 0; i < q; ++i) v[i][i] = 1.0;

    // Pairs whose inner product is negligible against the whole matrix are left alone.
    const double floor = std::numeric_limits<double>::min() + 1e-30 * frob * frob;
    int sweep = 0;
    double worst = 0.0;
    for (; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        worst = 0.0;
        for (std::size_t i = 0; i + 1 < q; ++i) {
            for (std::size_t j = i + 1; j < q; ++j) {
                const double alpha = dot(cols[i], cols[i]);
                const double beta = dot(cols[j], cols[j]);
                const double gamma = dot(cols[i], cols[j]);
                const double scale = std::sqrt(alpha * beta);
                if (scale > 0.0) worst = std::max(worst, std::abs(gamma) / scale);
                if (std::abs(gamma) <= kRotationTol * scale || std::abs(gamma) <= floor) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(cols[i], cols[j], c, s);
                rotate(v[i], v[j], c, s);
            }
        }
        if (!rotated) break;
    }
    if (sweep == kMaxSweeps)
        throw SvdConvergenceError(
            fmt::format("svd: no convergence for {} matrix after {} sweeps (residual {:.3e})", shape, kMaxSweeps, worst));

    TallResult out;
    out.s.resize(q);
    double smax = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
        out.s[j] = std::sqrt(dot(cols[j], cols[j]));
        smax = std::max(smax, out.s[j]);
    }
    const double zero_tol = smax * static_cast<double>(std::max<std::size_t>(p, 1)) * 1e-15;
    std::vector<bool> keep(q);
    for (std::size_t j = 0; j < q; ++j) {
        keep[j] = out.s[j] > zero_tol && out.s[j] > 0.0;
        if (keep[j])
            for (double& x : cols[j]) x /= out.s[j];
    }
    complete_basis(cols, keep);
    out.u = std::move(cols);
    out.v = std::move(v);
    return out;
}

}  // namespace

SvdFactors svd(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) throw ShapeError("svd: empty matrix");
    if (!m.all_finite()) throw std::invalid_argument("svd: non-finite entry in " + m.shape_string() + " matrix");

    const bool wide = m.rows() < m.cols();
    const std::size_t p = wide ? m.cols() : m.rows();
    const std::size_t q = wide ? m.rows() : m.cols();
    // Columns of the tall operand: columns of m, or rows of m when m is wide.
    std::vector<std::vector<double>> cols(q, std::vector<double>(p));
    for (std::size_t j = 0; j < q; ++j)
        for (std::size_t i = 0; i < p; ++i) cols[j][i] = wide ? m(j, i) : m(i, j);

    TallResult tall = jacobi_tall(std::move(cols), m.frobenius_norm(), m.shape_string());

    // tall: T = Ut S Vt^T with T = m (tall) or m^T (wide).
    auto& left = wide ? tall.v : tall.u;   // columns of u, length rows()
    auto& right = wide ? tall.u : tall.v;  // columns of v, length cols()

    std::vector<std::size_t> order(q);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return tall.s[a] > tall.s[b]; });

    SvdFactors f{Matrix(m.rows(), q), std::vector<double>(q), Matrix(q, m.cols())};
    for (std::size_t k = 0; k < q; ++k) {
        const std::size_t src = order[k];
        const auto& ucol = left[src];
        std::size_t arg = 0;
        for (std::size_t i = 1; i < ucol.size(); ++i)
            if (std::abs(ucol[i]) > std::abs(ucol[arg])) arg = i;
        const double sign = ucol[arg] < 0.0 ? -1.0 : 1.0;
        f.s[k] = tall.s[src];
        for (std::size_t i = 0; i < m.rows(); ++i) f.u(i, k) = sign * ucol[i];
        for (std::size_t i = 0; i < m.cols(); ++i) f.vt(k, i) = sign * right[src][i];
    }
    return f;
}

}  // namespace svf
