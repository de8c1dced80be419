#pragma once

// Dense row-major matrices and the handful of vec-space helpers the rest of
// the library is written against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ssldyn {

using Vec = std::vector<double>;

class SizeLimitError : public std::length_error {
public:
    using std::length_error::length_error;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows_(r), cols_(c), a_(r * c, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        a_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
            a_.insert(a_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Matrix diag(const Vec& d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }
    static Matrix column(const Vec& v) {
        Matrix m(v.size(), 1);
        std::copy(v.begin(), v.end(), m.a_.begin());
        return m;
    }
    static Matrix row(const Vec& v) {
        Matrix m(1, v.size());
        std::copy(v.begin(), v.end(), m.a_.begin());
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return a_.size(); }
    bool empty() const { return a_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return a_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a_[i * cols_ + j]; }
    double* data() { return a_.data(); }
    const double* data() const { return a_.data(); }
    double* row_ptr(std::size_t i) { return a_.data() + i * cols_; }
    const double* row_ptr(std::size_t i) const { return a_.data() + i * cols_; }
    const Vec& raw() const { return a_; }
    Vec& raw() { return a_; }

    Vec col(std::size_t j) const {
        Vec v(rows_);
        for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
        return v;
    }
    void set_col(std::size_t j, const Vec& v) {
        for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
    }

    Matrix& operator+=(const Matrix& o) {
        check_same(o, "+=");
        for (std::size_t k = 0; k < a_.size(); ++k) a_[k] += o.a_[k];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        check_same(o, "-=");
        for (std::size_t k = 0; k < a_.size(); ++k) a_[k] -= o.a_[k];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (double& x : a_) x *= s;
        return *this;
    }
    // this += s * o
    void axpy(double s, const Matrix& o) {
        check_same(o, "axpy");
        for (std::size_t k = 0; k < a_.size(); ++k) a_[k] += s * o.a_[k];
    }

    Matrix transpose() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    double frobenius() const {
        double s = 0.0;
        for (double x : a_) s += x * x;
        return std::sqrt(s);
    }
    double trace() const {
        double s = 0.0;
        for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) s += (*this)(i, i);
        return s;
    }
    double max_abs() const {
        double m = 0.0;
        for (double x : a_) m = std::max(m, std::fabs(x));
        return m;
    }
    bool all_finite() const {
        return std::all_of(a_.begin(), a_.end(), [](double x) { return std::isfinite(x); });
    }

    bool operator==(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_ && a_ == o.a_; }

private:
    void check_same(const Matrix& o, const char* what) const {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw std::invalid_argument(std::string("Matrix ") + what + ": shape mismatch");
    }

    std::size_t rows_ = 0, cols_ = 0;
    Vec a_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }

inline Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row_ptr(i);
        const double* ai = a.row_ptr(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row_ptr(k);
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

inline Vec matvec(const Matrix& a, const Vec& x) {
    if (a.cols() != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
    Vec y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row_ptr(i);
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += ai[j] * x[j];
        y[i] = s;
    }
    return y;
}

// aᵀ x
inline Vec tmatvec(const Matrix& a, const Vec& x) {
    if (a.rows() != x.size()) throw std::invalid_argument("tmatvec: dimension mismatch");
    Vec y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row_ptr(i);
        const double xi = x[i];
        if (xi == 0.0) continue;
        for (std::size_t j = 0; j < a.cols(); ++j) y[j] += ai[j] * xi;
    }
    return y;
}

inline Matrix outer(const Vec& u, const Vec& v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
}

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}
inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec operator+(Vec a, const Vec& b) {
    if (a.size() != b.size()) throw std::invalid_argument("vec +: length mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}
inline Vec operator-(Vec a, const Vec& b) {
    if (a.size() != b.size()) throw std::invalid_argument("vec -: length mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
    return a;
}
inline Vec operator*(double s, Vec a) {
    for (double& x : a) x *= s;
    return a;
}
inline void axpy(double s, const Vec& x, Vec& y) {
    if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

// Relative error ‖a−b‖ / max(‖b‖, floor).
inline double rel_err(const Vec& a, const Vec& b, double floor = 1e-300) {
    return norm2(a - b) / std::max(norm2(b), floor);
}
inline double rel_err(const Matrix& a, const Matrix& b, double floor = 1e-300) {
    return (a - b).frobenius() / std::max(b.frobenius(), floor);
}

struct KronLimit {
    static std::size_t& max_entries() {
        static std::size_t cap = std::size_t{1} << 20;
        return cap;
    }
};

inline Matrix kron(const Matrix& a, const Matrix& b) {
    const std::size_t r = a.rows() * b.rows(), c = a.cols() * b.cols();
    if (r != 0 && c > KronLimit::max_entries() / r)
        throw SizeLimitError("kron: result of " + std::to_string(r) + "x" + std::to_string(c) +
                             " exceeds the configured entry cap");
    Matrix k(r, c);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double s = a(i, j);
            for (std::size_t p = 0; p < b.rows(); ++p)
                for (std::size_t q = 0; q < b.cols(); ++q) k(i * b.rows() + p, j * b.cols() + q) = s * b(p, q);
        }
    return k;
}

// Column stacking: entry (i, j) lands at j*rows + i.
inline Vec vec(const Matrix& m) {
    Vec v(m.size());
    for (std::size_t j = 0; j < m.cols(); ++j)
        for (std::size_t i = 0; i < m.rows(); ++i) v[j * m.rows() + i] = m(i, j);
    return v;
}

inline Matrix unvec(const Vec& v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) throw std::invalid_argument("unvec: length does not match dims");
    Matrix m(rows, cols);
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t i = 0; i < rows; ++i) m(i, j) = v[j * rows + i];
    return m;
}

struct EigenDecomposition {
    Vec values;     // descending
    Matrix vectors; // columns
};

inline bool is_symmetric(const Matrix& a, double rel_tol) {
    if (a.rows() != a.cols()) return false;
    const double scale = std::max(a.max_abs(), 1e-300);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j)
            if (std::fabs(a(i, j) - a(j, i)) > rel_tol * scale) return false;
    return true;
}

inline Matrix symmetrize(const Matrix& a) {
    Matrix s = a + a.transpose();
    s *= 0.5;
    return s;
}

// Cyclic Jacobi. Stops once the off-diagonal Frobenius mass drops to
// 1e-12 of the input norm, or after 100 sweeps.
inline EigenDecomposition sym_eigen(const Matrix& input) {
    if (!is_symmetric(input, 1e-9)) throw std::invalid_argument("sym_eigen: input is not symmetric");
    const std::size_t n = input.rows();
    Matrix a = symmetrize(input);
    Matrix v = Matrix::identity(n);
    const double target = 1e-12 * std::max(a.frobenius(), 1e-300);

    auto off = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += a(i, j) * a(i, j);
        return std::sqrt(s);
    };

    for (int sweep = 0; sweep < 100 && off() > target; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
    EigenDecomposition out{Vec(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    return out;
}

inline double min_eigenvalue(const Matrix& a) {
    auto e = sym_eigen(a);
    return e.values.empty() ? 0.0 : e.values.back();
}

// E_w[(X - X̄)(X - X̄)ᵀ] with X̄ the plain (unweighted) sample mean and the
// outer products weighted by w / N. With all weights 1 this is V[X].
inline Matrix matrix_variance(const std::vector<std::pair<double, Matrix>>& samples) {
    if (samples.empty()) throw std::invalid_argument("matrix_variance: no samples");
    const std::size_t r = samples.front().second.rows(), c = samples.front().second.cols();
    Matrix mean(r, c);
    for (const auto& [w, x] : samples) {
        if (x.rows() != r || x.cols() != c) throw std::invalid_argument("matrix_variance: shape mismatch");
        if (!x.all_finite() || !std::isfinite(w)) throw std::invalid_argument("matrix_variance: non-finite input");
        mean += x;
    }
    const double n = static_cast<double>(samples.size());
    mean *= 1.0 / n;
    Matrix out(r, r);
    for (const auto& [w, x] : samples) {
        Matrix d = x - mean;
        out.axpy(w / n, d * d.transpose());
    }
    return out;
}

} // namespace ssldyn
