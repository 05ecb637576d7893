#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mape {

using Vec = std::vector<double>;

// Dense row-major matrix. The project convention for projections is
// y = x * W + b with x a row vector, so W has shape (in, out).
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Mat& other) const { return rows == other.rows && cols == other.cols; }
};

inline void axpy(Vec& y, double a, const Vec& x) {
    assert(y.size() == x.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] += a * x[i];
    }
}

inline double dot(const Vec& a, const Vec& b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Used for the
// PSD checks on Fisher blocks; block dimension stays small (heads + filters
// of one layer) so this is plenty fast.
inline Vec symmetric_eigenvalues(const Mat& m, int max_sweeps = 64) {
    if (m.rows != m.cols) {
        throw std::invalid_argument("symmetric_eigenvalues: matrix not square");
    }
    const std::size_t n = m.rows;
    Mat a = m;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                off += a(p, q) * a(p, q);
            }
        }
        if (off < 1e-30) {
            break;
        }
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    Vec eig(n);
    for (std::size_t i = 0; i < n; ++i) {
        eig[i] = a(i, i);
    }
    return eig;
}

inline double min_eigenvalue(const Mat& m) {
    const Vec eig = symmetric_eigenvalues(m);
    double lo = eig.empty() ? 0.0 : eig[0];
    for (const double v : eig) {
        lo = std::min(lo, v);
    }
    return lo;
}

}  // namespace mape
