#include "csvd/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "csvd/errors.hpp"

namespace csvd {

std::vector<double> studentize_vector(std::span<const double> raw, std::span<const double> means,
                                      std::span<const double> stds) {
    if (raw.size() != means.size()) {
        throw DataError("vector has " + std::to_string(raw.size()) + " features, expected " +
                        std::to_string(means.size()));
    }
    std::vector<double> out(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
        out[j] = stds[j] > 0.0 ? (raw[j] - means[j]) / stds[j] : 0.0;
    }
    return out;
}

std::vector<double> FeatureMatrix::studentize_row(std::span<const double> raw) const {
    return studentize_vector(raw, col_means, col_stds);
}

FeatureMatrix studentize(const MatrixD& raw) {
    const std::size_t m = raw.rows();
    const std::size_t n = raw.cols();
    if (m == 0 || n == 0) throw DataError("studentize: empty matrix");
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(raw(i, j))) {
                throw DataError("non-finite value at row " + std::to_string(i) + ", column " + std::to_string(j));
            }
        }
    }

    FeatureMatrix fm;
    fm.col_means.assign(n, 0.0);
    fm.col_stds.assign(n, 0.0);
    fm.degenerate.assign(n, 0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) fm.col_means[j] += raw(i, j);
    }
    for (double& mu : fm.col_means) mu /= static_cast<double>(m);
    if (m > 1) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double d = raw(i, j) - fm.col_means[j];
                fm.col_stds[j] += d * d;
            }
        }
        for (double& s : fm.col_stds) s = std::sqrt(s / static_cast<double>(m - 1));
    }

    fm.data = MatrixD(m, n);
    for (std::size_t j = 0; j < n; ++j) {
        if (!(fm.col_stds[j] > 0.0)) {
            fm.col_stds[j] = 0.0;
            fm.degenerate[j] = 1;
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        auto out = fm.data.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = fm.degenerate[j] ? 0.0 : (raw(i, j) - fm.col_means[j]) / fm.col_stds[j];
        }
    }
    return fm;
}

MatrixD covariance(const MatrixD& x, std::span<const double> center) {
    const std::size_t m = x.rows();
    const std::size_t n = x.cols();
    if (center.size() != n) throw DataError("covariance: center length mismatch");
    MatrixD c(n, n, 0.0);
    if (m == 0) return c;
    std::vector<double> d(n);
    for (std::size_t i = 0; i < m; ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < n; ++j) d[j] = r[j] - center[j];
        for (std::size_t a = 0; a < n; ++a) {
            const double da = d[a];
            if (da == 0.0) continue;
            for (std::size_t b = a; b < n; ++b) c(a, b) += da * d[b];
        }
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a; b < n; ++b) {
            c(a, b) *= inv_m;
            c(b, a) = c(a, b);
        }
    }
    return c;
}

namespace {

double off_diagonal_norm(const MatrixD& a) {
    double s = 0.0;
    for (std::size_t p = 0; p < a.rows(); ++p) {
        for (std::size_t q = p + 1; q < a.cols(); ++q) s += 2.0 * a(p, q) * a(p, q);
    }
    return std::sqrt(s);
}

double frobenius_norm(const MatrixD& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

void normalize_sign(MatrixD& v, std::size_t col) {
    const std::size_t n = v.rows();
    double max_abs = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_abs = std::max(max_abs, std::abs(v(i, col)));
    if (max_abs == 0.0) return;
    // Components within round-off of the maximum count as ties; lowest index wins.
    const double cutoff = max_abs * (1.0 - 1e-12);
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(v(i, col)) >= cutoff) {
            if (v(i, col) < 0.0) {
                for (std::size_t r = 0; r < n; ++r) v(r, col) = -v(r, col);
            }
            return;
        }
    }
}

} // namespace

EigenSystem eigendecompose(const MatrixD& c, const EigenOptions& opts) {
    const std::size_t n = c.rows();
    if (n == 0 || c.cols() != n) throw DataError("eigendecompose: matrix must be square and non-empty");
    for (double v : c.data()) {
        if (!std::isfinite(v)) throw DataError("eigendecompose: non-finite entry");
    }

    MatrixD a = c;
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) a(p, q) = a(q, p) = 0.5 * (a(p, q) + a(q, p));
    }
    MatrixD v(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    const double scale = frobenius_norm(a);
    const double stop = 1e-14 * scale;
    int sweep = 0;
    for (; off_diagonal_norm(a) > stop; ++sweep) {
        if (sweep >= opts.max_sweeps) {
            throw NumericError("eigendecompose: no convergence after " + std::to_string(opts.max_sweeps) +
                               " sweeps, off-diagonal norm " + std::to_string(off_diagonal_norm(a)));
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double cs = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * cs;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = cs * akp - sn * akq;
                    a(k, q) = sn * akp + cs * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = cs * apk - sn * aqk;
                    a(q, k) = sn * apk + cs * aqk;
                }
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = cs * vkp - sn * vkq;
                    v(k, q) = sn * vkp + cs * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenSystem es;
    es.sweeps = sweep;
    es.eigenvalues.resize(n);
    es.eigenvectors = MatrixD(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        es.eigenvalues[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) es.eigenvectors(i, k) = v(i, order[k]);
        normalize_sign(es.eigenvectors, k);
    }
    const double clamp = 1e-10 * std::max(es.eigenvalues.front(), 0.0);
    for (double& lambda : es.eigenvalues) {
        if (lambda < 0.0) {
            if (lambda < -clamp) {
                throw NumericError("eigendecompose: negative eigenvalue " + std::to_string(lambda) +
                                   " (matrix is not positive semidefinite)");
            }
            lambda = 0.0;
        }
    }
    return es;
}

std::vector<double> singular_values_from_eigenvalues(std::span<const double> eigenvalues, std::size_t m) {
    std::vector<double> sigma(eigenvalues.size());
    const double mm = static_cast<double>(m);
    const double clamp = eigenvalues.empty() ? 0.0 : 1e-10 * std::max(eigenvalues.front(), 0.0);
    for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
        double lambda = eigenvalues[i];
        if (lambda < 0.0) {
            if (lambda < -clamp) throw NumericError("negative eigenvalue " + std::to_string(lambda));
            lambda = 0.0;
        }
        sigma[i] = std::sqrt(mm * lambda);
    }
    return sigma;
}

MatrixD rotate(const MatrixD& x, const MatrixD& v, std::size_t keep) {
    if (x.cols() != v.rows()) {
        throw DataError("rotate: data has " + std::to_string(x.cols()) + " columns, basis has " +
                        std::to_string(v.rows()) + " rows");
    }
    keep = std::min(keep, v.cols());
    const std::size_t n = x.cols();
    MatrixD y(x.rows(), keep, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto xr = x.row(i);
        auto yr = y.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double xv = xr[j];
            if (xv == 0.0) continue;
            for (std::size_t c = 0; c < keep; ++c) yr[c] += xv * v(j, c);
        }
    }
    return y;
}

double nmse_global(std::span<const double> eigenvalues, std::size_t n) {
    if (n > eigenvalues.size()) throw DataError("nmse_global: retained count exceeds dimensionality");
    double total = 0.0;
    double tail = 0.0;
    for (std::size_t j = 0; j < eigenvalues.size(); ++j) {
        total += eigenvalues[j];
        if (j >= n) tail += eigenvalues[j];
    }
    if (!(total > 0.0)) throw NumericError("nmse_global: spectrum has zero total variance");
    return tail / total;
}

double nmse_residual(const MatrixD& rotated, std::size_t n) {
    if (n > rotated.cols()) throw DataError("nmse_residual: retained count exceeds dimensionality");
    double total = 0.0;
    double tail = 0.0;
    for (std::size_t i = 0; i < rotated.rows(); ++i) {
        auto r = rotated.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            const double e = r[j] * r[j];
            total += e;
            if (j >= n) tail += e;
        }
    }
    if (!(total > 0.0)) throw NumericError("nmse_residual: data has zero energy");
    return tail / total;
}

double squared_distance_checked(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw DataError("distance between vectors of length " + std::to_string(u.size()) + " and " +
                        std::to_string(v.size()));
    }
    return squared_distance(u, v);
}

double squared_distance_from_norms(double u_norm_sq, double v_norm_sq, double inner) {
    return std::max(0.0, u_norm_sq + v_norm_sq - 2.0 * inner);
}

} // namespace csvd
