#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "csvd/matrix.hpp"

namespace csvd {

/// Studentized feature table. `data` holds (raw - mean) / std per column;
/// zero-variance columns are kept as all-zero and flagged in `degenerate`.
///
/// Column stds use the sample (1/(M-1)) convention, while covariance()
/// below uses 1/M. The two are deliberately different.
struct FeatureMatrix {
    MatrixD data;
    std::vector<double> col_means;
    std::vector<double> col_stds;
    std::vector<std::uint8_t> degenerate;

    std::size_t rows() const noexcept { return data.rows(); }
    std::size_t cols() const noexcept { return data.cols(); }

    /// Applies the stored column statistics to a raw vector.
    std::vector<double> studentize_row(std::span<const double> raw) const;
};

FeatureMatrix studentize(const MatrixD& raw);

/// Same transform as FeatureMatrix::studentize_row, for callers holding only the stats.
std::vector<double> studentize_vector(std::span<const double> raw, std::span<const double> means,
                                      std::span<const double> stds);

/// C = (1/M) * (X - center)^T (X - center).
MatrixD covariance(const MatrixD& x, std::span<const double> center);

struct EigenSystem {
    MatrixD eigenvectors;  // columns are principal directions
    std::vector<double> eigenvalues;  // nonincreasing, clamped at 0
    int sweeps = 0;
};

struct EigenOptions {
    int max_sweeps = 100;
};

/// Cyclic Jacobi eigendecomposition of a symmetric positive-semidefinite matrix.
/// Eigenvectors are sign-normalized so the largest-magnitude component is
/// positive (first index wins near-ties). Throws NumericError when the sweep
/// budget is exhausted or an eigenvalue is meaningfully negative.
EigenSystem eigendecompose(const MatrixD& c, const EigenOptions& opts = {});

std::vector<double> singular_values_from_eigenvalues(std::span<const double> eigenvalues, std::size_t m);

/// Y = X * V[:, 0:keep). `keep` defaults to all columns of V.
MatrixD rotate(const MatrixD& x, const MatrixD& v, std::size_t keep = static_cast<std::size_t>(-1));

/// Fraction of variance discarded by keeping the first n eigenvalues.
double nmse_global(std::span<const double> eigenvalues, std::size_t n);

/// Same quantity from rotated data: energy in columns >= n over total energy.
double nmse_residual(const MatrixD& rotated, std::size_t n);

template <typename A, typename B>
double squared_distance(std::span<A> u, std::span<B> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = static_cast<double>(u[i]) - static_cast<double>(v[i]);
        s += d * d;
    }
    return s;
}

template <typename A, typename B>
double dot(std::span<A> u, std::span<B> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    return s;
}

/// Length-checked entry point; throws DataError on mismatch.
double squared_distance_checked(std::span<const double> u, std::span<const double> v);

/// ||u||^2 + ||v||^2 - 2 u.v with precomputed squared norms, clamped at 0.
double squared_distance_from_norms(double u_norm_sq, double v_norm_sq, double inner);

} // namespace csvd
