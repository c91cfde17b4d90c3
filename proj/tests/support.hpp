#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csvd/matrix.hpp"

namespace csvd::test {

inline MatrixD random_matrix(std::size_t m, std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    MatrixD x(m, n);
    for (auto& v : x.data()) v = g(rng);
    return x;
}

/// Random points from a few anisotropic Gaussian clusters.
inline MatrixD clustered_matrix(std::size_t m, std::size_t n, std::size_t clusters, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::vector<double>> centers(clusters, std::vector<double>(n));
    std::vector<std::vector<double>> scales(clusters, std::vector<double>(n));
    std::uniform_real_distribution<double> u(0.05, 2.0);
    for (std::size_t c = 0; c < clusters; ++c) {
        for (std::size_t j = 0; j < n; ++j) {
            centers[c][j] = 6.0 * g(rng);
            scales[c][j] = u(rng);
        }
    }
    MatrixD x(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t c = i % clusters;
        for (std::size_t j = 0; j < n; ++j) x(i, j) = centers[c][j] + scales[c][j] * g(rng);
    }
    return x;
}

/// Brute-force k-NN: full sort of (squared distance, id).
template <typename T>
std::vector<std::pair<double, std::uint64_t>> brute_knn(const Matrix<T>& pts, std::span<const std::uint64_t> ids,
                                                        std::span<const double> q, std::size_t k) {
    std::vector<std::pair<double, std::uint64_t>> all;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < pts.cols(); ++j) {
            const double d = q[j] - static_cast<double>(pts(i, j));
            s += d * d;
        }
        all.emplace_back(s, ids[i]);
    }
    std::sort(all.begin(), all.end());
    if (all.size() > k) all.resize(k);
    return all;
}

template <typename T>
std::vector<std::pair<double, std::uint64_t>> brute_range(const Matrix<T>& pts, std::span<const std::uint64_t> ids,
                                                          std::span<const double> q, double r2) {
    auto all = brute_knn(pts, ids, q, pts.rows());
    all.erase(std::remove_if(all.begin(), all.end(), [&](const auto& e) { return e.first > r2; }), all.end());
    return all;
}

inline std::vector<std::uint64_t> iota_ids(std::size_t m) {
    std::vector<std::uint64_t> ids(m);
    for (std::size_t i = 0; i < m; ++i) ids[i] = i;
    return ids;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("csvd_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace csvd::test
