#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "csvd/matrix.hpp"

namespace csvd {

enum class Seeding {
    lbg,            // tree-structured binary splitting
    furthest_first,
};

struct KMeansOptions {
    Seeding seeding = Seeding::lbg;
    std::size_t max_iters = 50;   // Lloyd passes after seeding
    double tol = 1e-9;            // max centroid displacement that counts as converged
    std::uint64_t seed = 42;      // furthest-first start point
    std::size_t lbg_lloyd_steps = 5;
    double lbg_epsilon = 1e-3;    // split offset, in units of the split dimension's std
};

/// Cluster membership plus the hypersphere summary (centroid, radius) of each cluster.
struct Partition {
    std::vector<std::uint32_t> assignments;
    MatrixD centroids;
    std::vector<double> radii;
    std::vector<std::size_t> sizes;

    // Sum of squared member-to-centroid distances after each Lloyd pass.
    std::vector<double> objective_history;
    std::size_t iterations = 0;
    bool converged = false;

    std::size_t clusters() const noexcept { return sizes.size(); }
};

Partition kmeans(const MatrixD& x, std::size_t h, const KMeansOptions& opts = {});

struct LbgSeeds {
    MatrixD centroids;
    bool collapsed = false;  // some seeds coincide (e.g. all rows identical)
};

LbgSeeds lbg_seed(const MatrixD& x, std::size_t h, const KMeansOptions& opts = {});

MatrixD furthest_first_seed(const MatrixD& x, std::size_t h, std::uint64_t seed);

/// Recomputes centroids, radii and sizes from explicit membership.
Partition cluster_stats(const MatrixD& x, std::span<const std::uint32_t> assignments, std::size_t h);

/// Index of the nearest centroid; ties go to the lower id.
std::uint32_t nearest_centroid(std::span<const double> point, const MatrixD& centroids);

} // namespace csvd
