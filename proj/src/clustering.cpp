#include "csvd/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "csvd/errors.hpp"
#include "csvd/linalg.hpp"

namespace csvd {

std::uint32_t nearest_centroid(std::span<const double> point, const MatrixD& centroids) {
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d = squared_distance(point, centroids.row(c));
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(c);
        }
    }
    return best;
}

namespace {

void check_input(const MatrixD& x, std::size_t h) {
    if (x.rows() == 0 || x.cols() == 0) throw DataError("clustering: empty data");
    if (h == 0) throw UsageError("clustering: cluster count must be >= 1");
    if (h > x.rows()) {
        throw UsageError("clustering: " + std::to_string(h) + " clusters requested for " + std::to_string(x.rows()) +
                         " points");
    }
    for (double v : x.data()) {
        if (!std::isfinite(v)) throw DataError("clustering: non-finite value in data");
    }
}

// Returns true when any assignment changed.
bool assign_all(const MatrixD& x, const MatrixD& centroids, std::vector<std::uint32_t>& assignments) {
    bool changed = false;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const std::uint32_t c = nearest_centroid(x.row(i), centroids);
        if (c != assignments[i]) {
            assignments[i] = c;
            changed = true;
        }
    }
    return changed;
}

// Means of members; clusters without members keep their previous centroid.
MatrixD member_means(const MatrixD& x, std::span<const std::uint32_t> assignments, const MatrixD& previous) {
    const std::size_t h = previous.rows();
    const std::size_t n = x.cols();
    MatrixD sums(h, n, 0.0);
    std::vector<std::size_t> counts(h, 0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto s = sums.row(assignments[i]);
        auto r = x.row(i);
        for (std::size_t j = 0; j < n; ++j) s[j] += r[j];
        ++counts[assignments[i]];
    }
    for (std::size_t c = 0; c < h; ++c) {
        auto s = sums.row(c);
        if (counts[c] == 0) {
            auto p = previous.row(c);
            std::copy(p.begin(), p.end(), s.begin());
        } else {
            for (double& v : s) v /= static_cast<double>(counts[c]);
        }
    }
    return sums;
}

// Moves the point farthest from its own centroid into each empty cluster.
void repair_empty(const MatrixD& x, MatrixD& centroids, std::vector<std::uint32_t>& assignments) {
    const std::size_t h = centroids.rows();
    std::vector<std::size_t> counts(h, 0);
    for (auto a : assignments) ++counts[a];
    for (std::size_t c = 0; c < h; ++c) {
        if (counts[c] != 0) continue;
        std::size_t donor = x.rows();
        double far = -1.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            if (counts[assignments[i]] < 2) continue;
            const double d = squared_distance(x.row(i), centroids.row(assignments[i]));
            if (d > far) {
                far = d;
                donor = i;
            }
        }
        if (donor == x.rows()) throw NumericError("clustering: cannot repair empty cluster");
        --counts[assignments[donor]];
        assignments[donor] = static_cast<std::uint32_t>(c);
        counts[c] = 1;
        auto r = x.row(donor);
        std::copy(r.begin(), r.end(), centroids.row(c).begin());
    }
}

double objective(const MatrixD& x, const MatrixD& centroids, std::span<const std::uint32_t> assignments) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) s += squared_distance(x.row(i), centroids.row(assignments[i]));
    return s;
}

double max_displacement(const MatrixD& a, const MatrixD& b) {
    double worst = 0.0;
    for (std::size_t c = 0; c < a.rows(); ++c) worst = std::max(worst, std::sqrt(squared_distance(a.row(c), b.row(c))));
    return worst;
}

std::vector<double> column_means(const MatrixD& x) {
    std::vector<double> mu(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) mu[j] += r[j];
    }
    for (double& v : mu) v /= static_cast<double>(x.rows());
    return mu;
}

} // namespace

Partition cluster_stats(const MatrixD& x, std::span<const std::uint32_t> assignments, std::size_t h) {
    if (assignments.size() != x.rows()) throw DataError("cluster_stats: assignment count mismatch");
    const std::size_t n = x.cols();
    Partition p;
    p.assignments.assign(assignments.begin(), assignments.end());
    p.sizes.assign(h, 0);
    p.centroids = MatrixD(h, n, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto c = assignments[i];
        if (c >= h) throw DataError("cluster_stats: cluster id " + std::to_string(c) + " out of range");
        ++p.sizes[c];
        auto s = p.centroids.row(c);
        auto r = x.row(i);
        for (std::size_t j = 0; j < n; ++j) s[j] += r[j];
    }
    for (std::size_t c = 0; c < h; ++c) {
        if (p.sizes[c] == 0) throw DataError("cluster_stats: cluster " + std::to_string(c) + " is empty");
        for (double& v : p.centroids.row(c)) v /= static_cast<double>(p.sizes[c]);
    }
    p.radii.assign(h, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto c = assignments[i];
        p.radii[c] = std::max(p.radii[c], std::sqrt(squared_distance(x.row(i), p.centroids.row(c))));
    }
    return p;
}

LbgSeeds lbg_seed(const MatrixD& x, std::size_t h, const KMeansOptions& opts) {
    check_input(x, h);
    const std::size_t n = x.cols();
    std::size_t target = 1;
    while (target < h) target *= 2;

    MatrixD centroids(1, n, 0.0);
    {
        auto mu = column_means(x);
        std::copy(mu.begin(), mu.end(), centroids.row(0).begin());
    }
    std::vector<std::uint32_t> assignments(x.rows(), 0);

    while (centroids.rows() < target) {
        assign_all(x, centroids, assignments);
        const std::size_t cur = centroids.rows();
        // Per-cluster, per-dimension variance of members.
        MatrixD var(cur, n, 0.0);
        std::vector<std::size_t> counts(cur, 0);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const auto c = assignments[i];
            ++counts[c];
            auto r = x.row(i);
            auto mu = centroids.row(c);
            auto v = var.row(c);
            for (std::size_t j = 0; j < n; ++j) v[j] += (r[j] - mu[j]) * (r[j] - mu[j]);
        }
        MatrixD split(2 * cur, n);
        for (std::size_t c = 0; c < cur; ++c) {
            std::size_t dim = 0;
            double best = -1.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double v = counts[c] > 1 ? var(c, j) / static_cast<double>(counts[c] - 1) : 0.0;
                if (v > best) {
                    best = v;
                    dim = j;
                }
            }
            const double delta = opts.lbg_epsilon * std::sqrt(std::max(best, 0.0));
            auto mu = centroids.row(c);
            std::copy(mu.begin(), mu.end(), split.row(2 * c).begin());
            std::copy(mu.begin(), mu.end(), split.row(2 * c + 1).begin());
            split(2 * c, dim) -= delta;
            split(2 * c + 1, dim) += delta;
        }
        centroids = std::move(split);
        for (std::size_t step = 0; step < opts.lbg_lloyd_steps; ++step) {
            assign_all(x, centroids, assignments);
            centroids = member_means(x, assignments, centroids);
        }
    }

    if (target > h) {
        // Keep the h best-populated seeds, in their original order.
        assign_all(x, centroids, assignments);
        std::vector<std::size_t> counts(target, 0);
        for (auto a : assignments) ++counts[a];
        std::vector<std::size_t> order(target);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
        order.resize(h);
        std::sort(order.begin(), order.end());
        MatrixD kept(h, n);
        for (std::size_t c = 0; c < h; ++c) {
            auto r = centroids.row(order[c]);
            std::copy(r.begin(), r.end(), kept.row(c).begin());
        }
        centroids = std::move(kept);
    }

    LbgSeeds out;
    for (std::size_t a = 0; a < centroids.rows() && !out.collapsed; ++a) {
        for (std::size_t b = a + 1; b < centroids.rows(); ++b) {
            if (squared_distance(centroids.row(a), centroids.row(b)) == 0.0) {
                out.collapsed = true;
                break;
            }
        }
    }
    out.centroids = std::move(centroids);
    return out;
}

MatrixD furthest_first_seed(const MatrixD& x, std::size_t h, std::uint64_t seed) {
    check_input(x, h);
    const std::size_t m = x.rows();
    MatrixD centroids(h, x.cols());
    std::vector<double> nearest(m, std::numeric_limits<double>::infinity());
    std::size_t pick = static_cast<std::size_t>(seed % m);
    for (std::size_t c = 0; c < h; ++c) {
        auto r = x.row(pick);
        std::copy(r.begin(), r.end(), centroids.row(c).begin());
        std::size_t next = 0;
        double far = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            nearest[i] = std::min(nearest[i], squared_distance(x.row(i), centroids.row(c)));
            if (nearest[i] > far) {
                far = nearest[i];
                next = i;
            }
        }
        pick = next;
    }
    return centroids;
}

Partition kmeans(const MatrixD& x, std::size_t h, const KMeansOptions& opts) {
    check_input(x, h);
    MatrixD centroids =
        opts.seeding == Seeding::lbg ? lbg_seed(x, h, opts).centroids : furthest_first_seed(x, h, opts.seed);

    std::vector<std::uint32_t> assignments(x.rows(), 0);
    std::vector<double> history;
    bool converged = false;
    std::size_t iter = 0;

    assign_all(x, centroids, assignments);
    repair_empty(x, centroids, assignments);
    for (;;) {
        MatrixD updated = member_means(x, assignments, centroids);
        const double moved = max_displacement(updated, centroids);
        centroids = std::move(updated);
        history.push_back(objective(x, centroids, assignments));
        ++iter;
        if (moved < opts.tol) {
            converged = true;
            break;
        }
        if (iter >= opts.max_iters) break;
        const bool changed = assign_all(x, centroids, assignments);
        repair_empty(x, centroids, assignments);
        if (!changed) {
            converged = true;
            break;
        }
    }

    Partition p = cluster_stats(x, assignments, h);
    p.objective_history = std::move(history);
    p.iterations = iter;
    p.converged = converged;
    return p;
}

} // namespace csvd
