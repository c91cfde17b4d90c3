#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <queue>
#include <vector>

namespace csvd {

struct Neighbor {
    std::uint64_t id = 0;
    double distance = 0.0;

    bool operator==(const Neighbor&) const = default;
};

enum class DistanceSpace : std::uint8_t { subspace, original };

/// Neighbors ascending by distance, ties by id.
struct ResultSet {
    std::vector<Neighbor> entries;
    std::size_t k_requested = 0;
    DistanceSpace space = DistanceSpace::subspace;
    bool truncated = false;  // fewer than k points exist

    std::size_t size() const noexcept { return entries.size(); }
    std::vector<std::uint64_t> ids() const;
    std::vector<double> distances() const;
    /// Distance of the last entry, or +inf when empty.
    double d_max() const noexcept {
        return entries.empty() ? std::numeric_limits<double>::infinity() : entries.back().distance;
    }
};

/// Cost accounting shared by every search path. `coord_ops` weights each
/// distance evaluation by the number of coordinates it touched.
struct SearchCounters {
    std::uint64_t distance_ops = 0;
    std::uint64_t coord_ops = 0;
    std::uint64_t nodes_visited = 0;  // tree nodes or disk pages read
    std::uint64_t clusters_visited = 0;
    std::uint64_t candidates_verified = 0;
    std::uint64_t extra_verifications = 0;

    SearchCounters& operator+=(const SearchCounters& o) {
        distance_ops += o.distance_ops;
        coord_ops += o.coord_ops;
        nodes_visited += o.nodes_visited;
        clusters_visited += o.clusters_visited;
        candidates_verified += o.candidates_verified;
        extra_verifications += o.extra_verifications;
        return *this;
    }
};

/// Optional record of every region a search pruned, with the squared lower
/// bound that justified it. Used by pruning-soundness audits.
struct SearchTrace {
    std::vector<double> pruned_bounds_sq;
};

/// Running k best by (squared distance, id).
class KBest {
public:
    explicit KBest(std::size_t k) : k_(k) {}

    std::size_t k() const noexcept { return k_; }
    std::size_t size() const noexcept { return heap_.size(); }
    bool full() const noexcept { return heap_.size() >= k_; }

    /// Squared distance of the current k-th candidate, +inf until full.
    double bound_sq() const noexcept {
        return full() ? heap_.top().d2 : std::numeric_limits<double>::infinity();
    }

    bool offer(double d2, std::uint64_t id) {
        if (k_ == 0) return false;
        if (!full()) {
            heap_.push({d2, id});
            return true;
        }
        const Item& top = heap_.top();
        if (d2 < top.d2 || (d2 == top.d2 && id < top.id)) {
            heap_.pop();
            heap_.push({d2, id});
            return true;
        }
        return false;
    }

    /// Sorted result; distances are square roots of the stored squares.
    ResultSet finish(DistanceSpace space) &&;

private:
    struct Item {
        double d2;
        std::uint64_t id;
        bool operator<(const Item& o) const { return d2 < o.d2 || (d2 == o.d2 && id < o.id); }
    };
    std::size_t k_;
    std::priority_queue<Item> heap_;
};

/// Sorts (squared distance, id) pairs and converts them into a ResultSet.
ResultSet make_result(std::vector<std::pair<double, std::uint64_t>> squared, std::size_t k_requested,
                      DistanceSpace space);

} // namespace csvd
