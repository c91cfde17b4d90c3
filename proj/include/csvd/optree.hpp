#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "csvd/binary_io.hpp"
#include "csvd/matrix.hpp"
#include "csvd/neighbors.hpp"

namespace csvd {

struct OpTreeOptions {
    std::uint32_t fanout = 5;
    std::uint32_t leaf_capacity = 64;
    // Split-dimension priority; empty means 0..n-1 (columns already in
    // nonincreasing eigenvalue order).
    std::vector<std::uint32_t> dims_order;
};

/// Ordered-partition tree. Each internal node splits its points into
/// `fanout` rank-equal slabs along one dimension; dimensions rotate
/// round-robin by depth. Nodes live depth-first in one byte arena addressed
/// by 32-bit offsets, so the serialized image is position independent.
///
/// Arena layout (little-endian, every node 8-byte aligned):
///   internal: u32 kind=0, u32 split_dim, u32 fanout, u32 0,
///             f32 bounds[fanout-1], u32 child[fanout] (kEmpty when unused)
///   leaf:     u32 kind=1, u32 count, u32 first_slot, u32 0,
///             u64 ids[count], f32 coords[count * dims]
class OpTree {
public:
    static constexpr std::uint32_t kEmpty = 0xFFFFFFFFu;

    struct Internal {
        std::uint32_t split_dim = 0;
        std::vector<float> bounds;
        std::vector<std::uint32_t> children;
    };
    struct Leaf {
        std::uint32_t first_slot = 0;
        std::vector<std::uint64_t> ids;
        MatrixF points;
    };

    OpTree() = default;

    static OpTree build(const MatrixF& points, std::span<const std::uint64_t> ids, const OpTreeOptions& opts = {});

    std::size_t dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return count_; }
    std::uint32_t fanout() const noexcept { return fanout_; }
    std::uint32_t leaf_capacity() const noexcept { return leaf_capacity_; }
    const std::vector<std::uint32_t>& dims_order() const noexcept { return dims_order_; }
    std::size_t arena_bytes() const noexcept { return arena_.size(); }

    /// Adds candidates to a running k-best set; pruning uses its current bound.
    void knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace* trace = nullptr) const;
    ResultSet knn(std::span<const double> q, std::size_t k, SearchCounters* counters = nullptr) const;

    /// Appends every point with squared distance <= radius_sq as (d2, id).
    void range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
               SearchCounters& counters) const;
    ResultSet range(std::span<const double> q, double radius, SearchCounters* counters = nullptr) const;

    /// Tombstones a point; returns false if the id is not indexed. Not safe
    /// while searches are running.
    bool mark_deleted(std::uint64_t id);
    bool is_deleted_slot(std::uint32_t slot) const { return (tombstones_[slot / 8] >> (slot % 8)) & 1u; }

    std::vector<std::byte> serialize() const;
    static OpTree deserialize(std::span<const std::byte> image);
    void save(const std::filesystem::path& path) const;
    static OpTree load(const std::filesystem::path& path, io::ReadStats* stats = nullptr);

    // Node decoding for structural audits.
    std::uint32_t root() const noexcept { return 0; }
    bool is_leaf(std::uint32_t offset) const;
    Internal internal(std::uint32_t offset) const;
    Leaf leaf(std::uint32_t offset) const;

private:
    struct Builder;

    std::uint32_t read_u32(std::size_t at) const;
    void search_knn(std::uint32_t node, std::span<const double> q, std::vector<double>& lo, std::vector<double>& hi,
                    std::vector<double>& gap, KBest& best, SearchCounters& counters, SearchTrace* trace) const;
    void search_range(std::uint32_t node, std::span<const double> q, std::vector<double>& lo, std::vector<double>& hi,
                      std::vector<double>& gap, double radius_sq,
                      std::vector<std::pair<double, std::uint64_t>>& out, SearchCounters& counters) const;
    void scan_leaf(std::uint32_t node, std::span<const double> q, SearchCounters& counters, auto&& visit) const;

    std::size_t dims_ = 0;
    std::size_t count_ = 0;
    std::uint32_t fanout_ = 5;
    std::uint32_t leaf_capacity_ = 64;
    std::vector<std::uint32_t> dims_order_;
    std::vector<std::byte> arena_;
    std::vector<std::uint8_t> tombstones_;
};

} // namespace csvd
