#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "csvd/binary_io.hpp"
#include "csvd/matrix.hpp"
#include "csvd/neighbors.hpp"

namespace csvd {

/// Dimensions used at each tree level: level l keeps the fewest leading
/// dimensions whose cumulative variance fraction reaches min(l * p, 1).
struct DimensionSchedule {
    double p = 0.0;
    std::vector<std::size_t> levels;

    /// Dimensionality at 1-based `level`; levels past the schedule use all dimensions.
    std::size_t dims_at(std::size_t level) const { return levels[std::min(level, levels.size()) - 1]; }
};

DimensionSchedule dimension_schedule(std::span<const double> eigenvalues, double p);

enum class EntryRole { internal, leaf };

/// Bytes per node entry. internal: child ref (8) + radius (8) + center (8 * n_dims);
/// leaf: id (8) + full vector (8 * n_dims).
std::size_t entry_size(std::size_t n_dims, EntryRole role);

struct SdiOptions {
    double p = 0.2;
    std::uint32_t page_size = 4096;
    std::size_t kmeans_iters = 10;
};

/// Paged hypersphere tree over PCA-rotated vectors. Every node is one page
/// of `page_size` bytes; page 0 is the file header. Internal pages at level l
/// hold child spheres measured on the first n_l coordinates; leaf pages hold
/// (id, full vector) records.
///
/// Entry encodings (little-endian):
///   internal: u64 ref, f64 radius, f64 center[n_l]
///             ref = child page number, bit 63 set when the child is a leaf
///   leaf:     u64 id, f64 vector[N]
/// Unused slots carry ref/id = kEmpty.
class SdiTree {
public:
    static constexpr std::uint64_t kEmpty = ~std::uint64_t{0};
    static constexpr std::uint64_t kLeafFlag = std::uint64_t{1} << 63;

    struct Entry {
        std::uint64_t page = 0;
        bool child_is_leaf = false;
        double radius = 0.0;
        std::vector<double> center;
    };
    struct Record {
        std::uint64_t id = 0;
        std::vector<double> vector;
    };

    SdiTree() = default;

    /// `y` columns must be in nonincreasing-variance order with `eigenvalues` matching.
    static SdiTree build(const MatrixD& y, std::span<const std::uint64_t> ids, std::span<const double> eigenvalues,
                         const SdiOptions& opts = {});

    std::size_t dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return count_; }
    std::uint32_t page_size() const noexcept { return page_size_; }
    std::size_t page_count() const noexcept { return pages_.size() / page_size_; }
    std::uint64_t root_page() const noexcept { return root_; }
    const DimensionSchedule& schedule() const noexcept { return schedule_; }
    std::size_t fanout(std::size_t level) const;
    std::size_t leaf_fanout() const;

    void knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace* trace = nullptr) const;
    ResultSet knn(std::span<const double> q, std::size_t k, SearchCounters* counters = nullptr) const;
    void range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
               SearchCounters& counters) const;

    std::vector<Entry> internal_entries(std::uint64_t page, std::size_t level) const;
    std::vector<Record> leaf_records(std::uint64_t page) const;

    const std::vector<std::byte>& image() const noexcept { return pages_; }
    static SdiTree deserialize(std::span<const std::byte> image);
    void save(const std::filesystem::path& path) const;
    static SdiTree load(const std::filesystem::path& path, io::ReadStats* stats = nullptr);

private:
    struct Node;
    struct Builder;

    std::span<const std::byte> page(std::uint64_t number) const;
    template <typename OnLeaf, typename Limit>
    void best_first(std::span<const double> q, SearchCounters& counters, SearchTrace* trace, OnLeaf&& on_leaf,
                    Limit&& limit_sq) const;

    std::size_t dims_ = 0;
    std::size_t count_ = 0;
    std::uint32_t page_size_ = 4096;
    DimensionSchedule schedule_;
    std::uint64_t root_ = 1;
    std::vector<std::byte> pages_;  // whole paged file, header page included
};

} // namespace csvd
