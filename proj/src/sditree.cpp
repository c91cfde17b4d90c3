#include "csvd/sditree.hpp"

#include <cmath>
#include <cstring>
#include <deque>
#include <limits>
#include <queue>
#include <string>

#include "csvd/clustering.hpp"
#include "csvd/errors.hpp"
#include "csvd/linalg.hpp"

namespace csvd {

namespace {

constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::span<std::byte> page, std::size_t at, T v) {
    std::memcpy(page.data() + at, &v, sizeof(T));
}

template <typename T>
T get(std::span<const std::byte> page, std::size_t at) {
    T v;
    std::memcpy(&v, page.data() + at, sizeof(T));
    return v;
}

std::size_t header_bytes(std::size_t levels) { return 4 + 4 + 4 + 8 + 8 + 4 + 4 + 4 * levels + 8 + 8 + 4; }

} // namespace

DimensionSchedule dimension_schedule(std::span<const double> eigenvalues, double p) {
    if (!(p > 0.0) || p > 1.0) throw UsageError("dimension_schedule: p must be in (0, 1]");
    if (eigenvalues.empty()) throw DataError("dimension_schedule: empty spectrum");
    std::vector<double> cum(eigenvalues.size());
    double total = 0.0;
    for (std::size_t k = 0; k < eigenvalues.size(); ++k) {
        if (eigenvalues[k] < 0.0) throw DataError("dimension_schedule: negative eigenvalue");
        if (k > 0 && eigenvalues[k] > eigenvalues[k - 1]) {
            throw DataError("dimension_schedule: spectrum not sorted nonincreasing");
        }
        total += eigenvalues[k];
        cum[k] = total;
    }
    if (!(total > 0.0)) throw NumericError("dimension_schedule: zero total variance");

    const std::size_t n = eigenvalues.size();
    DimensionSchedule s;
    s.p = p;
    for (std::size_t level = 1;; ++level) {
        const double threshold = std::min(static_cast<double>(level) * p, 1.0);
        std::size_t dims = n;
        for (std::size_t k = 0; k < n; ++k) {
            if (cum[k] / total >= threshold) {
                dims = k + 1;
                break;
            }
        }
        if (s.levels.empty() || dims > s.levels.back()) s.levels.push_back(dims);
        if (threshold >= 1.0 || dims == n) break;
    }
    // A zero-variance tail reaches 100% early; the leaf level still needs every dimension.
    if (s.levels.back() < n) s.levels.push_back(n);
    return s;
}

std::size_t entry_size(std::size_t n_dims, EntryRole role) {
    return role == EntryRole::internal ? 8 + 8 + 8 * n_dims : 8 + 8 * n_dims;
}

std::size_t SdiTree::fanout(std::size_t level) const {
    return page_size_ / entry_size(schedule_.dims_at(level), EntryRole::internal);
}

std::size_t SdiTree::leaf_fanout() const { return page_size_ / entry_size(dims_, EntryRole::leaf); }

struct SdiTree::Node {
    bool leaf = false;
    std::size_t level = 0;
    std::vector<std::uint32_t> rows;          // leaf members
    std::vector<std::size_t> children;        // node indices
    std::vector<std::vector<double>> centers;
    std::vector<double> radii;
};

struct SdiTree::Builder {
    const MatrixD& y;
    const SdiTree& tree;
    const SdiOptions& opts;
    std::vector<Node> nodes;

    std::size_t make_leaf(std::vector<std::uint32_t> rows) {
        Node leaf;
        leaf.leaf = true;
        leaf.rows = std::move(rows);
        nodes.push_back(std::move(leaf));
        return nodes.size() - 1;
    }

    std::vector<std::vector<std::uint32_t>> group(const std::vector<std::uint32_t>& rows, std::size_t n,
                                                  std::size_t g) {
        if (g <= 1) return {rows};
        MatrixD sub(rows.size(), n);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < n; ++j) sub(i, j) = y(rows[i], j);
        }
        KMeansOptions km;
        km.seeding = Seeding::furthest_first;
        km.seed = 0;
        km.max_iters = opts.kmeans_iters;
        const Partition part = kmeans(sub, g, km);
        std::vector<std::vector<std::uint32_t>> groups(g);
        for (std::size_t i = 0; i < rows.size(); ++i) groups[part.assignments[i]].push_back(rows[i]);
        return groups;
    }

    std::size_t make_internal(const std::vector<std::uint32_t>& rows, std::size_t level) {
        const std::size_t n = tree.schedule_.dims_at(level);
        const std::size_t cap = tree.leaf_fanout();
        const std::size_t g = std::min(tree.fanout(level), (rows.size() + cap - 1) / cap);
        auto groups = group(rows, n, g);

        Node node;
        node.level = level;
        for (auto& members : groups) {
            std::vector<double> center(n, 0.0);
            for (auto r : members) {
                for (std::size_t j = 0; j < n; ++j) center[j] += y(r, j);
            }
            for (double& c : center) c /= static_cast<double>(members.size());
            double far = 0.0;
            for (auto r : members) {
                double d2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) d2 += (y(r, j) - center[j]) * (y(r, j) - center[j]);
                far = std::max(far, d2);
            }
            node.centers.push_back(std::move(center));
            node.radii.push_back(std::sqrt(far));
            node.children.push_back(members.size() <= cap ? make_leaf(std::move(members))
                                                          : make_internal(members, level + 1));
        }
        nodes.push_back(std::move(node));
        return nodes.size() - 1;
    }
};

SdiTree SdiTree::build(const MatrixD& y, std::span<const std::uint64_t> ids, std::span<const double> eigenvalues,
                       const SdiOptions& opts) {
    if (y.rows() == 0 || y.cols() == 0) throw DataError("sdi: empty data");
    if (ids.size() != y.rows()) throw DataError("sdi: ids/rows mismatch");
    if (eigenvalues.size() != y.cols()) throw DataError("sdi: spectrum length does not match dimensionality");

    SdiTree tree;
    tree.dims_ = y.cols();
    tree.count_ = y.rows();
    tree.page_size_ = opts.page_size;
    tree.schedule_ = dimension_schedule(eigenvalues, opts.p);
    for (std::size_t level = 1; level <= tree.schedule_.levels.size(); ++level) {
        if (tree.fanout(level) < 2) {
            throw UsageError("sdi: page size " + std::to_string(opts.page_size) + " gives fanout < 2 at level " +
                             std::to_string(level));
        }
    }
    if (tree.leaf_fanout() < 2) throw UsageError("sdi: page size too small for two leaf records");
    if (header_bytes(tree.schedule_.levels.size()) > opts.page_size) throw UsageError("sdi: header exceeds page size");

    Builder b{y, tree, opts, {}};
    std::vector<std::uint32_t> rows(y.rows());
    for (std::uint32_t i = 0; i < rows.size(); ++i) rows[i] = i;
    const std::size_t root = b.make_internal(rows, 1);

    // Breadth-first page numbering; page 0 is the header.
    std::vector<std::uint64_t> page_of(b.nodes.size(), 0);
    std::vector<std::size_t> order;
    std::deque<std::size_t> queue{root};
    while (!queue.empty()) {
        const std::size_t idx = queue.front();
        queue.pop_front();
        order.push_back(idx);
        page_of[idx] = order.size();
        for (auto c : b.nodes[idx].children) queue.push_back(c);
    }

    const std::size_t s = opts.page_size;
    tree.pages_.assign((order.size() + 1) * s, std::byte{0});
    tree.root_ = page_of[root];
    for (std::size_t idx : order) {
        const Node& node = b.nodes[idx];
        std::span<std::byte> pg(tree.pages_.data() + page_of[idx] * s, s);
        if (node.leaf) {
            const std::size_t esz = entry_size(tree.dims_, EntryRole::leaf);
            const std::size_t slots = tree.leaf_fanout();
            for (std::size_t slot = 0; slot < slots; ++slot) {
                const std::size_t at = slot * esz;
                if (slot >= node.rows.size()) {
                    put<std::uint64_t>(pg, at, kEmpty);
                    continue;
                }
                const auto r = node.rows[slot];
                put<std::uint64_t>(pg, at, ids[r]);
                for (std::size_t j = 0; j < tree.dims_; ++j) put<double>(pg, at + 8 + 8 * j, y(r, j));
            }
        } else {
            const std::size_t n = tree.schedule_.dims_at(node.level);
            const std::size_t esz = entry_size(n, EntryRole::internal);
            const std::size_t slots = tree.fanout(node.level);
            for (std::size_t slot = 0; slot < slots; ++slot) {
                const std::size_t at = slot * esz;
                if (slot >= node.children.size()) {
                    put<std::uint64_t>(pg, at, kEmpty);
                    continue;
                }
                const std::size_t child = node.children[slot];
                std::uint64_t ref = page_of[child];
                if (b.nodes[child].leaf) ref |= kLeafFlag;
                put<std::uint64_t>(pg, at, ref);
                put<double>(pg, at + 8, node.radii[slot]);
                for (std::size_t j = 0; j < n; ++j) put<double>(pg, at + 16 + 8 * j, node.centers[slot][j]);
            }
        }
    }

    // Header page: "SDI1", version, N, M, p, S, L, schedule[L], root, page count, crc.
    io::ByteWriter w;
    w.magic("SDI1");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(tree.dims_));
    w.u64(tree.count_);
    w.f64(tree.schedule_.p);
    w.u32(tree.page_size_);
    w.u32(static_cast<std::uint32_t>(tree.schedule_.levels.size()));
    for (auto l : tree.schedule_.levels) w.u32(static_cast<std::uint32_t>(l));
    w.u64(tree.root_);
    w.u64(tree.page_count());
    const auto crc = io::crc32(std::span(tree.pages_).subspan(s), io::crc32(w.buffer()));
    w.u32(crc);
    std::memcpy(tree.pages_.data(), w.buffer().data(), w.size());
    return tree;
}

std::span<const std::byte> SdiTree::page(std::uint64_t number) const {
    return std::span<const std::byte>(pages_).subspan(number * page_size_, page_size_);
}

std::vector<SdiTree::Entry> SdiTree::internal_entries(std::uint64_t number, std::size_t level) const {
    const auto pg = page(number);
    const std::size_t n = schedule_.dims_at(level);
    const std::size_t esz = entry_size(n, EntryRole::internal);
    std::vector<Entry> out;
    for (std::size_t slot = 0; slot < fanout(level); ++slot) {
        const std::size_t at = slot * esz;
        const auto ref = get<std::uint64_t>(pg, at);
        if (ref == kEmpty) break;
        Entry e;
        e.page = ref & ~kLeafFlag;
        e.child_is_leaf = (ref & kLeafFlag) != 0;
        e.radius = get<double>(pg, at + 8);
        e.center.resize(n);
        for (std::size_t j = 0; j < n; ++j) e.center[j] = get<double>(pg, at + 16 + 8 * j);
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<SdiTree::Record> SdiTree::leaf_records(std::uint64_t number) const {
    const auto pg = page(number);
    const std::size_t esz = entry_size(dims_, EntryRole::leaf);
    std::vector<Record> out;
    for (std::size_t slot = 0; slot < leaf_fanout(); ++slot) {
        const std::size_t at = slot * esz;
        const auto id = get<std::uint64_t>(pg, at);
        if (id == kEmpty) break;
        Record r;
        r.id = id;
        r.vector.resize(dims_);
        for (std::size_t j = 0; j < dims_; ++j) r.vector[j] = get<double>(pg, at + 8 + 8 * j);
        out.push_back(std::move(r));
    }
    return out;
}

template <typename OnLeaf, typename Limit>
void SdiTree::best_first(std::span<const double> q, SearchCounters& counters, SearchTrace* trace, OnLeaf&& on_leaf,
                         Limit&& limit_sq) const {
    if (q.size() != dims_) throw DataError("sdi: query dimensionality mismatch");
    struct Pending {
        double bound;
        std::uint64_t page;
        std::size_t level;
        bool leaf;
        bool operator>(const Pending& o) const {
            return bound > o.bound || (bound == o.bound && page > o.page);
        }
    };
    std::priority_queue<Pending, std::vector<Pending>, std::greater<>> pending;
    pending.push({0.0, root_, 1, false});
    while (!pending.empty()) {
        const Pending top = pending.top();
        if (top.bound * top.bound > limit_sq()) {
            if (trace) {
                while (!pending.empty()) {
                    trace->pruned_bounds_sq.push_back(pending.top().bound * pending.top().bound);
                    pending.pop();
                }
            }
            break;
        }
        pending.pop();
        ++counters.nodes_visited;
        const auto pg = page(top.page);
        if (top.leaf) {
            const std::size_t esz = entry_size(dims_, EntryRole::leaf);
            for (std::size_t slot = 0; slot < leaf_fanout(); ++slot) {
                const std::size_t at = slot * esz;
                const auto id = get<std::uint64_t>(pg, at);
                if (id == kEmpty) break;
                double d2 = 0.0;
                for (std::size_t j = 0; j < dims_; ++j) {
                    const double d = q[j] - get<double>(pg, at + 8 + 8 * j);
                    d2 += d * d;
                }
                ++counters.distance_ops;
                counters.coord_ops += dims_;
                on_leaf(d2, id);
            }
            continue;
        }
        const std::size_t n = schedule_.dims_at(top.level);
        const std::size_t esz = entry_size(n, EntryRole::internal);
        for (std::size_t slot = 0; slot < fanout(top.level); ++slot) {
            const std::size_t at = slot * esz;
            const auto ref = get<std::uint64_t>(pg, at);
            if (ref == kEmpty) break;
            double d2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double d = q[j] - get<double>(pg, at + 16 + 8 * j);
                d2 += d * d;
            }
            counters.coord_ops += n;
            // Truncated distance never exceeds the full one; shave a few ulps so
            // round-off cannot turn the bound into an overestimate.
            const double bound = std::max(std::sqrt(d2) - get<double>(pg, at + 8), 0.0) * (1.0 - 1e-12);
            pending.push({bound, ref & ~kLeafFlag, top.level + 1, (ref & kLeafFlag) != 0});
        }
    }
}

void SdiTree::knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace* trace) const {
    best_first(q, counters, trace, [&](double d2, std::uint64_t id) { best.offer(d2, id); },
               [&] { return best.bound_sq(); });
}

ResultSet SdiTree::knn(std::span<const double> q, std::size_t k, SearchCounters* counters) const {
    if (k < 1) throw UsageError("sdi: k must be >= 1");
    KBest best(k);
    SearchCounters local;
    knn(q, best, counters ? *counters : local);
    auto rs = std::move(best).finish(DistanceSpace::subspace);
    rs.truncated = k > count_;
    return rs;
}

void SdiTree::range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
                    SearchCounters& counters) const {
    best_first(q, counters, nullptr, [&](double d2, std::uint64_t id) {
        if (d2 <= radius_sq) out.emplace_back(d2, id);
    }, [&] { return radius_sq; });
}

SdiTree SdiTree::deserialize(std::span<const std::byte> image) {
    io::ByteReader r(image, "sdi");
    r.expect_magic("SDI1");
    const auto version = r.u32();
    if (version != kFormatVersion) r.fail("unsupported version " + std::to_string(version));
    SdiTree tree;
    tree.dims_ = r.u32();
    tree.count_ = r.u64();
    tree.schedule_.p = r.f64();
    tree.page_size_ = r.u32();
    const std::size_t levels = r.u32();
    if (tree.dims_ == 0 || levels == 0 || levels > tree.dims_) r.fail("bad schedule");
    if (tree.page_size_ < header_bytes(levels)) r.fail("bad page size");
    for (std::size_t l = 0; l < levels; ++l) {
        tree.schedule_.levels.push_back(r.u32());
        if (tree.schedule_.levels.back() == 0 || tree.schedule_.levels.back() > tree.dims_) r.fail("bad schedule");
    }
    tree.root_ = r.u64();
    const auto page_count = r.u64();
    const std::size_t header_end = r.position();
    const auto stored_crc = r.u32();
    if (page_count < 2 || page_count > image.size() / tree.page_size_ ||
        image.size() != page_count * tree.page_size_) {
        r.fail("file size does not match page count");
    }
    if (tree.root_ == 0 || tree.root_ >= page_count) r.fail("bad root page");
    const auto crc = io::crc32(image.subspan(tree.page_size_), io::crc32(image.first(header_end)));
    if (crc != stored_crc) r.fail("checksum mismatch");
    tree.pages_.assign(image.begin(), image.end());
    return tree;
}

void SdiTree::save(const std::filesystem::path& path) const { io::write_file(path, pages_); }

SdiTree SdiTree::load(const std::filesystem::path& path, io::ReadStats* stats) {
    return deserialize(io::read_file(path, stats));
}

} // namespace csvd
