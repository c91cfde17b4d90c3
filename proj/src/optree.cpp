#include "csvd/optree.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>

#include "csvd/errors.hpp"
#include "csvd/linalg.hpp"

namespace csvd {

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kInternal = 0;
constexpr std::uint32_t kLeaf = 1;
constexpr std::size_t kNodeHeader = 16;

std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

template <typename T>
void put(std::vector<std::byte>& arena, std::size_t at, T v) {
    std::memcpy(arena.data() + at, &v, sizeof(T));
}

template <typename T>
T get(const std::vector<std::byte>& arena, std::size_t at) {
    T v;
    std::memcpy(&v, arena.data() + at, sizeof(T));
    return v;
}

double sum_sq(const std::vector<double>& gap) {
    double s = 0.0;
    for (double g : gap) s += g * g;
    return s;
}

} // namespace

struct OpTree::Builder {
    const MatrixF& points;
    std::span<const std::uint64_t> ids;
    const OpTree& tree;
    std::vector<std::byte> arena;
    std::uint32_t next_slot = 0;

    std::uint32_t alloc(std::size_t bytes) {
        const std::size_t at = arena.size();
        if (at + bytes > std::numeric_limits<std::uint32_t>::max()) {
            throw DataError("optree: arena exceeds 32-bit offsets");
        }
        arena.resize(at + align8(bytes), std::byte{0});
        return static_cast<std::uint32_t>(at);
    }

    std::uint32_t write_leaf(std::span<const std::uint32_t> rows) {
        const std::size_t n = tree.dims_;
        const std::size_t count = rows.size();
        const std::uint32_t at = alloc(kNodeHeader + 8 * count + 4 * count * n);
        put<std::uint32_t>(arena, at, kLeaf);
        put<std::uint32_t>(arena, at + 4, static_cast<std::uint32_t>(count));
        put<std::uint32_t>(arena, at + 8, next_slot);
        next_slot += static_cast<std::uint32_t>(count);
        std::size_t cursor = at + kNodeHeader;
        for (auto r : rows) {
            put<std::uint64_t>(arena, cursor, ids[r]);
            cursor += 8;
        }
        for (auto r : rows) {
            for (std::size_t j = 0; j < n; ++j) {
                put<float>(arena, cursor, points(r, j));
                cursor += 4;
            }
        }
        return at;
    }

    std::uint32_t build(std::vector<std::uint32_t>& rows, std::size_t depth) {
        const std::size_t n = tree.dims_;
        const std::size_t count = rows.size();
        if (count <= tree.leaf_capacity_ || n == 0) return write_leaf(rows);

        // Split dimension by depth; dimensions constant over this node are skipped.
        std::uint32_t dim = 0;
        bool found = false;
        for (std::size_t t = 0; t < n && !found; ++t) {
            dim = tree.dims_order_[(depth + t) % n];
            float lo = points(rows[0], dim);
            float hi = lo;
            for (auto r : rows) {
                lo = std::min(lo, points(r, dim));
                hi = std::max(hi, points(r, dim));
            }
            if (lo < hi) {
                found = true;
                depth += t;
            }
        }
        if (!found) return write_leaf(rows);

        std::sort(rows.begin(), rows.end(), [&](std::uint32_t a, std::uint32_t b) {
            const float va = points(a, dim);
            const float vb = points(b, dim);
            return va < vb || (va == vb && ids[a] < ids[b]);
        });
        auto value = [&](std::size_t i) { return points(rows[i], dim); };
        auto first_not_below = [&](float v) {
            std::size_t lo = 0;
            std::size_t hi = count;
            while (lo < hi) {
                const std::size_t mid = (lo + hi) / 2;
                if (value(mid) < v) lo = mid + 1;
                else hi = mid;
            }
            return lo;
        };

        const std::uint32_t f = tree.fanout_;
        std::vector<std::size_t> cut(f + 1, 0);
        std::vector<float> bounds(f - 1);
        cut[f] = count;
        for (std::uint32_t g = 1; g < f; ++g) {
            const std::size_t nominal = g * count / f;
            bounds[g - 1] = value(nominal);
            // Equal coordinates stay together in the upper slab.
            cut[g] = first_not_below(bounds[g - 1]);
        }
        if (cut[f - 1] == 0) {
            // Rank cuts all fell on the minimum value; split just above it.
            std::size_t pos = 0;
            while (value(pos) == value(0)) ++pos;
            for (std::uint32_t g = 1; g < f; ++g) {
                if (cut[g] < pos) {
                    cut[g] = pos;
                    bounds[g - 1] = value(pos);
                }
            }
        }

        const std::uint32_t at = alloc(kNodeHeader + 4 * (f - 1) + 4 * f);
        put<std::uint32_t>(arena, at, kInternal);
        put<std::uint32_t>(arena, at + 4, dim);
        put<std::uint32_t>(arena, at + 8, f);
        for (std::uint32_t g = 0; g + 1 < f; ++g) put<float>(arena, at + kNodeHeader + 4 * g, bounds[g]);
        const std::size_t child_base = at + kNodeHeader + 4 * (f - 1);
        for (std::uint32_t g = 0; g < f; ++g) {
            std::uint32_t child = kEmpty;
            if (cut[g + 1] > cut[g]) {
                std::vector<std::uint32_t> part(rows.begin() + static_cast<std::ptrdiff_t>(cut[g]),
                                                rows.begin() + static_cast<std::ptrdiff_t>(cut[g + 1]));
                child = build(part, depth + 1);
            }
            put<std::uint32_t>(arena, child_base + 4 * g, child);
        }
        return at;
    }
};

OpTree OpTree::build(const MatrixF& points, std::span<const std::uint64_t> ids, const OpTreeOptions& opts) {
    if (points.rows() == 0) throw DataError("optree: no points");
    if (ids.size() != points.rows()) throw DataError("optree: ids/points mismatch");
    if (opts.fanout < 2 || opts.fanout > 16) throw UsageError("optree: fanout must be in [2, 16]");
    if (opts.leaf_capacity < 1) throw UsageError("optree: leaf capacity must be >= 1");
    const std::size_t n = points.cols();

    OpTree tree;
    tree.dims_ = n;
    tree.count_ = points.rows();
    tree.fanout_ = opts.fanout;
    tree.leaf_capacity_ = opts.leaf_capacity;
    if (opts.dims_order.empty()) {
        tree.dims_order_.resize(n);
        std::iota(tree.dims_order_.begin(), tree.dims_order_.end(), 0u);
    } else {
        tree.dims_order_ = opts.dims_order;
        auto sorted = opts.dims_order;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t j = 0; j < sorted.size(); ++j) {
            if (sorted[j] != j || sorted.size() != n) throw UsageError("optree: dims_order must permute 0..n-1");
        }
    }

    Builder b{points, ids, tree, {}, 0};
    std::vector<std::uint32_t> rows(points.rows());
    std::iota(rows.begin(), rows.end(), 0u);
    b.build(rows, 0);
    tree.arena_ = std::move(b.arena);
    tree.tombstones_.assign((tree.count_ + 7) / 8, 0);
    return tree;
}

std::uint32_t OpTree::read_u32(std::size_t at) const { return get<std::uint32_t>(arena_, at); }

bool OpTree::is_leaf(std::uint32_t offset) const { return read_u32(offset) == kLeaf; }

OpTree::Internal OpTree::internal(std::uint32_t offset) const {
    Internal node;
    node.split_dim = read_u32(offset + 4);
    const std::uint32_t f = read_u32(offset + 8);
    node.bounds.resize(f - 1);
    for (std::uint32_t g = 0; g + 1 < f; ++g) node.bounds[g] = get<float>(arena_, offset + kNodeHeader + 4 * g);
    node.children.resize(f);
    const std::size_t child_base = offset + kNodeHeader + 4 * (f - 1);
    for (std::uint32_t g = 0; g < f; ++g) node.children[g] = read_u32(child_base + 4 * g);
    return node;
}

OpTree::Leaf OpTree::leaf(std::uint32_t offset) const {
    Leaf node;
    const std::uint32_t count = read_u32(offset + 4);
    node.first_slot = read_u32(offset + 8);
    node.ids.resize(count);
    std::size_t cursor = offset + kNodeHeader;
    for (auto& id : node.ids) {
        id = get<std::uint64_t>(arena_, cursor);
        cursor += 8;
    }
    node.points = MatrixF(count, dims_);
    for (float& v : node.points.data()) {
        v = get<float>(arena_, cursor);
        cursor += 4;
    }
    return node;
}

void OpTree::scan_leaf(std::uint32_t node, std::span<const double> q, SearchCounters& counters, auto&& visit) const {
    const std::uint32_t count = read_u32(node + 4);
    const std::uint32_t first_slot = read_u32(node + 8);
    const std::size_t id_base = node + kNodeHeader;
    const std::size_t coord_base = id_base + 8 * static_cast<std::size_t>(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (is_deleted_slot(first_slot + i)) continue;
        const std::size_t row = coord_base + 4 * static_cast<std::size_t>(i) * dims_;
        double d2 = 0.0;
        for (std::size_t j = 0; j < dims_; ++j) {
            const double d = q[j] - static_cast<double>(get<float>(arena_, row + 4 * j));
            d2 += d * d;
        }
        ++counters.distance_ops;
        counters.coord_ops += dims_;
        visit(d2, get<std::uint64_t>(arena_, id_base + 8 * static_cast<std::size_t>(i)));
    }
}

namespace {

// Children of an internal node with their 1-D gap to q, nearest first.
struct ChildOrder {
    std::uint32_t index;
    double lo;
    double hi;
    double gap;
};

} // namespace

template <typename Visit>
static void for_each_child(const OpTree::Internal& node, double x, double parent_lo, double parent_hi, Visit&& visit) {
    const std::size_t f = node.children.size();
    std::vector<ChildOrder> order;
    order.reserve(f);
    for (std::size_t g = 0; g < f; ++g) {
        if (node.children[g] == OpTree::kEmpty) continue;
        const double lo = std::max(parent_lo, g > 0 ? static_cast<double>(node.bounds[g - 1])
                                                    : -std::numeric_limits<double>::infinity());
        const double hi = std::min(parent_hi, g + 1 < f ? static_cast<double>(node.bounds[g])
                                                        : std::numeric_limits<double>::infinity());
        const double gap = x < lo ? lo - x : (x > hi ? x - hi : 0.0);
        order.push_back({static_cast<std::uint32_t>(g), lo, hi, gap});
    }
    std::sort(order.begin(), order.end(), [](const ChildOrder& a, const ChildOrder& b) {
        return a.gap < b.gap || (a.gap == b.gap && a.index < b.index);
    });
    for (const auto& c : order) visit(c);
}

void OpTree::search_knn(std::uint32_t node, std::span<const double> q, std::vector<double>& lo,
                        std::vector<double>& hi, std::vector<double>& gap, KBest& best, SearchCounters& counters,
                        SearchTrace* trace) const {
    ++counters.nodes_visited;
    if (is_leaf(node)) {
        scan_leaf(node, q, counters, [&](double d2, std::uint64_t id) { best.offer(d2, id); });
        return;
    }
    const Internal in = internal(node);
    const std::uint32_t dim = in.split_dim;
    const double saved_lo = lo[dim];
    const double saved_hi = hi[dim];
    const double saved_gap = gap[dim];
    for_each_child(in, q[dim], saved_lo, saved_hi, [&](const ChildOrder& c) {
        gap[dim] = c.gap;
        // Summed in coordinate order, this never exceeds the computed distance of any point inside.
        const double bound = sum_sq(gap);
        if (bound > best.bound_sq()) {
            if (trace) trace->pruned_bounds_sq.push_back(bound);
            return;
        }
        lo[dim] = c.lo;
        hi[dim] = c.hi;
        search_knn(in.children[c.index], q, lo, hi, gap, best, counters, trace);
    });
    lo[dim] = saved_lo;
    hi[dim] = saved_hi;
    gap[dim] = saved_gap;
}

void OpTree::search_range(std::uint32_t node, std::span<const double> q, std::vector<double>& lo,
                          std::vector<double>& hi, std::vector<double>& gap, double radius_sq,
                          std::vector<std::pair<double, std::uint64_t>>& out, SearchCounters& counters) const {
    ++counters.nodes_visited;
    if (is_leaf(node)) {
        scan_leaf(node, q, counters, [&](double d2, std::uint64_t id) {
            if (d2 <= radius_sq) out.emplace_back(d2, id);
        });
        return;
    }
    const Internal in = internal(node);
    const std::uint32_t dim = in.split_dim;
    const double saved_lo = lo[dim];
    const double saved_hi = hi[dim];
    const double saved_gap = gap[dim];
    for_each_child(in, q[dim], saved_lo, saved_hi, [&](const ChildOrder& c) {
        gap[dim] = c.gap;
        if (sum_sq(gap) > radius_sq) return;
        lo[dim] = c.lo;
        hi[dim] = c.hi;
        search_range(in.children[c.index], q, lo, hi, gap, radius_sq, out, counters);
    });
    lo[dim] = saved_lo;
    hi[dim] = saved_hi;
    gap[dim] = saved_gap;
}

void OpTree::knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace* trace) const {
    if (q.size() != dims_) throw DataError("optree: query dimensionality mismatch");
    if (arena_.empty()) return;
    std::vector<double> lo(dims_, -std::numeric_limits<double>::infinity());
    std::vector<double> hi(dims_, std::numeric_limits<double>::infinity());
    std::vector<double> gap(dims_, 0.0);
    search_knn(root(), q, lo, hi, gap, best, counters, trace);
}

ResultSet OpTree::knn(std::span<const double> q, std::size_t k, SearchCounters* counters) const {
    if (k < 1) throw UsageError("optree: k must be >= 1");
    KBest best(k);
    SearchCounters local;
    knn(q, best, counters ? *counters : local);
    auto rs = std::move(best).finish(DistanceSpace::subspace);
    rs.truncated = k > count_;
    return rs;
}

void OpTree::range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
                   SearchCounters& counters) const {
    if (q.size() != dims_) throw DataError("optree: query dimensionality mismatch");
    if (arena_.empty()) return;
    std::vector<double> lo(dims_, -std::numeric_limits<double>::infinity());
    std::vector<double> hi(dims_, std::numeric_limits<double>::infinity());
    std::vector<double> gap(dims_, 0.0);
    search_range(root(), q, lo, hi, gap, radius_sq, out, counters);
}

ResultSet OpTree::range(std::span<const double> q, double radius, SearchCounters* counters) const {
    std::vector<std::pair<double, std::uint64_t>> hits;
    SearchCounters local;
    const double r2 = std::isinf(radius) ? radius : radius * radius;
    range(q, r2, hits, counters ? *counters : local);
    const std::size_t found = hits.size();
    return make_result(std::move(hits), found, DistanceSpace::subspace);
}

bool OpTree::mark_deleted(std::uint64_t id) {
    std::vector<std::uint32_t> stack{root()};
    while (!stack.empty()) {
        const std::uint32_t node = stack.back();
        stack.pop_back();
        if (is_leaf(node)) {
            const std::uint32_t count = read_u32(node + 4);
            const std::uint32_t first_slot = read_u32(node + 8);
            for (std::uint32_t i = 0; i < count; ++i) {
                if (get<std::uint64_t>(arena_, node + kNodeHeader + 8 * static_cast<std::size_t>(i)) == id) {
                    const std::uint32_t slot = first_slot + i;
                    tombstones_[slot / 8] |= static_cast<std::uint8_t>(1u << (slot % 8));
                    return true;
                }
            }
            continue;
        }
        for (auto child : internal(node).children) {
            if (child != kEmpty) stack.push_back(child);
        }
    }
    return false;
}

// Image: "OPT1", u32 version, u32 n, u64 m, u32 fanout, u32 leaf_capacity,
// u32 dims_order[n], u64 arena_bytes, arena, u64 tombstone_bytes, tombstones, u32 crc.
std::vector<std::byte> OpTree::serialize() const {
    io::ByteWriter w;
    w.magic("OPT1");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(dims_));
    w.u64(count_);
    w.u32(fanout_);
    w.u32(leaf_capacity_);
    for (auto d : dims_order_) w.u32(d);
    w.u64(arena_.size());
    w.bytes(arena_);
    w.u64(tombstones_.size());
    w.bytes(std::as_bytes(std::span(tombstones_)));
    w.crc_trailer();
    return w.take();
}

OpTree OpTree::deserialize(std::span<const std::byte> image) {
    io::ByteReader r(io::checked_body(image, "OPT1", "optree"), "optree");
    r.skip(4);
    const auto version = r.u32();
    if (version != kFormatVersion) r.fail("unsupported version " + std::to_string(version));
    OpTree tree;
    tree.dims_ = r.u32();
    tree.count_ = r.u64();
    tree.fanout_ = r.u32();
    tree.leaf_capacity_ = r.u32();
    if (tree.fanout_ < 2 || tree.fanout_ > 16 || tree.leaf_capacity_ < 1) r.fail("bad tree parameters");
    if (tree.dims_ > r.remaining() / 4) r.fail("bad dimensionality");
    tree.dims_order_.resize(tree.dims_);
    for (auto& d : tree.dims_order_) {
        d = r.u32();
        if (d >= tree.dims_) r.fail("bad dims_order");
    }
    const auto arena_bytes = r.u64();
    auto arena = r.bytes(arena_bytes);
    tree.arena_.assign(arena.begin(), arena.end());
    const auto tomb_bytes = r.u64();
    if (tomb_bytes != (tree.count_ + 7) / 8) r.fail("tombstone section size mismatch");
    auto tomb = r.bytes(tomb_bytes);
    tree.tombstones_.resize(tomb_bytes);
    std::memcpy(tree.tombstones_.data(), tomb.data(), tomb_bytes);
    if (r.remaining() != 0) r.fail("unexpected bytes before checksum");
    return tree;
}

void OpTree::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

OpTree OpTree::load(const std::filesystem::path& path, io::ReadStats* stats) {
    return deserialize(io::read_file(path, stats));
}

} // namespace csvd
