#include "csvd/query.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "csvd/errors.hpp"

namespace csvd {

std::string to_string(IndexKind kind) {
    switch (kind) {
    case IndexKind::scan: return "scan";
    case IndexKind::optree: return "optree";
    case IndexKind::sdi: return "sdi";
    }
    return "unknown";
}

IndexKind parse_index_kind(const std::string& name) {
    if (name == "scan") return IndexKind::scan;
    if (name == "optree") return IndexKind::optree;
    if (name == "sdi") return IndexKind::sdi;
    throw UsageError("unknown index '" + name + "' (expected scan, optree or sdi)");
}

namespace {

class ScanSearcher final : public ClusterSearcher {
public:
    explicit ScanSearcher(const ClusterEntry& entry) : entry_(&entry) {}
    IndexKind kind() const override { return IndexKind::scan; }

    void knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace*) const override {
        scan(q, counters, [&](double d2, std::uint64_t id) { best.offer(d2, id); });
    }
    void range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
               SearchCounters& counters) const override {
        scan(q, counters, [&](double d2, std::uint64_t id) {
            if (d2 <= radius_sq) out.emplace_back(d2, id);
        });
    }

private:
    template <typename Visit>
    void scan(std::span<const double> q, SearchCounters& counters, Visit&& visit) const {
        const auto& pts = entry_->points;
        for (std::size_t i = 0; i < pts.rows(); ++i) {
            visit(squared_distance(q, pts.row(i)), entry_->ids[i]);
        }
        counters.distance_ops += pts.rows();
        counters.coord_ops += pts.rows() * pts.cols();
    }

    const ClusterEntry* entry_;
};

class OpTreeSearcher final : public ClusterSearcher {
public:
    explicit OpTreeSearcher(OpTree tree) : tree_(std::move(tree)) {}
    IndexKind kind() const override { return IndexKind::optree; }
    void knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace* trace) const override {
        tree_.knn(q, best, counters, trace);
    }
    void range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
               SearchCounters& counters) const override {
        tree_.range(q, radius_sq, out, counters);
    }
    const OpTree& tree() const { return tree_; }

private:
    OpTree tree_;
};

class SdiSearcher final : public ClusterSearcher {
public:
    explicit SdiSearcher(std::unique_ptr<SdiTree> tree) : tree_(std::move(tree)) {}
    IndexKind kind() const override { return IndexKind::sdi; }
    void knn(std::span<const double> q, KBest& best, SearchCounters& counters, SearchTrace* trace) const override {
        tree_->knn(q, best, counters, trace);
    }
    void range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
               SearchCounters& counters) const override {
        tree_->range(q, radius_sq, out, counters);
    }
    const SdiTree& tree() const { return *tree_; }

private:
    std::unique_ptr<SdiTree> tree_;
};

// SDI needs at least one dimension with variance; other clusters fall back to a scan.
bool sdi_eligible(const ClusterEntry& c) {
    double s = 0.0;
    for (std::size_t j = 0; j < c.retained; ++j) s += c.eigenvalues[j];
    return c.retained > 0 && s > 0.0;
}

std::unique_ptr<SdiTree> build_sdi_for(const ClusterEntry& c, const SdiOptions& opts) {
    MatrixD y(c.points.rows(), c.points.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) = c.points(i, j);
    }
    std::span<const double> spectrum(c.eigenvalues.data(), c.retained);
    return std::make_unique<SdiTree>(SdiTree::build(y, c.ids, spectrum, opts));
}

std::filesystem::path sibling(const std::filesystem::path& base, const char* tag, std::size_t h) {
    auto p = base;
    p += std::string(".") + tag + "." + std::to_string(h);
    return p;
}

} // namespace

CsvdIndex::CsvdIndex(CsvdModel model, const IndexOptions& opts) : model_(std::move(model)), kind_(opts.kind) {
    if (model_.clusters.empty()) throw DataError("index: model has no clusters");
    for (const auto& c : model_.clusters) {
        switch (opts.kind) {
        case IndexKind::scan:
            searchers_.push_back(std::make_unique<ScanSearcher>(c));
            break;
        case IndexKind::optree:
            searchers_.push_back(std::make_unique<OpTreeSearcher>(OpTree::build(c.points, c.ids, opts.optree)));
            break;
        case IndexKind::sdi:
            if (sdi_eligible(c)) searchers_.push_back(std::make_unique<SdiSearcher>(build_sdi_for(c, opts.sdi)));
            else searchers_.push_back(std::make_unique<ScanSearcher>(c));
            break;
        }
    }
    init_slack();
}

CsvdIndex::CsvdIndex(CsvdModel model, std::vector<OpTree> trees) : model_(std::move(model)), kind_(IndexKind::optree) {
    if (trees.size() != model_.clusters.size()) throw DataError("index: one OP-tree per cluster required");
    for (std::size_t h = 0; h < trees.size(); ++h) {
        if (trees[h].dims() != model_.clusters[h].retained || trees[h].size() != model_.clusters[h].size()) {
            throw CorruptFileError("index: OP-tree " + std::to_string(h) + " does not match its cluster");
        }
        searchers_.push_back(std::make_unique<OpTreeSearcher>(std::move(trees[h])));
    }
    init_slack();
}

CsvdIndex::CsvdIndex(CsvdModel model, std::vector<std::unique_ptr<SdiTree>> trees)
    : model_(std::move(model)), kind_(IndexKind::sdi) {
    if (trees.size() != model_.clusters.size()) throw DataError("index: one SDI slot per cluster required");
    for (std::size_t h = 0; h < trees.size(); ++h) {
        const auto& c = model_.clusters[h];
        if (!trees[h]) {
            searchers_.push_back(std::make_unique<ScanSearcher>(c));
            continue;
        }
        if (trees[h]->dims() != c.retained || trees[h]->size() != c.size()) {
            throw CorruptFileError("index: SDI tree " + std::to_string(h) + " does not match its cluster");
        }
        searchers_.push_back(std::make_unique<SdiSearcher>(std::move(trees[h])));
    }
    init_slack();
}

void CsvdIndex::init_slack() {
    slack_.clear();
    // Rounding a coordinate to float moves it by at most 2^-24 of its magnitude.
    for (const auto& c : model_.clusters) slack_.push_back(std::ldexp(c.max_point_norm(), -23) + 1e-12);
}

const OpTree* CsvdIndex::optree(std::size_t h) const {
    const auto* s = dynamic_cast<const OpTreeSearcher*>(searchers_.at(h).get());
    return s ? &s->tree() : nullptr;
}

const SdiTree* CsvdIndex::sditree(std::size_t h) const {
    const auto* s = dynamic_cast<const SdiSearcher*>(searchers_.at(h).get());
    return s ? &s->tree() : nullptr;
}

void CsvdIndex::save(const std::filesystem::path& path) const {
    save_model(model_, path);
    for (std::size_t h = 0; h < searchers_.size(); ++h) {
        if (const auto* t = optree(h)) t->save(sibling(path, "opt", h));
        if (const auto* t = sditree(h)) t->save(sibling(path, "sdi", h));
    }
}

CsvdIndex CsvdIndex::load(const std::filesystem::path& path) {
    CsvdModel model = load_model(path);
    const std::size_t h = model.clusters.size();
    if (std::filesystem::exists(sibling(path, "opt", 0))) {
        std::vector<OpTree> trees;
        for (std::size_t c = 0; c < h; ++c) trees.push_back(OpTree::load(sibling(path, "opt", c)));
        return CsvdIndex(std::move(model), std::move(trees));
    }
    bool any_sdi = false;
    std::vector<std::unique_ptr<SdiTree>> trees(h);
    for (std::size_t c = 0; c < h; ++c) {
        const auto p = sibling(path, "sdi", c);
        if (std::filesystem::exists(p)) {
            trees[c] = std::make_unique<SdiTree>(SdiTree::load(p));
            any_sdi = true;
        }
    }
    if (any_sdi) return CsvdIndex(std::move(model), std::move(trees));
    return CsvdIndex(std::move(model));
}

ResultSet knn_scan(const FeatureMatrix& x, std::span<const double> q, std::size_t k, SearchCounters* counters) {
    if (k < 1) throw UsageError("k must be >= 1");
    if (q.size() != x.cols()) throw DataError("query dimensionality does not match the data");
    KBest best(k);
    for (std::size_t i = 0; i < x.rows(); ++i) best.offer(squared_distance(q, x.data.row(i)), i);
    if (counters) {
        counters->distance_ops += x.rows();
        counters->coord_ops += x.rows() * x.cols();
    }
    auto rs = std::move(best).finish(DistanceSpace::original);
    rs.truncated = k > x.rows();
    return rs;
}

double cluster_distance(std::span<const double> q, const ClusterEntry& entry) {
    const double d = std::sqrt(squared_distance(q, std::span<const double>(entry.centroid)));
    return std::max(d - entry.radius, 0.0);
}

namespace {

struct ClusterOrder {
    std::vector<std::size_t> order;
    std::vector<double> distances;
    std::size_t primary = 0;
};

ClusterOrder order_clusters(const CsvdModel& model, std::span<const double> q, SearchCounters& counters) {
    const std::size_t h = model.clusters.size();
    ClusterOrder co;
    co.distances.resize(h);
    std::vector<double> centroid_d(h);
    for (std::size_t c = 0; c < h; ++c) {
        const auto& e = model.clusters[c];
        centroid_d[c] = std::sqrt(squared_distance(q, std::span<const double>(e.centroid)));
        co.distances[c] = std::max(centroid_d[c] - e.radius, 0.0);
    }
    counters.coord_ops += h * model.dims;
    co.primary = static_cast<std::size_t>(std::min_element(centroid_d.begin(), centroid_d.end()) - centroid_d.begin());
    co.order.push_back(co.primary);
    std::vector<std::size_t> rest;
    for (std::size_t c = 0; c < h; ++c) {
        if (c != co.primary) rest.push_back(c);
    }
    std::stable_sort(rest.begin(), rest.end(),
                     [&](std::size_t a, std::size_t b) { return co.distances[a] < co.distances[b]; });
    co.order.insert(co.order.end(), rest.begin(), rest.end());
    return co;
}

std::vector<double> project_counted(std::span<const double> q, const CsvdModel& model, std::size_t h,
                                    SearchCounters& counters) {
    counters.coord_ops += model.dims * model.clusters[h].retained;
    return project_studentized(q, model, h);
}

void check_query(const CsvdModel& model, std::span<const double> q) {
    if (q.size() != model.dims) {
        throw DataError("query has " + std::to_string(q.size()) + " features, model expects " +
                        std::to_string(model.dims));
    }
}

} // namespace

ResultSet knn_approx_studentized(const CsvdIndex& index, std::span<const double> q, std::size_t k,
                                 SearchCounters* counters, ApproxTrace* trace) {
    if (k < 1) throw UsageError("k must be >= 1");
    const auto& model = index.model();
    check_query(model, q);
    SearchCounters local;
    SearchCounters& cnt = counters ? *counters : local;

    const ClusterOrder co = order_clusters(model, q, cnt);
    if (trace) {
        trace->cluster_distances = co.distances;
        trace->visited.assign(co.distances.size(), 0);
        trace->primary = co.primary;
    }
    KBest best(k);
    for (std::size_t i = 0; i < co.order.size(); ++i) {
        const std::size_t h = co.order[i];
        if (i > 0 && co.distances[h] > std::sqrt(best.bound_sq())) break;
        const auto qh = project_counted(q, model, h, cnt);
        index.searcher(h).knn(qh, best, cnt, nullptr);
        ++cnt.clusters_visited;
        if (trace) trace->visited[h] = 1;
    }
    auto rs = std::move(best).finish(DistanceSpace::subspace);
    rs.truncated = k > model.rows;
    if (trace) trace->final_d_max = rs.d_max();
    return rs;
}

ResultSet knn_approx(const CsvdIndex& index, std::span<const double> q_raw, std::size_t k, SearchCounters* counters,
                     ApproxTrace* trace) {
    const auto& model = index.model();
    check_query(model, q_raw);
    const auto q = studentize_vector(q_raw, model.col_means, model.col_stds);
    return knn_approx_studentized(index, q, k, counters, trace);
}

namespace {

// Visits clusters whose hypersphere may hold points within `radius`.
void collect_range(const CsvdIndex& index, std::span<const double> q, double radius, std::size_t h,
                   std::vector<std::pair<double, std::uint64_t>>& out, SearchCounters& cnt) {
    const auto& model = index.model();
    const auto qh = project_counted(q, model, h, cnt);
    const double r = radius + index.storage_slack(h);
    index.searcher(h).range(qh, r * r, out, cnt);
    ++cnt.clusters_visited;
}

bool cluster_in_range(const CsvdModel& model, std::span<const double> q, std::size_t h, double radius) {
    return cluster_distance(q, model.clusters[h]) <= radius * (1.0 + 1e-12) + 1e-12;
}

} // namespace

ResultSet range_query_approx_studentized(const CsvdIndex& index, std::span<const double> q, double radius,
                                         SearchCounters* counters) {
    if (radius < 0.0) throw UsageError("range radius must be >= 0");
    const auto& model = index.model();
    check_query(model, q);
    SearchCounters local;
    SearchCounters& cnt = counters ? *counters : local;
    std::vector<std::pair<double, std::uint64_t>> hits;
    for (std::size_t h = 0; h < model.clusters.size(); ++h) {
        if (cluster_in_range(model, q, h, radius)) collect_range(index, q, radius, h, hits, cnt);
    }
    cnt.coord_ops += model.clusters.size() * model.dims;
    const std::size_t found = hits.size();
    return make_result(std::move(hits), found, DistanceSpace::subspace);
}

ResultSet range_query_approx(const CsvdIndex& index, std::span<const double> q_raw, double radius,
                             SearchCounters* counters) {
    const auto& model = index.model();
    check_query(model, q_raw);
    const auto q = studentize_vector(q_raw, model.col_means, model.col_stds);
    return range_query_approx_studentized(index, q, radius, counters);
}

ResultSet knn_exact_studentized(const CsvdIndex& index, const FeatureMatrix& x, std::span<const double> q,
                                std::size_t k, const ExactOptions& opts, SearchCounters* counters) {
    const auto& model = index.model();
    if (x.rows() != model.rows || x.cols() != model.dims) throw DataError("exact query: data does not match model");
    SearchCounters local;
    SearchCounters& cnt = counters ? *counters : local;
    const std::size_t n = model.dims;

    std::unordered_map<std::uint64_t, double> verified;
    auto verify = [&](std::uint64_t id) {
        auto [it, inserted] = verified.try_emplace(id, 0.0);
        if (inserted) {
            it->second = squared_distance(q, x.data.row(id));
            ++cnt.distance_ops;
            cnt.coord_ops += n;
        }
        return it->second;
    };

    // (1) k-NN in the reduced subspaces.
    const ResultSet approx = knn_approx_studentized(index, q, k, &cnt);
    // (2) Largest true distance among them.
    double d_max_sq = 0.0;
    for (const auto& e : approx.entries) d_max_sq = std::max(d_max_sq, verify(e.id));
    const std::size_t first_round = verified.size();

    if (!opts.shrink_radius) {
        // (3) Range query at that radius; no false dismissals in the subspace.
        const ResultSet cand = range_query_approx_studentized(index, q, std::sqrt(d_max_sq), &cnt);
        cnt.candidates_verified += cand.size();
        // (4) True distances for every candidate, then rank.
        for (const auto& e : cand.entries) verify(e.id);
    } else {
        KBest best(k);
        for (const auto& [id, d2] : verified) best.offer(d2, id);
        ClusterOrder co = order_clusters(model, q, cnt);
        for (std::size_t h : co.order) {
            const double radius = std::sqrt(best.bound_sq());
            if (!cluster_in_range(model, q, h, radius)) continue;
            std::vector<std::pair<double, std::uint64_t>> hits;
            collect_range(index, q, radius, h, hits, cnt);
            cnt.candidates_verified += hits.size();
            for (const auto& [sub_d2, id] : hits) {
                // Ids already in `verified` were offered once; a repeat would take a second slot.
                if (verified.contains(id)) continue;
                best.offer(verify(id), id);
            }
        }
    }
    cnt.extra_verifications += verified.size() - first_round;

    std::vector<std::pair<double, std::uint64_t>> ranked;
    ranked.reserve(verified.size());
    for (const auto& [id, d2] : verified) ranked.emplace_back(d2, id);
    std::sort(ranked.begin(), ranked.end());
    if (ranked.size() > k) ranked.resize(k);
    auto rs = make_result(std::move(ranked), k, DistanceSpace::original);
    rs.truncated = k > model.rows;
    return rs;
}

ResultSet knn_exact(const CsvdIndex& index, const FeatureMatrix& x, std::span<const double> q_raw, std::size_t k,
                    const ExactOptions& opts, SearchCounters* counters) {
    const auto& model = index.model();
    check_query(model, q_raw);
    const auto q = studentize_vector(q_raw, model.col_means, model.col_stds);
    return knn_exact_studentized(index, x, q, k, opts, counters);
}

double k_star(std::size_t k, double recall, double precision) {
    return precision > 0.0 ? static_cast<double>(k) * recall / precision : 0.0;
}

RetrievalMetrics summarize(std::span<const QueryRecord> records, std::size_t k) {
    RetrievalMetrics m;
    m.queries_evaluated = records.size();
    if (records.empty()) return m;
    double p = 0.0;
    double r = 0.0;
    for (const auto& rec : records) {
        std::unordered_set<std::uint64_t> truth(rec.truth.begin(), rec.truth.end());
        std::size_t hit = 0;
        for (auto id : rec.retrieved) hit += truth.count(id);
        if (!rec.retrieved.empty()) p += static_cast<double>(hit) / static_cast<double>(rec.retrieved.size());
        if (!rec.truth.empty()) r += static_cast<double>(hit) / static_cast<double>(rec.truth.size());
    }
    m.precision = p / static_cast<double>(records.size());
    m.recall = r / static_cast<double>(records.size());
    m.k_star = k_star(k, m.recall, m.precision);
    return m;
}

double Evaluation::mean(std::uint64_t SearchCounters::*field) const {
    if (records.empty()) return 0.0;
    return static_cast<double>(totals.*field) / static_cast<double>(records.size());
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) fn(i);
        });
    }
}

} // namespace

Evaluation evaluate(const CsvdIndex& index, const FeatureMatrix& x, const MatrixD& queries_raw,
                    const EvalOptions& opts) {
    if (opts.k < 1) throw UsageError("k must be >= 1");
    const auto& model = index.model();
    if (queries_raw.rows() > 0 && queries_raw.cols() != model.dims) {
        throw DataError("queries have " + std::to_string(queries_raw.cols()) + " features, model expects " +
                        std::to_string(model.dims));
    }
    Evaluation ev;
    ev.records.resize(queries_raw.rows());
    const std::size_t b = opts.candidates == 0 ? opts.k : opts.candidates;
    const auto start = std::chrono::steady_clock::now();

    parallel_for(queries_raw.rows(), opts.threads, [&](std::size_t i) {
        auto& rec = ev.records[i];
        const auto q = studentize_vector(queries_raw.row(i), model.col_means, model.col_stds);
        rec.truth = knn_scan(x, q, opts.k).ids();
        const auto t0 = std::chrono::steady_clock::now();
        const ResultSet rs = opts.mode == EvalMode::approximate
                                 ? knn_approx_studentized(index, q, b, &rec.counters)
                                 : knn_exact_studentized(index, x, q, opts.k, opts.exact, &rec.counters);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        rec.retrieved = rs.ids();
        rec.distances = rs.distances();
    });

    ev.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    for (const auto& rec : ev.records) ev.totals += rec.counters;
    ev.metrics = summarize(ev.records, opts.k);
    return ev;
}

std::size_t pilot_candidates(const CsvdIndex& index, const FeatureMatrix& x, const MatrixD& queries_raw,
                             std::size_t k, double target_recall, unsigned threads) {
    const std::size_t m = index.model().rows;
    auto recall_at = [&](std::size_t b) {
        EvalOptions o;
        o.k = k;
        o.candidates = b;
        o.threads = threads;
        return evaluate(index, x, queries_raw, o).metrics.recall;
    };
    std::size_t lo = k;
    if (recall_at(lo) >= target_recall) return lo;
    std::size_t hi = k;
    while (hi < m) {
        lo = hi;
        hi = std::min(m, hi * 2);
        if (recall_at(hi) >= target_recall) break;
    }
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (recall_at(mid) >= target_recall) hi = mid;
        else lo = mid;
    }
    return hi;
}

MatrixD sample_queries(const FeatureMatrix& x, std::size_t count, double noise, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, x.rows() - 1);
    std::normal_distribution<double> jitter(0.0, noise);
    MatrixD out(count, x.cols());
    for (std::size_t i = 0; i < count; ++i) {
        auto src = x.data.row(pick(rng));
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double z = src[j] + (noise > 0.0 ? jitter(rng) : 0.0);
            out(i, j) = x.col_means[j] + z * x.col_stds[j];
        }
    }
    return out;
}

CsvdModel build_for_recall(const RotatedClusters& rc, const FeatureMatrix& x, double target_recall,
                           const RecallBuildOptions& opts) {
    if (!(target_recall > 0.0) || target_recall > 1.0) throw UsageError("recall target must be in (0, 1]");
    const MatrixD queries = sample_queries(x, opts.sample_queries, opts.query_noise, opts.seed);
    static constexpr double kGrid[] = {0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02, 0.01, 0.005};
    const ObjectiveSpec tag{Objective::recall_target, target_recall};
    for (double nmse : kGrid) {
        CsvdModel model = finalize(rc, {Objective::nmse_target, nmse});
        CsvdIndex index(std::move(model), opts.index);
        EvalOptions eo;
        eo.k = opts.k;
        eo.threads = opts.threads;
        if (evaluate(index, x, queries, eo).metrics.recall >= target_recall) {
            CsvdModel chosen = index.model();
            chosen.objective = tag;
            return chosen;
        }
    }
    // No lossy target reached the goal; keep every dimension.
    CsvdModel full = finalize(rc, {Objective::nmse_target, 0.0});
    full.objective = tag;
    return full;
}

} // namespace csvd
