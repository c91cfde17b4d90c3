#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "csvd/csvd.hpp"
#include "csvd/linalg.hpp"
#include "csvd/neighbors.hpp"
#include "csvd/optree.hpp"
#include "csvd/sditree.hpp"

namespace csvd {

enum class IndexKind : std::uint8_t { scan, optree, sdi };

std::string to_string(IndexKind kind);
IndexKind parse_index_kind(const std::string& name);

/// Within-cluster search over one cluster's projected points.
class ClusterSearcher {
public:
    virtual ~ClusterSearcher() = default;
    virtual IndexKind kind() const = 0;
    virtual void knn(std::span<const double> q, KBest& best, SearchCounters& counters,
                     SearchTrace* trace) const = 0;
    virtual void range(std::span<const double> q, double radius_sq, std::vector<std::pair<double, std::uint64_t>>& out,
                       SearchCounters& counters) const = 0;
};

struct IndexOptions {
    IndexKind kind = IndexKind::scan;
    OpTreeOptions optree;
    SdiOptions sdi;
};

/// A CSVD model plus one within-cluster searcher per cluster. Immutable after
/// construction and safe to share across query threads.
class CsvdIndex {
public:
    explicit CsvdIndex(CsvdModel model, const IndexOptions& opts = {});
    CsvdIndex(CsvdModel model, std::vector<OpTree> trees);
    CsvdIndex(CsvdModel model, std::vector<std::unique_ptr<SdiTree>> trees);

    CsvdIndex(CsvdIndex&&) noexcept = default;
    CsvdIndex& operator=(CsvdIndex&&) noexcept = default;

    const CsvdModel& model() const noexcept { return model_; }
    IndexKind kind() const noexcept { return kind_; }
    const ClusterSearcher& searcher(std::size_t h) const { return *searchers_.at(h); }
    const OpTree* optree(std::size_t h) const;
    const SdiTree* sditree(std::size_t h) const;

    /// Upper bound on how far 32-bit storage can move a subspace distance in cluster h.
    double storage_slack(std::size_t h) const { return slack_.at(h); }

    /// Writes `path` (model) and, for tree indexes, `path.opt.<h>` / `path.sdi.<h>`.
    void save(const std::filesystem::path& path) const;
    /// Loads a model and whichever per-cluster index files sit next to it.
    static CsvdIndex load(const std::filesystem::path& path);

private:
    void init_slack();

    CsvdModel model_;
    IndexKind kind_ = IndexKind::scan;
    std::vector<std::unique_ptr<ClusterSearcher>> searchers_;
    std::vector<double> slack_;
};

/// Sequential scan over the studentized data; the ground truth for every test.
ResultSet knn_scan(const FeatureMatrix& x, std::span<const double> q, std::size_t k,
                   SearchCounters* counters = nullptr);

/// max(D(q, centroid) - radius, 0) in the full studentized space.
double cluster_distance(std::span<const double> q, const ClusterEntry& entry);

struct ApproxTrace {
    std::vector<double> cluster_distances;
    std::vector<std::uint8_t> visited;
    std::size_t primary = 0;
    double final_d_max = 0.0;
};

/// Multi-cluster branch-and-bound k-NN in the reduced subspaces.
ResultSet knn_approx(const CsvdIndex& index, std::span<const double> q_raw, std::size_t k,
                     SearchCounters* counters = nullptr, ApproxTrace* trace = nullptr);
ResultSet knn_approx_studentized(const CsvdIndex& index, std::span<const double> q, std::size_t k,
                                 SearchCounters* counters = nullptr, ApproxTrace* trace = nullptr);

/// Every stored point whose subspace distance is within `radius` (plus the
/// storage slack), pruning clusters whose hypersphere lies farther away.
ResultSet range_query_approx(const CsvdIndex& index, std::span<const double> q_raw, double radius,
                             SearchCounters* counters = nullptr);
ResultSet range_query_approx_studentized(const CsvdIndex& index, std::span<const double> q, double radius,
                                         SearchCounters* counters = nullptr);

struct ExactOptions {
    // Shrink the range radius as verified neighbors improve, cluster by cluster.
    bool shrink_radius = false;
};

/// Exact k-NN: approximate k-NN, true distances of those k, subspace range
/// query at the largest of them, then re-rank all candidates on `x`.
ResultSet knn_exact(const CsvdIndex& index, const FeatureMatrix& x, std::span<const double> q_raw, std::size_t k,
                    const ExactOptions& opts = {}, SearchCounters* counters = nullptr);
ResultSet knn_exact_studentized(const CsvdIndex& index, const FeatureMatrix& x, std::span<const double> q,
                                std::size_t k, const ExactOptions& opts = {}, SearchCounters* counters = nullptr);

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalMode : std::uint8_t { approximate, exact };

struct RetrievalMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double k_star = 0.0;
    std::size_t queries_evaluated = 0;
};

/// k * R / P; zero when precision is zero.
double k_star(std::size_t k, double recall, double precision);

struct QueryRecord {
    std::vector<std::uint64_t> truth;      // A(q)
    std::vector<std::uint64_t> retrieved;  // B(q)
    std::vector<double> distances;
    SearchCounters counters;
    double wall_ms = 0.0;
};

/// Precision/recall/K* from raw per-query records.
RetrievalMetrics summarize(std::span<const QueryRecord> records, std::size_t k);

struct EvalOptions {
    EvalMode mode = EvalMode::approximate;
    std::size_t k = 10;
    std::size_t candidates = 0;  // |B(q)| in approximate mode; 0 means k
    unsigned threads = 1;
    ExactOptions exact;
};

struct Evaluation {
    RetrievalMetrics metrics;
    SearchCounters totals;
    double wall_ms = 0.0;
    std::vector<QueryRecord> records;

    double mean(std::uint64_t SearchCounters::*field) const;
};

Evaluation evaluate(const CsvdIndex& index, const FeatureMatrix& x, const MatrixD& queries_raw,
                    const EvalOptions& opts);

/// Smallest candidate count whose approximate recall reaches `target_recall`
/// (the K* sizing rule), searched by doubling then bisection.
std::size_t pilot_candidates(const CsvdIndex& index, const FeatureMatrix& x, const MatrixD& queries_raw,
                             std::size_t k, double target_recall, unsigned threads = 1);

struct RecallBuildOptions {
    std::size_t sample_queries = 200;
    std::size_t k = 20;
    std::uint64_t seed = 7;
    double query_noise = 0.1;  // studentized units
    IndexOptions index;
    unsigned threads = 1;
};

/// Recall objective: tries NMSE targets from coarse to fine and keeps the
/// first allocation whose measured recall on a sampled query set meets the target.
CsvdModel build_for_recall(const RotatedClusters& rc, const FeatureMatrix& x, double target_recall,
                           const RecallBuildOptions& opts = {});

/// Sample rows of `x`, perturb them, and map back to raw feature units.
MatrixD sample_queries(const FeatureMatrix& x, std::size_t count, double noise, std::uint64_t seed);

} // namespace csvd
