#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "csvd/query.hpp"

namespace csvd::cli {

/// Runs the command line and returns the process exit code:
/// 0 success, 2 usage, 3 data, 4 numeric, 5 corrupt file.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Thread count from `flag` if set, else CSVD_THREADS, else 1.
unsigned resolve_threads(std::optional<unsigned> flag);

struct SweepConfig {
    std::vector<std::size_t> clusters{1};
    std::vector<double> nmse_targets{0.0};
    std::size_t k = 10;
    IndexOptions index;
    KMeansOptions kmeans;
    unsigned threads = 1;
};

struct SweepRow {
    std::size_t clusters = 0;
    double nmse_target = 0.0;
    double achieved_nmse = 0.0;
    std::uint64_t index_volume = 0;
    double isc = 0.0;
    RetrievalMetrics approx;
    double approx_distance_ops = 0.0;  // per-query means
    double approx_clusters_visited = 0.0;
    double approx_pages = 0.0;
    double exact_distance_ops = 0.0;
    double exact_coord_ops = 0.0;
    double exact_candidates_verified = 0.0;
    double exact_clusters_visited = 0.0;
    double exact_pages = 0.0;
    std::uint64_t exact_cost = 0;  // total coordinate operations over all queries
    bool exact_matches_scan = true;
    double wall_ms = 0.0;
    Evaluation approx_eval;
    Evaluation exact_eval;
};

/// Full cross product of cluster counts and NMSE targets. Each clustering is
/// computed once and re-truncated for every target.
std::vector<SweepRow> run_sweep(const FeatureMatrix& x, const MatrixD& queries_raw, const SweepConfig& cfg);

/// Index into `rows` of the lowest exact cost among rows with `clusters == h`.
std::size_t cost_minimum(const std::vector<SweepRow>& rows, std::size_t h);

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);
void write_sweep_table(const std::vector<SweepRow>& rows, std::ostream& out);

} // namespace csvd::cli
