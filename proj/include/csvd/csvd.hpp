#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csvd/clustering.hpp"
#include "csvd/linalg.hpp"
#include "csvd/matrix.hpp"

namespace csvd {

enum class Objective : std::uint8_t {
    nmse_target = 0,
    volume_target = 1,
    recall_target = 2,
};

struct ObjectiveSpec {
    Objective kind = Objective::nmse_target;
    double target = 0.0;
};

std::string to_string(Objective o);
Objective parse_objective(const std::string& name);

/// One cluster of the index: hypersphere summary, local eigenbasis truncated to
/// `retained` columns, and member points in that rotated subspace.
struct ClusterEntry {
    std::vector<double> centroid;     // N, studentized space
    double radius = 0.0;
    std::vector<double> eigenvalues;  // full spectrum (N), nonincreasing
    std::size_t retained = 0;         // p_h
    MatrixD basis;                    // N x p_h
    std::vector<std::uint64_t> ids;   // m_h original row ids
    MatrixF points;                   // m_h x p_h rotated coordinates
    std::vector<double> point_norms;  // squared norms of `points` rows

    std::size_t size() const noexcept { return ids.size(); }
    double max_point_norm() const;
    void recompute_point_norms();
};

struct CsvdModel {
    std::size_t dims = 0;  // N
    std::size_t rows = 0;  // M
    std::vector<double> col_means;
    std::vector<double> col_stds;
    std::vector<ClusterEntry> clusters;
    ObjectiveSpec objective;
    double achieved_nmse = 0.0;
    std::uint64_t index_volume = 0;

    std::vector<std::size_t> retained() const;
    std::vector<std::size_t> sizes() const;
};

/// Full-precision intermediate: every cluster rotated into its own
/// eigenframe with nothing discarded yet. Allocation is cheap to rerun
/// on it for many objectives.
struct RotatedCluster {
    std::vector<double> centroid;
    double radius = 0.0;
    EigenSystem eigen;
    std::vector<std::uint64_t> ids;
    MatrixD rotated;  // m_h x N
};

struct RotatedClusters {
    std::size_t dims = 0;
    std::size_t rows = 0;
    std::vector<double> col_means;
    std::vector<double> col_stds;
    std::vector<RotatedCluster> clusters;
    Partition partition;

    std::vector<std::vector<double>> spectra() const;
    std::vector<std::size_t> sizes() const;
};

RotatedClusters rotate_clusters(const FeatureMatrix& x, const Partition& partition);
RotatedClusters rotate_clusters(const FeatureMatrix& x, std::size_t h, const KMeansOptions& opts = {});

struct Allocation {
    std::vector<std::size_t> retained;
    double nmse = 0.0;
    std::uint64_t volume = 0;
    std::size_t discarded = 0;
};

/// Global dimension allocation: (lambda * m_h) products sorted ascending are
/// discarded from the head until the objective is met. Each spectrum must be
/// nonincreasing and of equal length N. recall_target is handled by
/// build_for_recall in the query layer and is rejected here.
Allocation allocate_dimensions(std::span<const std::vector<double>> spectra, std::span<const std::size_t> sizes,
                               const ObjectiveSpec& objective);

std::uint64_t index_volume(std::size_t dims, std::span<const std::size_t> retained, std::span<const std::size_t> sizes);
std::uint64_t index_volume(const CsvdModel& model);

/// Clustered NMSE from the stored spectra.
double nmse_clustered(const CsvdModel& model);
double nmse_clustered(std::span<const std::vector<double>> spectra, std::span<const std::size_t> sizes,
                      std::span<const std::size_t> retained);
/// Clustered NMSE as discarded energy of the full-precision rotated coordinates.
double nmse_clustered_residual(const RotatedClusters& rc, std::span<const std::size_t> retained);
/// Reconstruction error of the stored 32-bit points against the studentized data.
double nmse_clustered_residual(const CsvdModel& model, const FeatureMatrix& x);

/// Truncates every cluster to `retained` dimensions and stores 32-bit points.
CsvdModel truncate(const RotatedClusters& rc, std::span<const std::size_t> retained, const ObjectiveSpec& objective);
CsvdModel finalize(const RotatedClusters& rc, const ObjectiveSpec& objective);

CsvdModel build_csvd(const FeatureMatrix& x, std::size_t h, const ObjectiveSpec& objective,
                     const KMeansOptions& opts = {});

/// Raw query -> studentized -> centered on cluster h -> rotated and truncated.
std::vector<double> project_query(std::span<const double> q_raw, const CsvdModel& model, std::size_t h);
std::vector<double> project_studentized(std::span<const double> q, const CsvdModel& model, std::size_t h);

std::vector<std::byte> serialize_model(const CsvdModel& model);
CsvdModel deserialize_model(std::span<const std::byte> bytes);
void save_model(const CsvdModel& model, const std::filesystem::path& path);
CsvdModel load_model(const std::filesystem::path& path);

} // namespace csvd
