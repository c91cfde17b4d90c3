#include "csvd/csvd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "csvd/binary_io.hpp"
#include "csvd/errors.hpp"

namespace csvd {

namespace {
constexpr std::uint32_t kModelFormat = 1;
}

std::string to_string(Objective o) {
    switch (o) {
    case Objective::nmse_target: return "nmse";
    case Objective::volume_target: return "volume";
    case Objective::recall_target: return "recall";
    }
    return "unknown";
}

Objective parse_objective(const std::string& name) {
    if (name == "nmse") return Objective::nmse_target;
    if (name == "volume") return Objective::volume_target;
    if (name == "recall") return Objective::recall_target;
    throw UsageError("unknown objective '" + name + "' (expected nmse, volume or recall)");
}

double ClusterEntry::max_point_norm() const {
    double worst = 0.0;
    for (double v : point_norms) worst = std::max(worst, v);
    return std::sqrt(worst);
}

void ClusterEntry::recompute_point_norms() {
    point_norms.assign(points.rows(), 0.0);
    for (std::size_t i = 0; i < points.rows(); ++i) {
        auto r = points.row(i);
        point_norms[i] = dot(r, r);
    }
}

std::vector<std::size_t> CsvdModel::retained() const {
    std::vector<std::size_t> out;
    for (const auto& c : clusters) out.push_back(c.retained);
    return out;
}

std::vector<std::size_t> CsvdModel::sizes() const {
    std::vector<std::size_t> out;
    for (const auto& c : clusters) out.push_back(c.size());
    return out;
}

std::vector<std::vector<double>> RotatedClusters::spectra() const {
    std::vector<std::vector<double>> out;
    for (const auto& c : clusters) out.push_back(c.eigen.eigenvalues);
    return out;
}

std::vector<std::size_t> RotatedClusters::sizes() const {
    std::vector<std::size_t> out;
    for (const auto& c : clusters) out.push_back(c.ids.size());
    return out;
}

RotatedClusters rotate_clusters(const FeatureMatrix& x, const Partition& partition) {
    const std::size_t n = x.cols();
    const std::size_t h = partition.clusters();
    RotatedClusters rc;
    rc.dims = n;
    rc.rows = x.rows();
    rc.col_means = x.col_means;
    rc.col_stds = x.col_stds;
    rc.partition = partition;
    rc.clusters.resize(h);

    std::vector<std::vector<std::uint64_t>> members(h);
    for (std::size_t i = 0; i < x.rows(); ++i) members[partition.assignments[i]].push_back(i);

    for (std::size_t c = 0; c < h; ++c) {
        auto& out = rc.clusters[c];
        auto mu = partition.centroids.row(c);
        out.centroid.assign(mu.begin(), mu.end());
        out.radius = partition.radii[c];
        out.ids = std::move(members[c]);

        MatrixD centered(out.ids.size(), n);
        for (std::size_t r = 0; r < out.ids.size(); ++r) {
            auto src = x.data.row(out.ids[r]);
            auto dst = centered.row(r);
            for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] - mu[j];
        }
        const std::vector<double> origin(n, 0.0);
        // Covariance scaled by 1/m_h.
        out.eigen = eigendecompose(covariance(centered, origin));
        out.rotated = rotate(centered, out.eigen.eigenvectors);
    }
    return rc;
}

RotatedClusters rotate_clusters(const FeatureMatrix& x, std::size_t h, const KMeansOptions& opts) {
    return rotate_clusters(x, kmeans(x.data, h, opts));
}

std::uint64_t index_volume(std::size_t dims, std::span<const std::size_t> retained, std::span<const std::size_t> sizes) {
    const std::uint64_t n = dims;
    std::uint64_t v = n * retained.size();
    for (std::size_t c = 0; c < retained.size(); ++c) v += n * retained[c] + sizes[c] * retained[c];
    return v;
}

std::uint64_t index_volume(const CsvdModel& model) {
    const auto p = model.retained();
    const auto m = model.sizes();
    return index_volume(model.dims, p, m);
}

double nmse_clustered(std::span<const std::vector<double>> spectra, std::span<const std::size_t> sizes,
                      std::span<const std::size_t> retained) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t c = 0; c < spectra.size(); ++c) {
        double tail = 0.0;
        double all = 0.0;
        for (std::size_t j = 0; j < spectra[c].size(); ++j) {
            all += spectra[c][j];
            if (j >= retained[c]) tail += spectra[c][j];
        }
        const double m = static_cast<double>(sizes[c]);
        num += m * tail;
        den += m * all;
    }
    if (!(den > 0.0)) throw NumericError("nmse: zero total variance");
    return num / den;
}

double nmse_clustered(const CsvdModel& model) {
    std::vector<std::vector<double>> spectra;
    for (const auto& c : model.clusters) spectra.push_back(c.eigenvalues);
    const auto m = model.sizes();
    const auto p = model.retained();
    return nmse_clustered(spectra, m, p);
}

double nmse_clustered_residual(const RotatedClusters& rc, std::span<const std::size_t> retained) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t c = 0; c < rc.clusters.size(); ++c) {
        const auto& y = rc.clusters[c].rotated;
        for (std::size_t i = 0; i < y.rows(); ++i) {
            auto r = y.row(i);
            for (std::size_t j = 0; j < r.size(); ++j) {
                const double e = r[j] * r[j];
                den += e;
                if (j >= retained[c]) num += e;
            }
        }
    }
    if (!(den > 0.0)) throw NumericError("nmse: zero total energy");
    return num / den;
}

double nmse_clustered_residual(const CsvdModel& model, const FeatureMatrix& x) {
    // Reconstruction error of the stored 32-bit points: ||(x - mu) - B y||^2.
    const std::size_t n = model.dims;
    double num = 0.0;
    double den = 0.0;
    std::vector<double> r(n);
    for (const auto& c : model.clusters) {
        for (std::size_t i = 0; i < c.ids.size(); ++i) {
            const auto xr = x.data.row(c.ids[i]);
            for (std::size_t j = 0; j < n; ++j) r[j] = xr[j] - c.centroid[j];
            for (std::size_t j = 0; j < n; ++j) den += r[j] * r[j];
            for (std::size_t k = 0; k < c.retained; ++k) {
                const double y = c.points(i, k);
                for (std::size_t j = 0; j < n; ++j) r[j] -= c.basis(j, k) * y;
            }
            for (std::size_t j = 0; j < n; ++j) num += r[j] * r[j];
        }
    }
    if (!(den > 0.0)) throw NumericError("nmse: zero total energy");
    return num / den;
}

Allocation allocate_dimensions(std::span<const std::vector<double>> spectra, std::span<const std::size_t> sizes,
                               const ObjectiveSpec& objective) {
    if (spectra.empty()) throw DataError("allocate_dimensions: no clusters");
    if (spectra.size() != sizes.size()) throw DataError("allocate_dimensions: spectra/sizes mismatch");
    const std::size_t n = spectra.front().size();
    for (const auto& s : spectra) {
        if (s.size() != n) throw DataError("allocate_dimensions: spectra differ in length");
        for (std::size_t j = 1; j < s.size(); ++j) {
            if (s[j] > s[j - 1]) throw DataError("allocate_dimensions: spectrum not sorted nonincreasing");
        }
    }
    if (objective.kind == Objective::recall_target) {
        throw UsageError("recall objective needs a validation query set; use build_for_recall");
    }

    struct Candidate {
        double weight;
        std::size_t cluster;
        std::size_t dim;
    };
    std::vector<Candidate> list;
    list.reserve(spectra.size() * n);
    double total = 0.0;
    for (std::size_t c = 0; c < spectra.size(); ++c) {
        for (std::size_t j = 0; j < n; ++j) {
            const double w = spectra[c][j] * static_cast<double>(sizes[c]);
            list.push_back({w, c, j});
            total += w;
        }
    }
    // Within a cluster, equal weights are taken from the highest dimension first,
    // so each discard removes the currently last retained dimension.
    std::sort(list.begin(), list.end(), [](const Candidate& a, const Candidate& b) {
        return std::tie(a.weight, a.cluster, b.dim) < std::tie(b.weight, b.cluster, a.dim);
    });

    Allocation out;
    out.retained.assign(spectra.size(), n);
    out.volume = index_volume(n, out.retained, sizes);
    double discarded = 0.0;

    if (objective.kind == Objective::nmse_target) {
        if (!(total > 0.0)) throw NumericError("allocate_dimensions: zero total variance");
        if (objective.target > 0.0) {
            const double budget = objective.target * total;
            for (const auto& cand : list) {
                if (discarded + cand.weight > budget) break;
                discarded += cand.weight;
                --out.retained[cand.cluster];
                out.volume -= n + sizes[cand.cluster];
                ++out.discarded;
            }
        }
    } else {
        const std::uint64_t floor_volume = static_cast<std::uint64_t>(n) * spectra.size();
        if (objective.target < static_cast<double>(floor_volume)) {
            throw UsageError("volume target " + std::to_string(objective.target) +
                             " is below the centroid overhead N*H = " + std::to_string(floor_volume));
        }
        for (const auto& cand : list) {
            if (static_cast<double>(out.volume) <= objective.target) break;
            discarded += cand.weight;
            --out.retained[cand.cluster];
            out.volume -= n + sizes[cand.cluster];
            ++out.discarded;
        }
    }
    out.nmse = total > 0.0 ? discarded / total : 0.0;
    return out;
}

CsvdModel truncate(const RotatedClusters& rc, std::span<const std::size_t> retained, const ObjectiveSpec& objective) {
    const std::size_t n = rc.dims;
    CsvdModel model;
    model.dims = n;
    model.rows = rc.rows;
    model.col_means = rc.col_means;
    model.col_stds = rc.col_stds;
    model.objective = objective;
    model.clusters.resize(rc.clusters.size());
    for (std::size_t c = 0; c < rc.clusters.size(); ++c) {
        const auto& src = rc.clusters[c];
        auto& dst = model.clusters[c];
        const std::size_t p = retained[c];
        if (p > n) throw DataError("truncate: retained count exceeds dimensionality");
        dst.centroid = src.centroid;
        dst.radius = src.radius;
        dst.eigenvalues = src.eigen.eigenvalues;
        dst.retained = p;
        dst.ids = src.ids;
        dst.basis = MatrixD(n, p);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < p; ++j) dst.basis(i, j) = src.eigen.eigenvectors(i, j);
        }
        dst.points = MatrixF(src.ids.size(), p);
        for (std::size_t i = 0; i < src.ids.size(); ++i) {
            for (std::size_t j = 0; j < p; ++j) dst.points(i, j) = static_cast<float>(src.rotated(i, j));
        }
        dst.recompute_point_norms();
    }
    model.achieved_nmse = nmse_clustered(model);
    model.index_volume = index_volume(model);
    return model;
}

CsvdModel finalize(const RotatedClusters& rc, const ObjectiveSpec& objective) {
    const auto spectra = rc.spectra();
    const auto sizes = rc.sizes();
    const Allocation alloc = allocate_dimensions(spectra, sizes, objective);
    return truncate(rc, alloc.retained, objective);
}

CsvdModel build_csvd(const FeatureMatrix& x, std::size_t h, const ObjectiveSpec& objective, const KMeansOptions& opts) {
    return finalize(rotate_clusters(x, h, opts), objective);
}

std::vector<double> project_studentized(std::span<const double> q, const CsvdModel& model, std::size_t h) {
    if (q.size() != model.dims) {
        throw DataError("query has " + std::to_string(q.size()) + " features, model expects " +
                        std::to_string(model.dims));
    }
    const auto& c = model.clusters.at(h);
    std::vector<double> centered(model.dims);
    for (std::size_t j = 0; j < model.dims; ++j) centered[j] = q[j] - c.centroid[j];
    std::vector<double> out(c.retained, 0.0);
    for (std::size_t j = 0; j < model.dims; ++j) {
        const double v = centered[j];
        if (v == 0.0) continue;
        auto b = c.basis.row(j);
        for (std::size_t k = 0; k < c.retained; ++k) out[k] += v * b[k];
    }
    return out;
}

std::vector<double> project_query(std::span<const double> q_raw, const CsvdModel& model, std::size_t h) {
    if (q_raw.size() != model.dims) {
        throw DataError("query has " + std::to_string(q_raw.size()) + " features, model expects " +
                        std::to_string(model.dims));
    }
    const auto q = studentize_vector(q_raw, model.col_means, model.col_stds);
    return project_studentized(q, model, h);
}

std::vector<std::byte> serialize_model(const CsvdModel& model) {
    io::ByteWriter w;
    w.magic("CSVD");
    w.u32(kModelFormat);
    w.u64(model.rows);
    w.u32(static_cast<std::uint32_t>(model.dims));
    w.u32(static_cast<std::uint32_t>(model.clusters.size()));
    w.u8(static_cast<std::uint8_t>(model.objective.kind));
    w.f64(model.objective.target);
    w.f64s(model.col_means);
    w.f64s(model.col_stds);
    for (const auto& c : model.clusters) {
        w.u64(c.ids.size());
        w.u32(static_cast<std::uint32_t>(c.retained));
        w.f64s(c.centroid);
        w.f64(c.radius);
        w.f64s(c.eigenvalues);
        w.f64s(c.basis.data());
        for (auto id : c.ids) w.u64(id);
        w.f32s(c.points.data());
    }
    w.crc_trailer();
    return w.take();
}

CsvdModel deserialize_model(std::span<const std::byte> bytes) {
    io::ByteReader r(io::checked_body(bytes, "CSVD", "model"), "model");
    r.skip(4);
    const auto format = r.u32();
    if (format != kModelFormat) r.fail("unsupported format version " + std::to_string(format));

    CsvdModel model;
    model.rows = r.u64();
    model.dims = r.u32();
    const std::size_t h = r.u32();
    const auto kind = r.u8();
    if (kind > static_cast<std::uint8_t>(Objective::recall_target)) r.fail("bad objective tag");
    model.objective.kind = static_cast<Objective>(kind);
    model.objective.target = r.f64();
    const std::size_t n = model.dims;
    if (n == 0 || h == 0) r.fail("empty model");
    // Every cluster needs at least centroid + spectrum; reject absurd counts before allocating.
    if (h > r.remaining() / (16 * n)) r.fail("cluster count exceeds file size");
    model.col_means.resize(n);
    model.col_stds.resize(n);
    r.f64s(model.col_means);
    r.f64s(model.col_stds);

    std::vector<std::uint8_t> seen(model.rows, 0);
    model.clusters.resize(h);
    for (auto& c : model.clusters) {
        const std::uint64_t m = r.u64();
        const std::size_t p = r.u32();
        if (p > n) r.fail("retained dimension count exceeds N");
        if (m == 0 || m > model.rows) r.fail("bad cluster size");
        c.centroid.resize(n);
        r.f64s(c.centroid);
        c.radius = r.f64();
        c.eigenvalues.resize(n);
        r.f64s(c.eigenvalues);
        if (r.remaining() < 8 * (n * p) + 8 * m + 4 * m * p) r.fail("truncated cluster block");
        c.retained = p;
        c.basis = MatrixD(n, p);
        r.f64s(c.basis.data());
        c.ids.resize(m);
        for (auto& id : c.ids) {
            id = r.u64();
            if (id >= model.rows || seen[id]) r.fail("cluster ids do not partition the dataset");
            seen[id] = 1;
        }
        c.points = MatrixF(m, p);
        r.f32s(c.points.data());
        c.recompute_point_norms();
    }
    if (r.remaining() != 0) r.fail("unexpected bytes before checksum");
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) r.fail("cluster ids do not cover the dataset");

    model.achieved_nmse = nmse_clustered(model);
    model.index_volume = index_volume(model);
    return model;
}

void save_model(const CsvdModel& model, const std::filesystem::path& path) {
    io::write_file(path, serialize_model(model));
}

CsvdModel load_model(const std::filesystem::path& path) { return deserialize_model(io::read_file(path)); }

} // namespace csvd
