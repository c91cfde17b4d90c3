#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "csvd/binary_io.hpp"
#include "csvd/csvd.hpp"
#include "csvd/dataset.hpp"
#include "csvd/errors.hpp"
#include "support.hpp"

using namespace csvd;

namespace {

using Spectra = std::vector<std::vector<double>>;

// Reference allocation: repeatedly drop the cheapest currently-last retained
// dimension while the running NMSE stays within target.
std::vector<std::size_t> reference_nmse_allocation(const Spectra& s, const std::vector<std::size_t>& m, double target) {
    const std::size_t n = s.front().size();
    std::vector<std::size_t> p(s.size(), n);
    double total = 0.0;
    for (std::size_t c = 0; c < s.size(); ++c) {
        for (double l : s[c]) total += l * static_cast<double>(m[c]);
    }
    if (target <= 0.0) return p;
    double discarded = 0.0;
    while (true) {
        std::size_t best = s.size();
        double w = 0.0;
        for (std::size_t c = 0; c < s.size(); ++c) {
            if (p[c] == 0) continue;
            const double wc = s[c][p[c] - 1] * static_cast<double>(m[c]);
            if (best == s.size() || wc < w) {
                best = c;
                w = wc;
            }
        }
        if (best == s.size() || discarded + w > target * total) return p;
        discarded += w;
        --p[best];
    }
}

Spectra random_spectra(std::size_t h, std::size_t n, std::mt19937_64& rng) {
    std::exponential_distribution<double> e(1.0);
    Spectra s(h, std::vector<double>(n));
    for (auto& v : s) {
        for (auto& l : v) l = e(rng);
        std::sort(v.rbegin(), v.rend());
    }
    return s;
}

FeatureMatrix lines3d(std::size_t rows = 600, std::uint64_t seed = 3) {
    SyntheticOptions o;
    o.kind = SyntheticKind::lines;
    o.rows = rows;
    o.dims = 3;
    o.clusters = 3;
    o.separation = 30.0;
    o.seed = seed;
    return studentize(generate(o).data.values);
}

void expect_model_invariants(const CsvdModel& model, const FeatureMatrix& x) {
    std::vector<int> seen(model.rows, 0);
    for (const auto& c : model.clusters) {
        for (std::size_t a = 0; a < c.retained; ++a) {
            for (std::size_t b = 0; b < c.retained; ++b) {
                double d = 0.0;
                for (std::size_t i = 0; i < model.dims; ++i) d += c.basis(i, a) * c.basis(i, b);
                EXPECT_NEAR(d, a == b ? 1.0 : 0.0, 1e-8);
            }
        }
        for (std::size_t r = 0; r < c.size(); ++r) {
            ++seen.at(c.ids[r]);
            const auto xr = x.data.row(c.ids[r]);
            for (std::size_t j = 0; j < c.retained; ++j) {
                double y = 0.0;
                for (std::size_t i = 0; i < model.dims; ++i) y += (xr[i] - c.centroid[i]) * c.basis(i, j);
                EXPECT_NEAR(c.points(r, j), y, 1e-5 * std::max(1.0, std::abs(y)));
            }
        }
    }
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_EQ(model.index_volume, index_volume(model));
    EXPECT_NEAR(model.achieved_nmse, nmse_clustered(model), 1e-9);
}

} // namespace

TEST(Allocate, WorkedTwoClusterExample) {
    const Spectra s{{8, 2}, {6, 4}};
    const std::vector<std::size_t> m{10, 10};
    const auto a = allocate_dimensions(s, m, {Objective::nmse_target, 0.15});
    EXPECT_EQ(a.retained, (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(a.nmse, 0.10);
    EXPECT_EQ(nmse_clustered(s, m, a.retained), 0.10);
}

TEST(Allocate, ZeroTargetKeepsEverything) {
    const Spectra s{{3, 1, 0}, {2, 0, 0}};
    const std::vector<std::size_t> m{5, 7};
    const auto a = allocate_dimensions(s, m, {Objective::nmse_target, 0.0});
    EXPECT_EQ(a.retained, (std::vector<std::size_t>{3, 3}));
    EXPECT_EQ(a.nmse, 0.0);
}

TEST(Allocate, SingleClusterIsTailSumRule) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        const auto s = random_spectra(1, 1 + t % 12, rng);
        const double target = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto a = allocate_dimensions(s, std::vector<std::size_t>{37}, {Objective::nmse_target, target});
        std::size_t expect = s[0].size();
        for (std::size_t n = 0; n <= s[0].size(); ++n) {
            if (nmse_global(s[0], n) <= target) {
                expect = n;
                break;
            }
        }
        EXPECT_EQ(a.retained[0], expect) << "target " << target;
    }
}

TEST(Allocate, MatchesIterativeReference) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> size(1, 500);
    for (int t = 0; t < 300; ++t) {
        const std::size_t h = 1 + t % 8;
        const auto s = random_spectra(h, 1 + t % 10, rng);
        std::vector<std::size_t> m(h);
        for (auto& v : m) v = size(rng);
        const double target = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
        const auto a = allocate_dimensions(s, m, {Objective::nmse_target, target});
        EXPECT_EQ(a.retained, reference_nmse_allocation(s, m, target));
        EXPECT_LE(a.nmse, target + 1e-12);
        EXPECT_NEAR(a.nmse, nmse_clustered(s, m, a.retained), 1e-12);
    }
}

TEST(Allocate, GreedyExchangeProperty) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 300; ++t) {
        const std::size_t h = 1 + t % 6;
        const auto s = random_spectra(h, 2 + t % 7, rng);
        std::vector<std::size_t> m(h);
        for (auto& v : m) v = 1 + rng() % 300;
        const ObjectiveSpec obj = t % 2 ? ObjectiveSpec{Objective::nmse_target, 0.05 * (t % 9)}
                                        : ObjectiveSpec{Objective::volume_target,
                                                        static_cast<double>(index_volume(s[0].size(), std::vector<std::size_t>(h, s[0].size()), m)) * 0.1 * (t % 11)};
        if (obj.kind == Objective::volume_target && obj.target < static_cast<double>(s[0].size() * h)) continue;
        const auto a = allocate_dimensions(s, m, obj);
        double max_discarded = -1.0, min_retained = 1e300;
        for (std::size_t c = 0; c < h; ++c) {
            for (std::size_t j = 0; j < s[c].size(); ++j) {
                const double w = s[c][j] * static_cast<double>(m[c]);
                if (j < a.retained[c]) min_retained = std::min(min_retained, w);
                else max_discarded = std::max(max_discarded, w);
            }
        }
        EXPECT_LE(max_discarded, min_retained);
    }
}

TEST(Allocate, TighterTargetNeverDecreasesRetained) {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 50; ++t) {
        const auto s = random_spectra(4, 8, rng);
        const std::vector<std::size_t> m{10, 50, 20, 90};
        std::vector<std::size_t> prev(4, 0);
        for (double target = 1.0; target >= 0.0; target -= 0.05) {
            const auto a = allocate_dimensions(s, m, {Objective::nmse_target, target});
            for (std::size_t c = 0; c < 4; ++c) EXPECT_GE(a.retained[c], prev[c]);
            prev = a.retained;
        }
    }
}

TEST(Allocate, VolumeTarget) {
    const Spectra s{{5, 3, 1, 0.5}, {4, 2, 1, 0.1}};
    const std::vector<std::size_t> m{100, 200};
    const auto v22 = index_volume(4, std::vector<std::size_t>{2, 2}, m);
    EXPECT_EQ(v22, 8u + (8 + 200) + (8 + 400));
    const auto a = allocate_dimensions(s, m, {Objective::volume_target, static_cast<double>(v22)});
    EXPECT_LE(a.volume, v22);
    EXPECT_EQ(a.volume, index_volume(4, a.retained, m));
    EXPECT_EQ(a.retained[0] + a.retained[1], 4u);
    EXPECT_THROW(allocate_dimensions(s, m, {Objective::volume_target, 7.0}), UsageError);
    const auto floor = allocate_dimensions(s, m, {Objective::volume_target, 8.0});
    EXPECT_EQ(floor.retained, (std::vector<std::size_t>{0, 0}));
}

TEST(Allocate, RecallNeedsHarnessAndBadInputsRejected) {
    const Spectra s{{2, 1}};
    const std::vector<std::size_t> m{3};
    EXPECT_THROW(allocate_dimensions(s, m, {Objective::recall_target, 0.9}), UsageError);
    EXPECT_THROW(allocate_dimensions(Spectra{{1, 2}}, m, {}), DataError);
    EXPECT_THROW(parse_objective("entropy"), UsageError);
}

TEST(IndexVolume, Formula) {
    EXPECT_EQ(index_volume(4, std::vector<std::size_t>{1, 2}, std::vector<std::size_t>{10, 20}), 70u);
    EXPECT_EQ(index_volume(5, std::vector<std::size_t>{5}, std::vector<std::size_t>{100}), 5u + 25u + 500u);
    EXPECT_EQ(index_volume(6, std::vector<std::size_t>{0, 0, 0}, std::vector<std::size_t>{4, 5, 6}), 18u);
}

TEST(NmseClustered, Examples) {
    const Spectra s{{8, 2}, {6, 4}};
    const std::vector<std::size_t> m{10, 10};
    EXPECT_EQ(nmse_clustered(s, m, std::vector<std::size_t>{2, 2}), 0.0);
    EXPECT_EQ(nmse_clustered(s, m, std::vector<std::size_t>{1, 2}), 0.10);
    const Spectra one{{4, 2, 1, 1}};
    for (std::size_t n = 0; n <= 4; ++n) {
        EXPECT_DOUBLE_EQ(nmse_clustered(one, std::vector<std::size_t>{9}, std::vector<std::size_t>{n}),
                         nmse_global(one[0], n));
    }
}

TEST(Build, LosslessSingleCluster) {
    std::mt19937_64 rng(5);
    const auto x = studentize(test::random_matrix(150, 6, rng));
    const auto model = build_csvd(x, 1, {Objective::nmse_target, 0.0});
    ASSERT_EQ(model.clusters.size(), 1u);
    EXPECT_EQ(model.clusters[0].retained, 6u);
    EXPECT_EQ(model.achieved_nmse, 0.0);
    EXPECT_EQ(model.index_volume, 6u + 36u + 150u * 6u);
    expect_model_invariants(model, x);
}

TEST(Build, ThreeLinesKeepOneDimensionEach) {
    const auto x = lines3d();
    const auto model = build_csvd(x, 3, {Objective::nmse_target, 0.05});
    EXPECT_EQ(model.retained(), (std::vector<std::size_t>{1, 1, 1}));
    for (const auto& c : model.clusters) {
        double total = 0.0;
        for (double l : c.eigenvalues) total += l;
        EXPECT_GE(c.eigenvalues[0] / total, 0.99);
    }
    expect_model_invariants(model, x);
}

TEST(Build, VolumeTargetOnBlobs) {
    SyntheticOptions o;
    o.rows = 400;
    o.dims = 4;
    o.clusters = 2;
    o.seed = 8;
    const auto x = studentize(generate(o).data.values);
    const auto rc = rotate_clusters(x, 2);
    const auto v = index_volume(4, std::vector<std::size_t>{2, 2}, rc.sizes());
    const auto model = finalize(rc, {Objective::volume_target, static_cast<double>(v)});
    EXPECT_LE(model.index_volume, v);
    std::size_t total = 0;
    for (auto p : model.retained()) total += p;
    EXPECT_EQ(total, 4u);
    expect_model_invariants(model, x);
}

TEST(Build, NmseFormsAgree) {
    std::mt19937_64 rng(6);
    for (std::size_t h : {1u, 2u, 4u, 8u}) {
        const auto x = studentize(test::clustered_matrix(800, 10, 4, rng));
        const auto rc = rotate_clusters(x, h);
        for (double t : {0.0, 0.05, 0.1, 0.2, 0.4}) {
            const auto model = finalize(rc, {Objective::nmse_target, t});
            const double eig = nmse_clustered(model);
            EXPECT_LE(eig, t + 1e-12);
            EXPECT_NEAR(nmse_clustered_residual(rc, model.retained()), eig, 1e-5 * eig + 1e-12);
            // Stored points are 32-bit, so the lossless case carries ~1e-14 of reconstruction noise.
            EXPECT_NEAR(nmse_clustered_residual(model, x), eig, 1e-5 * eig + 1e-10);
        }
    }
}

TEST(Build, SmallClusterRankDeficiency) {
    std::mt19937_64 rng(7);
    const auto x = studentize(test::random_matrix(12, 8, rng));
    const auto model = build_csvd(x, 4, {Objective::nmse_target, 1e-9});
    for (const auto& c : model.clusters) {
        EXPECT_LE(c.retained, c.size());
        EXPECT_EQ(c.eigenvalues.size(), 8u);
    }
    expect_model_invariants(model, x);
}

TEST(Project, RoundTripsStoredPoint) {
    std::mt19937_64 rng(8);
    const auto raw = test::clustered_matrix(300, 5, 3, rng);
    const auto x = studentize(raw);
    const auto model = build_csvd(x, 3, {Objective::nmse_target, 0.1});
    for (std::size_t h = 0; h < 3; ++h) {
        const auto& c = model.clusters[h];
        const auto q = project_query(raw.row(c.ids[0]), model, h);
        ASSERT_EQ(q.size(), c.retained);
        for (std::size_t j = 0; j < c.retained; ++j) EXPECT_NEAR(q[j], c.points(0, j), 1e-5);
        const auto z = project_studentized(c.centroid, model, h);
        for (double v : z) EXPECT_NEAR(v, 0.0, 1e-12);
    }
    EXPECT_THROW(project_query(std::vector<double>{1, 2}, model, 0), DataError);
}

TEST(Project, NeverIncreasesNormAndLowerBounds) {
    std::mt19937_64 rng(9);
    const auto x = studentize(test::clustered_matrix(500, 8, 4, rng));
    const auto model = build_csvd(x, 4, {Objective::nmse_target, 0.2});
    std::normal_distribution<double> g(0.0, 1.5);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> q(8);
        for (auto& v : q) v = g(rng);
        for (std::size_t h = 0; h < 4; ++h) {
            const auto& c = model.clusters[h];
            const auto qh = project_studentized(q, model, h);
            double centered = 0.0;
            for (std::size_t j = 0; j < 8; ++j) centered += (q[j] - c.centroid[j]) * (q[j] - c.centroid[j]);
            EXPECT_LE(std::sqrt(dot(std::span<const double>(qh), std::span<const double>(qh))), std::sqrt(centered) + 1e-8);
            for (std::size_t r = 0; r < c.size(); ++r) {
                const double sub = std::sqrt(squared_distance(std::span<const double>(qh), c.points.row(r)));
                const double full = std::sqrt(squared_distance(std::span<const double>(q), x.data.row(c.ids[r])));
                EXPECT_LE(sub, full + 1e-4);
            }
        }
    }
}

TEST(ModelFile, SaveLoadSaveIsByteIdentical) {
    const auto dir = test::scratch_dir("model_file");
    std::mt19937_64 rng(10);
    const auto x = studentize(test::clustered_matrix(400, 7, 3, rng));
    const auto model = build_csvd(x, 3, {Objective::nmse_target, 0.1});
    save_model(model, dir / "a.csvd");
    const auto loaded = load_model(dir / "a.csvd");
    save_model(loaded, dir / "b.csvd");
    EXPECT_EQ(io::read_file(dir / "a.csvd"), io::read_file(dir / "b.csvd"));
    EXPECT_EQ(loaded.retained(), model.retained());
    EXPECT_EQ(loaded.index_volume, model.index_volume);
    EXPECT_EQ(loaded.achieved_nmse, model.achieved_nmse);
    for (std::size_t h = 0; h < 3; ++h) {
        EXPECT_EQ(loaded.clusters[h].points, model.clusters[h].points);
        EXPECT_EQ(loaded.clusters[h].basis, model.clusters[h].basis);
        EXPECT_EQ(loaded.clusters[h].ids, model.clusters[h].ids);
    }
}

TEST(ModelFile, CorruptionIsTyped) {
    std::mt19937_64 rng(11);
    const auto x = studentize(test::random_matrix(60, 3, rng));
    const auto bytes = serialize_model(build_csvd(x, 2, {}));

    auto bad_magic = bytes;
    bad_magic[0] = std::byte{'X'};
    EXPECT_THROW(deserialize_model(bad_magic), CorruptFileError);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= std::byte{0x40};
    EXPECT_THROW(deserialize_model(flipped), CorruptFileError);

    const std::vector<std::byte> truncated(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() - 9));
    EXPECT_THROW(deserialize_model(truncated), CorruptFileError);

    // Bump the format version and re-seal the checksum.
    std::vector<std::byte> versioned(bytes.begin(), bytes.end() - 4);
    versioned[4] = std::byte{2};
    io::ByteWriter w;
    w.bytes(versioned);
    w.crc_trailer();
    EXPECT_THROW(deserialize_model(w.buffer()), CorruptFileError);

    EXPECT_THROW(load_model("/nonexistent/model.csvd"), Error);
}
