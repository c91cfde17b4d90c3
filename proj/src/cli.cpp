#include "csvd/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <thread>

#include "csvd/dataset.hpp"
#include "csvd/errors.hpp"

namespace csvd::cli {

using json = nlohmann::json;

unsigned resolve_threads(std::optional<unsigned> flag) {
    if (flag) {
        if (*flag == 0) throw UsageError("--threads must be >= 1");
        return *flag;
    }
    if (const char* env = std::getenv("CSVD_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw UsageError(std::string("CSVD_THREADS must be a positive integer, got '") + env + "'");
        return static_cast<unsigned>(v);
    }
    return 1;
}

namespace {

json counters_json(const SearchCounters& c) {
    return json{{"distance_ops", c.distance_ops},
                {"coord_ops", c.coord_ops},
                {"nodes_visited", c.nodes_visited},
                {"clusters_visited", c.clusters_visited},
                {"candidates_verified", c.candidates_verified},
                {"extra_verifications", c.extra_verifications}};
}

// Studentizes `raw` with a model's stored statistics, so data and queries
// land in the same space the index was built in.
FeatureMatrix studentize_like(const MatrixD& raw, const CsvdModel& model) {
    if (raw.cols() != model.dims || raw.rows() != model.rows) {
        throw DataError("dataset is " + std::to_string(raw.rows()) + "x" + std::to_string(raw.cols()) +
                        ", model was built on " + std::to_string(model.rows) + "x" + std::to_string(model.dims));
    }
    FeatureMatrix fm;
    fm.col_means = model.col_means;
    fm.col_stds = model.col_stds;
    fm.degenerate.resize(model.dims);
    for (std::size_t j = 0; j < model.dims; ++j) fm.degenerate[j] = model.col_stds[j] > 0.0 ? 0 : 1;
    fm.data = MatrixD(raw.rows(), raw.cols());
    for (std::size_t i = 0; i < raw.rows(); ++i) {
        const auto z = fm.studentize_row(raw.row(i));
        std::copy(z.begin(), z.end(), fm.data.row(i).begin());
    }
    return fm;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    return f;
}

void write_json_file(const std::string& path, const json& j) {
    auto f = open_out(path);
    f << j.dump(2) << '\n';
}

struct Common {
    std::uint64_t seed = 42;
    std::optional<unsigned> threads;
};

// ---------------------------------------------------------------- ingest

struct IngestArgs {
    std::string in, out;
    bool header = false;
    std::string dtype;
};

int cmd_ingest(const IngestArgs& a, std::ostream& out) {
    Dataset d = load_dataset(a.in, {.header = a.header});
    if (!a.dtype.empty()) d.dtype = parse_dtype(a.dtype);
    const FeatureMatrix fm = studentize(d.values);
    save_fvec(d, a.out);
    json stats{{"rows", d.rows()},
               {"dims", d.cols()},
               {"dtype", to_string(d.dtype)},
               {"col_means", fm.col_means},
               {"col_stds", fm.col_stds},
               {"degenerate", fm.degenerate}};
    write_json_file(a.out + ".stats.json", stats);
    out << "wrote " << a.out << ": M=" << d.rows() << " N=" << d.cols() << " dtype=" << to_string(d.dtype) << '\n';
    return 0;
}

// ---------------------------------------------------------------- gen

struct GenArgs {
    std::string kind, out, dtype = "f64";
    SyntheticOptions opts;
};

int cmd_gen(GenArgs a, const Common& c, std::ostream& out) {
    a.opts.kind = parse_synthetic_kind(a.kind);
    a.opts.seed = c.seed;
    Synthetic s = generate(a.opts);
    s.data.dtype = parse_dtype(a.dtype);
    save_fvec(s.data, a.out);
    auto f = open_out(a.out + ".labels");
    for (auto l : s.labels) f << l << '\n';
    out << "wrote " << a.out << ": " << a.kind << " M=" << s.data.rows() << " N=" << s.data.cols()
        << " H=" << a.opts.clusters << " seed=" << c.seed << '\n';
    return 0;
}

// ---------------------------------------------------------------- build

struct BuildArgs {
    std::string data, out;
    std::size_t clusters = 1;
    std::string objective = "nmse";
    double target = 0.0;
    std::string index = "scan";
    std::string seeding = "lbg";
    OpTreeOptions optree;
    SdiOptions sdi;
    std::size_t recall_queries = 200;
    std::size_t recall_k = 20;
    std::string report;
};

int cmd_build(const BuildArgs& a, const Common& c, std::ostream& out) {
    const ObjectiveSpec objective{parse_objective(a.objective), a.target};
    IndexOptions iopts;
    iopts.kind = parse_index_kind(a.index);
    iopts.optree = a.optree;
    iopts.sdi = a.sdi;
    KMeansOptions km;
    km.seed = c.seed;
    if (a.seeding == "lbg") km.seeding = Seeding::lbg;
    else if (a.seeding == "furthest") km.seeding = Seeding::furthest_first;
    else throw UsageError("unknown seeding '" + a.seeding + "' (expected lbg or furthest)");
    const unsigned threads = resolve_threads(c.threads);

    const Dataset d = load_dataset(a.data);
    const FeatureMatrix x = studentize(d.values);
    const RotatedClusters rc = rotate_clusters(x, a.clusters, km);
    CsvdModel model;
    if (objective.kind == Objective::recall_target) {
        RecallBuildOptions ro;
        ro.sample_queries = a.recall_queries;
        ro.k = a.recall_k;
        ro.seed = c.seed;
        ro.index = iopts;
        ro.threads = threads;
        model = build_for_recall(rc, x, objective.target, ro);
    } else {
        model = finalize(rc, objective);
    }
    const CsvdIndex index(std::move(model), iopts);
    index.save(a.out);

    const auto& m = index.model();
    const double isc = static_cast<double>(m.rows * m.dims) / static_cast<double>(m.index_volume);
    json summary{{"clusters", m.clusters.size()},
                 {"objective", to_string(m.objective.kind)},
                 {"target", m.objective.target},
                 {"index", to_string(index.kind())},
                 {"retained", m.retained()},
                 {"sizes", m.sizes()},
                 {"index_volume", m.index_volume},
                 {"nmse", m.achieved_nmse},
                 {"isc", isc}};
    if (!a.report.empty()) write_json_file(a.report, summary);

    out << "model        " << a.out << '\n';
    out << "clusters     " << m.clusters.size() << '\n';
    out << "index        " << to_string(index.kind()) << '\n';
    out << "retained     " << json(m.retained()).dump() << '\n';
    out << "sizes        " << json(m.sizes()).dump() << '\n';
    out << "volume       " << m.index_volume << '\n';
    out << "nmse         " << m.achieved_nmse << '\n';
    out << "isc          " << isc << '\n';
    return 0;
}

// ---------------------------------------------------------------- query

struct QueryArgs {
    std::string model, queries, data, out;
    std::size_t k = 10;
    std::string mode = "approx";
    std::size_t candidates = 0;
    double pilot_recall = 0.0;
    bool shrink = false;
};

int cmd_query(const QueryArgs& a, const Common& c, std::ostream& out, std::ostream& err) {
    if (a.k < 1) throw UsageError("--k must be >= 1");
    const bool exact = a.mode == "exact";
    if (!exact && a.mode != "approx") throw UsageError("unknown mode '" + a.mode + "' (expected approx or exact)");
    if ((exact || a.pilot_recall > 0.0) && a.data.empty()) {
        throw UsageError("--data is required for exact mode and --pilot-recall");
    }
    const unsigned threads = resolve_threads(c.threads);
    const CsvdIndex index = CsvdIndex::load(a.model);
    const auto& model = index.model();
    const Dataset qs = load_dataset(a.queries);
    if (qs.rows() > 0 && qs.cols() != model.dims) {
        throw DataError("queries have " + std::to_string(qs.cols()) + " features, model expects " +
                        std::to_string(model.dims));
    }
    if (a.k > model.rows) {
        err << "warning: k=" << a.k << " exceeds the " << model.rows << " indexed points; returning " << model.rows
            << '\n';
    }

    std::optional<FeatureMatrix> x;
    if (!a.data.empty()) x = studentize_like(load_dataset(a.data).values, model);

    std::size_t b = a.candidates == 0 ? a.k : a.candidates;
    if (!exact && a.pilot_recall > 0.0) {
        const MatrixD pilot = sample_queries(*x, 100, 0.1, c.seed);
        b = pilot_candidates(index, *x, pilot, a.k, a.pilot_recall, threads);
        err << "pilot: " << b << " candidates for recall " << a.pilot_recall << '\n';
    }

    std::vector<std::string> lines(qs.rows());
    std::vector<std::exception_ptr> failures(qs.rows());
    const auto work = [&](std::size_t i) {
        try {
            SearchCounters cnt;
            const ResultSet rs = exact ? knn_exact(index, *x, qs.values.row(i), a.k, {a.shrink}, &cnt)
                                       : knn_approx(index, qs.values.row(i), b, &cnt);
            json row{{"query_index", i}, {"ids", rs.ids()}, {"distances", rs.distances()},
                     {"counters", counters_json(cnt)}};
            lines[i] = row.dump();
        } catch (...) {
            failures[i] = std::current_exception();
        }
    };
    {
        const unsigned t = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(qs.rows(), 1))));
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < t; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < qs.rows(); i += t) work(i);
            });
        }
    }
    for (auto& f : failures) {
        if (f) std::rethrow_exception(f);
    }

    std::ofstream file;
    if (!a.out.empty()) file = open_out(a.out);
    std::ostream& sink = a.out.empty() ? out : file;
    for (const auto& l : lines) sink << l << '\n';
    return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
    std::string data, csv, records, query_file;
    std::vector<std::size_t> clusters{1};
    std::vector<double> nmse{0.0};
    std::size_t k = 10;
    std::size_t queries = 100;
    double noise = 0.1;
    std::string index = "optree";
    OpTreeOptions optree;
    SdiOptions sdi;
};

void write_records(const std::vector<SweepRow>& rows, std::ostream& out) {
    for (const auto& r : rows) {
        for (const auto* ev : {&r.approx_eval, &r.exact_eval}) {
            const char* mode = ev == &r.approx_eval ? "approx" : "exact";
            for (std::size_t i = 0; i < ev->records.size(); ++i) {
                const auto& rec = ev->records[i];
                json j{{"clusters", r.clusters}, {"nmse_target", r.nmse_target}, {"mode", mode},
                       {"query_index", i},       {"truth", rec.truth},          {"ids", rec.retrieved},
                       {"distances", rec.distances}, {"counters", counters_json(rec.counters)}};
                out << j.dump() << '\n';
            }
        }
    }
}

int cmd_sweep(const SweepArgs& a, const Common& c, std::ostream& out) {
    if (a.clusters.empty() || a.nmse.empty()) throw UsageError("sweep needs at least one H and one NMSE target");
    SweepConfig cfg;
    cfg.clusters = a.clusters;
    cfg.nmse_targets = a.nmse;
    cfg.k = a.k;
    cfg.index.kind = parse_index_kind(a.index);
    cfg.index.optree = a.optree;
    cfg.index.sdi = a.sdi;
    cfg.kmeans.seed = c.seed;
    cfg.threads = resolve_threads(c.threads);

    const Dataset d = load_dataset(a.data);
    const FeatureMatrix x = studentize(d.values);
    const MatrixD queries =
        a.query_file.empty() ? sample_queries(x, a.queries, a.noise, c.seed) : load_dataset(a.query_file).values;
    const auto rows = run_sweep(x, queries, cfg);

    write_sweep_table(rows, out);
    if (!a.csv.empty()) {
        auto f = open_out(a.csv);
        write_sweep_csv(rows, f);
    }
    if (!a.records.empty()) {
        auto f = open_out(a.records);
        write_records(rows, f);
    }
    return 0;
}

} // namespace

// ---------------------------------------------------------------- sweep library

std::vector<SweepRow> run_sweep(const FeatureMatrix& x, const MatrixD& queries_raw, const SweepConfig& cfg) {
    std::vector<SweepRow> rows;
    for (std::size_t h : cfg.clusters) {
        const RotatedClusters rc = rotate_clusters(x, h, cfg.kmeans);
        for (double target : cfg.nmse_targets) {
            const auto t0 = std::chrono::steady_clock::now();
            const CsvdIndex index(finalize(rc, {Objective::nmse_target, target}), cfg.index);
            const auto& m = index.model();
            SweepRow r;
            r.clusters = h;
            r.nmse_target = target;
            r.achieved_nmse = m.achieved_nmse;
            r.index_volume = m.index_volume;
            r.isc = static_cast<double>(m.rows * m.dims) / static_cast<double>(m.index_volume);

            EvalOptions eo;
            eo.k = cfg.k;
            eo.threads = cfg.threads;
            r.approx_eval = evaluate(index, x, queries_raw, eo);
            r.approx = r.approx_eval.metrics;
            r.approx_distance_ops = r.approx_eval.mean(&SearchCounters::distance_ops);
            r.approx_clusters_visited = r.approx_eval.mean(&SearchCounters::clusters_visited);
            r.approx_pages = r.approx_eval.mean(&SearchCounters::nodes_visited);

            eo.mode = EvalMode::exact;
            r.exact_eval = evaluate(index, x, queries_raw, eo);
            const auto& ex = r.exact_eval;
            r.exact_distance_ops = ex.mean(&SearchCounters::distance_ops);
            r.exact_coord_ops = ex.mean(&SearchCounters::coord_ops);
            r.exact_candidates_verified = ex.mean(&SearchCounters::candidates_verified);
            r.exact_clusters_visited = ex.mean(&SearchCounters::clusters_visited);
            r.exact_pages = ex.mean(&SearchCounters::nodes_visited);
            r.exact_cost = ex.totals.coord_ops;
            for (const auto& rec : ex.records) r.exact_matches_scan = r.exact_matches_scan && rec.truth == rec.retrieved;
            r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

std::size_t cost_minimum(const std::vector<SweepRow>& rows, std::size_t h) {
    std::size_t best = rows.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].clusters != h) continue;
        if (best == rows.size() || rows[i].exact_cost < rows[best].exact_cost) best = i;
    }
    return best;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
    out << "H,nmse_target,achieved_nmse,index_volume,isc,recall,precision,k_star,approx_distance_ops,"
           "approx_clusters_visited,approx_pages,exact_distance_ops,exact_coord_ops,exact_candidates_verified,"
           "exact_clusters_visited,exact_pages,exact_cost,exact_matches_scan,wall_ms\n";
    std::ostringstream s;
    s << std::setprecision(10);
    for (const auto& r : rows) {
        s << r.clusters << ',' << r.nmse_target << ',' << r.achieved_nmse << ',' << r.index_volume << ',' << r.isc
          << ',' << r.approx.recall << ',' << r.approx.precision << ',' << r.approx.k_star << ','
          << r.approx_distance_ops << ',' << r.approx_clusters_visited << ',' << r.approx_pages << ','
          << r.exact_distance_ops << ',' << r.exact_coord_ops << ',' << r.exact_candidates_verified << ','
          << r.exact_clusters_visited << ',' << r.exact_pages << ',' << r.exact_cost << ','
          << (r.exact_matches_scan ? 1 : 0) << ',' << r.wall_ms << '\n';
    }
    out << s.str();
}

void write_sweep_table(const std::vector<SweepRow>& rows, std::ostream& out) {
    std::ostringstream s;
    s << std::fixed;
    s << std::setw(4) << "H" << std::setw(8) << "target" << std::setw(10) << "nmse" << std::setw(12) << "volume"
      << std::setw(8) << "ISC" << std::setw(8) << "recall" << std::setw(8) << "prec" << std::setw(8) << "K*"
      << std::setw(14) << "exact cost" << std::setw(10) << "verified" << std::setw(10) << "ms" << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const bool best = cost_minimum(rows, r.clusters) == i;
        s << std::setw(4) << r.clusters << std::setprecision(3) << std::setw(8) << r.nmse_target << std::setprecision(4)
          << std::setw(10) << r.achieved_nmse << std::setw(12) << r.index_volume << std::setprecision(2)
          << std::setw(8) << r.isc << std::setprecision(3) << std::setw(8) << r.approx.recall << std::setw(8)
          << r.approx.precision << std::setprecision(2) << std::setw(8) << r.approx.k_star << std::setw(14)
          << r.exact_cost << std::setprecision(1) << std::setw(10) << r.exact_candidates_verified << std::setw(10)
          << r.wall_ms << (best ? "  <- min cost" : "") << '\n';
    }
    out << s.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Clustered-SVD similarity search"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("--seed", common.seed, "Seed for clustering and query sampling");
    app.add_option("--threads", common.threads, "Query threads (default: $CSVD_THREADS or 1)");

    IngestArgs ia;
    auto* ingest = app.add_subcommand("ingest", "Validate CSV/FVEC input and write an FVEC dataset");
    ingest->add_option("input", ia.in)->required();
    ingest->add_option("output", ia.out)->required();
    ingest->add_flag("--header", ia.header, "Skip the first CSV line");
    ingest->add_option("--dtype", ia.dtype, "f32 or f64 (default: keep FVEC dtype, f64 for CSV)");

    GenArgs ga;
    auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset with labels");
    gen->add_option("kind", ga.kind, "blobs, lines or uniform")->required();
    gen->add_option("output", ga.out)->required();
    gen->add_option("--rows,-m", ga.opts.rows);
    gen->add_option("--dims,-n", ga.opts.dims);
    gen->add_option("--clusters", ga.opts.clusters);
    gen->add_option("--separation", ga.opts.separation);
    gen->add_option("--spread", ga.opts.spread);
    gen->add_option("--length", ga.opts.line_length);
    gen->add_option("--dtype", ga.dtype);

    BuildArgs ba;
    auto* build = app.add_subcommand("build", "Build a CSVD model and within-cluster indexes");
    build->add_option("dataset", ba.data)->required();
    build->add_option("output", ba.out)->required();
    build->add_option("--clusters,-H", ba.clusters);
    build->add_option("--objective", ba.objective, "nmse, volume or recall");
    build->add_option("--target", ba.target);
    build->add_option("--index", ba.index, "scan, optree or sdi");
    build->add_option("--seeding", ba.seeding, "lbg or furthest");
    build->add_option("--fanout", ba.optree.fanout);
    build->add_option("--leaf-capacity", ba.optree.leaf_capacity);
    build->add_option("--sdi-p", ba.sdi.p);
    build->add_option("--page-size", ba.sdi.page_size);
    build->add_option("--recall-queries", ba.recall_queries);
    build->add_option("--recall-k", ba.recall_k);
    build->add_option("--report", ba.report, "Write a JSON build summary");

    QueryArgs qa;
    auto* query = app.add_subcommand("query", "Run k-NN queries; one NDJSON line per query");
    query->add_option("model", qa.model)->required();
    query->add_option("queries", qa.queries)->required();
    query->add_option("--k,-k", qa.k);
    query->add_option("--mode", qa.mode, "approx or exact");
    query->add_option("--data", qa.data, "Dataset the model was built from (exact mode)");
    query->add_option("--candidates", qa.candidates, "Approximate result size (default k)");
    query->add_option("--pilot-recall", qa.pilot_recall, "Size candidates to reach this recall");
    query->add_flag("--shrink-radius", qa.shrink);
    query->add_option("--out,-o", qa.out);

    SweepArgs sa;
    auto* sweep = app.add_subcommand("sweep", "Evaluate a grid of cluster counts and NMSE targets");
    sweep->add_option("dataset", sa.data)->required();
    sweep->add_option("--clusters,-H", sa.clusters)->delimiter(',');
    sweep->add_option("--nmse", sa.nmse)->delimiter(',');
    sweep->add_option("--k,-k", sa.k);
    sweep->add_option("--queries", sa.queries, "Number of sampled queries");
    sweep->add_option("--query-file", sa.query_file);
    sweep->add_option("--noise", sa.noise);
    sweep->add_option("--index", sa.index);
    sweep->add_option("--fanout", sa.optree.fanout);
    sweep->add_option("--leaf-capacity", sa.optree.leaf_capacity);
    sweep->add_option("--sdi-p", sa.sdi.p);
    sweep->add_option("--page-size", sa.sdi.page_size);
    sweep->add_option("--csv", sa.csv);
    sweep->add_option("--records", sa.records, "Per-query NDJSON records");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
    }

    try {
        if (*ingest) return cmd_ingest(ia, out);
        if (*gen) return cmd_gen(ga, common, out);
        if (*build) return cmd_build(ba, common, out);
        if (*query) return cmd_query(qa, common, out, err);
        if (*sweep) return cmd_sweep(sa, common, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(e.kind());
    } catch (const std::bad_alloc&) {
        err << "error: out of memory\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return static_cast<int>(ErrorKind::usage);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"csvd"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace csvd::cli
