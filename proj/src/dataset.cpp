#include "csvd/dataset.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <system_error>

#include "csvd/binary_io.hpp"
#include "csvd/errors.hpp"

namespace csvd {

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

std::string to_string(DType t) { return t == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
    if (name == "f32") return DType::f32;
    if (name == "f64") return DType::f64;
    throw UsageError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::vector<std::byte> serialize_fvec(const Dataset& d) {
    io::ByteWriter w;
    w.magic("FVEC");
    w.u32(kFvecVersion);
    w.u64(d.rows());
    w.u32(static_cast<std::uint32_t>(d.cols()));
    w.u8(static_cast<std::uint8_t>(d.dtype));
    const auto p = d.values.data();
    const std::size_t n = d.rows() * d.cols();
    for (std::size_t i = 0; i < n; ++i) {
        if (d.dtype == DType::f32) w.f32(static_cast<float>(p[i]));
        else w.f64(p[i]);
    }
    w.crc_trailer();
    return w.take();
}

Dataset deserialize_fvec(std::span<const std::byte> image) {
    const auto body = io::checked_body(image, "FVEC", "dataset");
    io::ByteReader r(body, "dataset");
    r.skip(4);
    const std::uint32_t version = r.u32();
    if (version != kFvecVersion) r.fail("unsupported version " + std::to_string(version));
    const std::uint64_t m = r.u64();
    const std::uint32_t n = r.u32();
    const std::uint8_t dt = r.u8();
    if (dt > 1) r.fail("unknown dtype " + std::to_string(dt));
    Dataset d;
    d.dtype = static_cast<DType>(dt);
    const std::size_t width = dtype_size(d.dtype);
    if (n != 0 && m > r.remaining() / width / n) r.fail("payload shorter than header claims");
    if (r.remaining() != m * n * width) r.fail("payload length does not match header");
    d.values = MatrixD(m, n);
    auto p = d.values.data();
    for (std::size_t i = 0; i < m * n; ++i) p[i] = d.dtype == DType::f32 ? r.f32() : r.f64();
    return d;
}

void save_fvec(const Dataset& d, const std::filesystem::path& path) { io::write_file(path, serialize_fvec(d)); }

Dataset load_fvec(const std::filesystem::path& path) { return deserialize_fvec(io::read_file(path)); }

namespace {

std::string_view trim(std::string_view s) {
    const auto ws = " \t\r";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

double parse_cell(std::string_view cell, std::size_t line, std::size_t col) {
    const auto where = [&] { return "line " + std::to_string(line) + ", column " + std::to_string(col + 1); };
    cell = trim(cell);
    if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec == std::errc::result_out_of_range) {
        throw DataError("numeric overflow at " + where() + ": '" + std::string(cell) + "'");
    }
    if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw DataError("non-numeric cell at " + where() + ": '" + std::string(cell) + "'");
    }
    if (!std::isfinite(v)) throw DataError("non-finite value at " + where() + ": '" + std::string(cell) + "'");
    return v;
}

} // namespace

Dataset parse_csv(std::string_view text, const CsvOptions& opts) {
    std::vector<double> values;
    std::size_t cols = 0;
    std::size_t rows = 0;
    std::size_t line_no = 0;
    bool header_pending = opts.header;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        const std::string_view line = trim(text.substr(pos, eol - pos));
        pos = eol + 1;
        ++line_no;
        if (line.empty()) continue;
        if (header_pending) {
            header_pending = false;
            continue;
        }
        std::size_t count = 0;
        std::size_t start = 0;
        while (true) {
            const auto cut = line.find(opts.delimiter, start);
            const auto cell = line.substr(start, cut == std::string_view::npos ? std::string_view::npos : cut - start);
            values.push_back(parse_cell(cell, line_no, count));
            ++count;
            if (cut == std::string_view::npos) break;
            start = cut + 1;
        }
        if (rows == 0) cols = count;
        else if (count != cols) {
            throw DataError("ragged row at line " + std::to_string(line_no) + ": " + std::to_string(count) +
                            " fields, expected " + std::to_string(cols));
        }
        ++rows;
    }
    Dataset d;
    d.values = MatrixD(rows, cols);
    std::copy(values.begin(), values.end(), d.values.data().begin());
    return d;
}

Dataset load_csv(const std::filesystem::path& path, const CsvOptions& opts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str(), opts);
}

Dataset load_dataset(const std::filesystem::path& path, const CsvOptions& csv) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() == 4 && std::string_view(magic, 4) == "FVEC") return load_fvec(path);
    return load_csv(path, csv);
}

std::string to_string(SyntheticKind k) {
    switch (k) {
    case SyntheticKind::blobs: return "blobs";
    case SyntheticKind::lines: return "lines";
    case SyntheticKind::uniform: return "uniform";
    }
    return "unknown";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
    if (name == "blobs") return SyntheticKind::blobs;
    if (name == "lines") return SyntheticKind::lines;
    if (name == "uniform") return SyntheticKind::uniform;
    throw UsageError("unknown generator '" + name + "' (expected blobs, lines or uniform)");
}

namespace {

using Rng = std::mt19937_64;

std::vector<double> unit_vector(std::size_t n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n);
    double s = 0.0;
    do {
        s = 0.0;
        for (auto& x : v) {
            x = g(rng);
            s += x * x;
        }
    } while (s == 0.0);
    for (auto& x : v) x /= std::sqrt(s);
    return v;
}

// Centers on a sphere grown until every pair is at least `separation` apart.
std::vector<std::vector<double>> spread_centers(std::size_t h, std::size_t n, double separation, Rng& rng) {
    std::vector<std::vector<double>> centers;
    double scale = separation;
    std::size_t attempts = 0;
    while (centers.size() < h) {
        auto c = unit_vector(n, rng);
        for (auto& x : c) x *= scale;
        bool ok = true;
        for (const auto& o : centers) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) d2 += (c[j] - o[j]) * (c[j] - o[j]);
            if (d2 < separation * separation) {
                ok = false;
                break;
            }
        }
        if (ok) centers.push_back(std::move(c));
        else if (++attempts % 64 == 0) scale *= 1.25;
    }
    return centers;
}

} // namespace

Synthetic generate(const SyntheticOptions& opts) {
    if (opts.rows == 0 || opts.dims == 0) throw UsageError("generator needs rows >= 1 and dims >= 1");
    if (opts.clusters == 0 && opts.kind != SyntheticKind::uniform) throw UsageError("generator needs clusters >= 1");
    Rng rng(opts.seed);
    Synthetic s;
    s.data.values = MatrixD(opts.rows, opts.dims);
    s.labels.assign(opts.rows, 0);
    auto& x = s.data.values;

    if (opts.kind == SyntheticKind::uniform) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t i = 0; i < opts.rows; ++i) {
            for (std::size_t j = 0; j < opts.dims; ++j) x(i, j) = u(rng);
        }
        return s;
    }

    const auto centers = spread_centers(opts.clusters, opts.dims, opts.separation, rng);
    std::vector<std::vector<double>> directions;
    if (opts.kind == SyntheticKind::lines) {
        for (std::size_t h = 0; h < opts.clusters; ++h) directions.push_back(unit_vector(opts.dims, rng));
    }
    const double noise = opts.kind == SyntheticKind::blobs ? opts.spread : opts.spread / 50.0;
    std::normal_distribution<double> g(0.0, noise);
    std::uniform_real_distribution<double> t(-opts.line_length / 2.0, opts.line_length / 2.0);
    for (std::size_t i = 0; i < opts.rows; ++i) {
        const std::size_t h = i % opts.clusters;
        s.labels[i] = static_cast<std::uint32_t>(h);
        const double along = opts.kind == SyntheticKind::lines ? t(rng) : 0.0;
        for (std::size_t j = 0; j < opts.dims; ++j) {
            double v = centers[h][j] + g(rng);
            if (opts.kind == SyntheticKind::lines) v += along * directions[h][j];
            x(i, j) = v;
        }
    }
    return s;
}

} // namespace csvd
