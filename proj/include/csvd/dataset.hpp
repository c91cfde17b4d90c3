#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csvd/matrix.hpp"

namespace csvd {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::size_t dtype_size(DType t);
std::string to_string(DType t);
DType parse_dtype(const std::string& name);

/// Raw feature vectors as stored in a dataset file.
struct Dataset {
    MatrixD values;
    DType dtype = DType::f64;

    std::size_t rows() const noexcept { return values.rows(); }
    std::size_t cols() const noexcept { return values.cols(); }
};

// FVEC layout: "FVEC", u32 version, u64 M, u32 N, u8 dtype, payload, u32 CRC.
inline constexpr std::uint32_t kFvecVersion = 1;

std::vector<std::byte> serialize_fvec(const Dataset& d);
Dataset deserialize_fvec(std::span<const std::byte> image);
void save_fvec(const Dataset& d, const std::filesystem::path& path);
Dataset load_fvec(const std::filesystem::path& path);

struct CsvOptions {
    bool header = false;  // skip the first non-blank line
    char delimiter = ',';
};

/// Parses a rectangular numeric CSV. Blank lines are ignored. Ragged rows,
/// non-numeric cells and out-of-range numbers throw DataError naming the line.
Dataset parse_csv(std::string_view text, const CsvOptions& opts = {});
Dataset load_csv(const std::filesystem::path& path, const CsvOptions& opts = {});

/// FVEC if the file starts with the FVEC magic, CSV otherwise.
Dataset load_dataset(const std::filesystem::path& path, const CsvOptions& csv = {});

enum class SyntheticKind : std::uint8_t { blobs, lines, uniform };

std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticOptions {
    SyntheticKind kind = SyntheticKind::blobs;
    std::size_t rows = 1000;
    std::size_t dims = 8;
    std::size_t clusters = 3;
    std::uint64_t seed = 42;
    double separation = 10.0;  // minimum distance between generating centers
    double spread = 1.0;       // blob std; line noise is spread / 50
    double line_length = 10.0;
};

struct Synthetic {
    Dataset data;
    std::vector<std::uint32_t> labels;
};

/// blobs: isotropic Gaussians. lines: points along H random line segments
/// with thin noise. uniform: the unit cube (all labels 0). Rows are assigned
/// to generators round-robin; output is a pure function of the options.
Synthetic generate(const SyntheticOptions& opts);

} // namespace csvd
