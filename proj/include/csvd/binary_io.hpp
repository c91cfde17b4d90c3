#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csvd/errors.hpp"

namespace csvd::io {

/// CRC-32 (zlib polynomial); pass a previous result as `seed` to continue a running checksum.
std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t seed = 0);

/// Appends little-endian encoded values to a growable byte buffer.
class ByteWriter {
public:
    void magic(std::string_view tag);
    void u8(std::uint8_t v) { bytes_.push_back(static_cast<std::byte>(v)); }
    void u16(std::uint16_t v) { put_le(v, 2); }
    void u32(std::uint32_t v) { put_le(v, 4); }
    void u64(std::uint64_t v) { put_le(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }
    void f32s(std::span<const float> v) {
        for (float x : v) f32(x);
    }
    void bytes(std::span<const std::byte> v) { bytes_.insert(bytes_.end(), v.begin(), v.end()); }
    void zeros(std::size_t n) { bytes_.resize(bytes_.size() + n, std::byte{0}); }

    /// Appends the CRC-32 of everything written so far.
    void crc_trailer() { u32(crc32(bytes_)); }

    std::size_t size() const noexcept { return bytes_.size(); }
    const std::vector<std::byte>& buffer() const noexcept { return bytes_; }
    std::vector<std::byte> take() { return std::move(bytes_); }

private:
    void put_le(std::uint64_t v, int width) {
        for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
    }

    std::vector<std::byte> bytes_;
};

/// Bounds-checked little-endian decoder; every overrun is a CorruptFileError.
class ByteReader {
public:
    ByteReader(std::span<const std::byte> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void expect_magic(std::string_view tag);
    std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
    std::uint64_t u64() { return get_le(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    void f64s(std::span<double> out) {
        for (double& x : out) x = f64();
    }
    void f32s(std::span<float> out) {
        for (float& x : out) x = f32();
    }
    std::span<const std::byte> bytes(std::size_t n);
    void skip(std::size_t n) { (void)bytes(n); }

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    [[noreturn]] void fail(const std::string& msg) const;

private:
    std::uint64_t get_le(int width);

    std::span<const std::byte> bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

/// Checks the leading magic tag and the trailing CRC-32 of a whole image, and
/// returns the bytes between them (magic included, checksum excluded).
std::span<const std::byte> checked_body(std::span<const std::byte> image, std::string_view magic,
                                        const std::string& what);

struct ReadStats {
    std::size_t read_calls = 0;
    std::size_t bytes_read = 0;
};

/// Loads a whole file with a single read call.
std::vector<std::byte> read_file(const std::filesystem::path& path, ReadStats* stats = nullptr);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

} // namespace csvd::io
