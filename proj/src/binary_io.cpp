#include "csvd/binary_io.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <memory>

#include <zlib.h>

namespace csvd::io {

std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t seed) {
    uLong crc = seed;
    const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
    std::size_t left = bytes.size();
    while (left > 0) {
        auto chunk = static_cast<uInt>(std::min<std::size_t>(left, std::numeric_limits<uInt>::max()));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        left -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

void ByteWriter::magic(std::string_view tag) {
    for (char c : tag) bytes_.push_back(static_cast<std::byte>(c));
}

void ByteReader::expect_magic(std::string_view tag) {
    auto got = bytes(tag.size());
    for (std::size_t i = 0; i < tag.size(); ++i) {
        if (static_cast<char>(got[i]) != tag[i]) fail("bad magic, expected \"" + std::string(tag) + "\"");
    }
}

std::span<const std::byte> ByteReader::bytes(std::size_t n) {
    if (n > remaining()) fail("truncated at offset " + std::to_string(pos_));
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::uint64_t ByteReader::get_le(int width) {
    auto raw = bytes(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(raw[i]) << (8 * i);
    return v;
}

std::span<const std::byte> checked_body(std::span<const std::byte> image, std::string_view magic,
                                        const std::string& what) {
    ByteReader head(image, what);
    head.expect_magic(magic);
    if (image.size() < magic.size() + 4) head.fail("truncated before checksum");
    const auto body = image.first(image.size() - 4);
    ByteReader tail(image.subspan(body.size()), what);
    if (crc32(body) != tail.u32()) head.fail("checksum mismatch");
    return body;
}

void ByteReader::fail(const std::string& msg) const { throw CorruptFileError(what_ + ": " + msg); }

namespace {
struct FileCloser {
    void operator()(std::FILE* f) const noexcept { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
} // namespace

std::vector<std::byte> read_file(const std::filesystem::path& path, ReadStats* stats) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw DataError("cannot stat " + path.string() + ": " + ec.message());
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw DataError("cannot open " + path.string());
    std::vector<std::byte> bytes(size);
    const std::size_t got = size == 0 ? 0 : std::fread(bytes.data(), 1, size, f.get());
    if (stats) {
        stats->read_calls += 1;
        stats->bytes_read += got;
    }
    if (got != size) throw CorruptFileError(path.string() + ": short read");
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw DataError("cannot create " + path.string());
    if (!bytes.empty() && std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) {
        throw DataError("short write to " + path.string());
    }
}

} // namespace csvd::io
