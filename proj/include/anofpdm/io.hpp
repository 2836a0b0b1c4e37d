#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "anofpdm/errors.hpp"
#include "anofpdm/grid.hpp"

namespace fpdm::io {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrerequisiteError("cannot open file: " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline std::uint64_t file_hash(const std::filesystem::path& path) {
    return fnv1a64(read_file(path));
}

// Writes to a sibling temp file then renames, so readers never observe a
// partial artifact.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw PrerequisiteError("cannot write file: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw PrerequisiteError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// Little-endian byte serialization.
struct ByteWriter {
    std::string buf;

    void u8(std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void bytes(const void* data, std::size_t n) {
        buf.append(static_cast<const char*>(data), n);
    }
};

struct ByteReader {
    const std::string& data;
    std::size_t pos = 0;

    explicit ByteReader(const std::string& d) : data(d) {}

    void need(std::size_t n) const {
        if (pos + n > data.size()) throw FormatError("truncated payload");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data[pos++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, data.data() + pos, n);
        pos += n;
    }
    bool at_end() const { return pos == data.size(); }
};

// 16-bit binary PGM (P5, maxval 65535, most significant byte first per the
// format). Values are affinely quantized between lo and hi.
inline void write_pgm16(const std::filesystem::path& path, const ImageGrid& grid, double lo,
                        double hi) {
    std::string out = "P5\n" + std::to_string(grid.width) + " " + std::to_string(grid.height) +
                      "\n65535\n";
    double span = hi - lo;
    for (double v : grid.values) {
        double norm = span > 0.0 ? (v - lo) / span : 0.0;
        norm = std::min(std::max(norm, 0.0), 1.0);
        auto q = static_cast<std::uint16_t>(std::lround(norm * 65535.0));
        out.push_back(static_cast<char>((q >> 8) & 0xff));
        out.push_back(static_cast<char>(q & 0xff));
    }
    atomic_write_file(path, out);
}

inline ImageGrid read_pgm16(const std::filesystem::path& path, double lo, double hi) {
    std::string data = read_file(path);
    int w = 0, h = 0, maxval = 0, consumed = 0;
    if (std::sscanf(data.c_str(), "P5\n%d %d\n%d\n%n", &w, &h, &maxval, &consumed) != 3 ||
        maxval != 65535)
        throw FormatError("not a 16-bit P5 PGM: " + path.string());
    ImageGrid g(h, w, GridRole::AnomalyMap);
    std::size_t need = static_cast<std::size_t>(w) * h * 2;
    if (data.size() - consumed < need) throw FormatError("truncated PGM: " + path.string());
    const unsigned char* p = reinterpret_cast<const unsigned char*>(data.data() + consumed);
    for (std::size_t i = 0; i < g.size(); ++i) {
        std::uint16_t q = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
        g.values[i] = lo + (hi - lo) * (static_cast<double>(q) / 65535.0);
    }
    return g;
}

// 8-bit binary PGM mask: 0 or 255.
inline void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) +
                      "\n255\n";
    for (auto v : mask.values) out.push_back(static_cast<char>(v ? 255 : 0));
    atomic_write_file(path, out);
}

inline BinaryMask read_pgm_mask(const std::filesystem::path& path) {
    std::string data = read_file(path);
    int w = 0, h = 0, maxval = 0, consumed = 0;
    if (std::sscanf(data.c_str(), "P5\n%d %d\n%d\n%n", &w, &h, &maxval, &consumed) != 3 ||
        maxval != 255)
        throw FormatError("not an 8-bit P5 PGM: " + path.string());
    BinaryMask m(h, w);
    if (data.size() - consumed < m.size()) throw FormatError("truncated PGM: " + path.string());
    for (std::size_t i = 0; i < m.size(); ++i)
        m.values[i] = static_cast<unsigned char>(data[consumed + static_cast<long>(i)]) >= 128;
    return m;
}

}  // namespace fpdm::io
