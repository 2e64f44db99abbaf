// Indexed-color PNG dumps of label maps — the label-evolution snapshot
// images. Fixed palette: background black, muscle pink, SAT yellow,
// VAT blue.
#pragma once

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "segrefine/errors.hpp"
#include "segrefine/labelmap.hpp"

namespace segrefine {

inline constexpr unsigned char kLabelPalette[4][3] = {
    {0x00, 0x00, 0x00},  // 0 background
    {0xFF, 0x69, 0xB4},  // 1 muscle
    {0xFF, 0xD7, 0x00},  // 2 SAT
    {0x1E, 0x90, 0xFF},  // 3 VAT
};

namespace detail {

inline void png_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
    const auto len = static_cast<std::uint32_t>(data.size());
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<unsigned char>((len >> (8 * i)) & 0xff));
    const std::size_t type_pos = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = static_cast<std::uint32_t>(
        ::crc32(0, out.data() + type_pos, static_cast<uInt>(4 + data.size())));
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<unsigned char>((crc >> (8 * i)) & 0xff));
}

}  // namespace detail

/// Writes a 4-class label map as an 8-bit paletted PNG.
inline void write_label_png(const std::filesystem::path& path, const LabelMap& m) {
    if (m.h < 1 || m.w < 1) throw ConfigError("write_label_png: empty map");
    for (const std::uint8_t v : m.v) {
        if (v >= 4) throw ConfigError("write_label_png: label value out of palette range");
    }

    std::vector<unsigned char> png{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

    std::vector<unsigned char> ihdr;
    const auto wu = static_cast<std::uint32_t>(m.w), hu = static_cast<std::uint32_t>(m.h);
    for (int i = 3; i >= 0; --i) ihdr.push_back(static_cast<unsigned char>((wu >> (8 * i)) & 0xff));
    for (int i = 3; i >= 0; --i) ihdr.push_back(static_cast<unsigned char>((hu >> (8 * i)) & 0xff));
    ihdr.insert(ihdr.end(), {8, 3, 0, 0, 0});  // depth 8, palette, default methods
    detail::png_chunk(png, "IHDR", ihdr);

    std::vector<unsigned char> plte;
    for (const auto& rgb : kLabelPalette) plte.insert(plte.end(), rgb, rgb + 3);
    detail::png_chunk(png, "PLTE", plte);

    // scanlines: filter byte 0 + row of palette indices
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(m.h * (m.w + 1)));
    for (std::int64_t y = 0; y < m.h; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), m.v.begin() + static_cast<std::ptrdiff_t>(y * m.w),
                   m.v.begin() + static_cast<std::ptrdiff_t>((y + 1) * m.w));
    }
    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> idat(bound);
    if (::compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw IoError("write_label_png: deflate failed");
    }
    idat.resize(bound);
    detail::png_chunk(png, "IDAT", idat);
    detail::png_chunk(png, "IEND", {});

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace segrefine
