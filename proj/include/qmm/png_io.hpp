#pragma once

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <utility>

#include <png.h>

#include "qmm/core.hpp"

namespace qmm {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline uint32_t be32(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

} // namespace detail

// Cheap dimension probe: parses the signature + IHDR chunk directly.
// Returns (height, width).
inline std::pair<int, int> png_dimensions(const fs::path& path) {
    detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
    if (!f)
        throw IoError("cannot open " + path.string());
    unsigned char hdr[24];
    if (std::fread(hdr, 1, sizeof(hdr), f.get()) != sizeof(hdr))
        throw FormatError("not a PNG file (too short): " + path.string());
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (!std::equal(sig, sig + 8, hdr))
        throw FormatError("not a PNG file (bad signature): " + path.string());
    if (!(hdr[12] == 'I' && hdr[13] == 'H' && hdr[14] == 'D' && hdr[15] == 'R'))
        throw FormatError("PNG missing IHDR: " + path.string());
    uint32_t w = detail::be32(hdr + 16);
    uint32_t h = detail::be32(hdr + 20);
    if (w == 0 || h == 0 || w > 0x7fffffffu || h > 0x7fffffffu)
        throw FormatError("PNG has invalid dimensions: " + path.string());
    return {static_cast<int>(h), static_cast<int>(w)};
}

// Decodes to 8-bit gray (1ch) or RGB (3ch); 16-bit depth is stripped,
// palettes expanded, alpha dropped.
inline ImageBuffer read_png(const fs::path& path) {
    auto [height, width] = png_dimensions(path);

    detail::FilePtr file(std::fopen(path.string().c_str(), "rb"));
    if (!file)
        throw IoError("cannot open " + path.string());

    // Preallocated before setjmp; stride covers the RGBA worst case.
    const size_t stride = static_cast<size_t>(width) * 4;
    std::vector<unsigned char> pixels(stride * static_cast<size_t>(height));
    std::vector<png_bytep> rows(static_cast<size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[static_cast<size_t>(y)] = pixels.data() + stride * static_cast<size_t>(y);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng: failed to initialize reader");
    }
    int channels = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("PNG decode failure: " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);

    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);

    channels = png_get_channels(png, info);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (channels == 4) channels = 3;   // palette + tRNS can still expand to RGBA
    if (channels != 1 && channels != 3)
        throw FormatError("PNG with unsupported channel count " +
                          std::to_string(channels) + ": " + path.string());

    ImageBuffer out(height, width, channels);
    for (int y = 0; y < height; ++y) {
        const unsigned char* row = pixels.data() + stride * static_cast<size_t>(y);
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                out.at(c, y, x) = static_cast<float>(row[x * channels + c]) / 255.0f;
    }
    return out;
}

inline void write_png(const fs::path& path, const ImageBuffer& image) {
    if (image.channels != 1 && image.channels != 3)
        throw ParameterError("write_png: channels must be 1 or 3");
    if (image.height < 1 || image.width < 1)
        throw ParameterError("write_png: empty image");

    const int h = image.height, w = image.width, ch = image.channels;
    std::vector<unsigned char> bytes(static_cast<size_t>(h) * w * ch);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c) {
                float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
                bytes[(static_cast<size_t>(y) * w + x) * ch + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * w * ch;

    detail::FilePtr file(std::fopen(path.string().c_str(), "wb"));
    if (!file)
        throw IoError("cannot open for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        throw IoError("libpng: failed to initialize writer");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encode failure: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace qmm
