#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "qmm/error.hpp"

namespace qmm {

namespace fs = std::filesystem;

namespace detail {
inline size_t checked_grid_size(int height, int width) {
    if (height < 1 || width < 1)
        throw ParameterError("grid dimensions must be >= 1, got " +
                             std::to_string(height) + "x" + std::to_string(width));
    return static_cast<size_t>(height) * static_cast<size_t>(width);
}
} // namespace detail

// Row-major raster of finite values; the unit of count-preserving math.
// Density grids additionally keep every cell >= 0.
struct Grid2D {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    Grid2D() = default;
    Grid2D(int h, int w, double fill = 0.0)
        : height(h), width(w), values(detail::checked_grid_size(h, w), fill) {}

    double& at(int r, int c) { return values[static_cast<size_t>(r) * width + c]; }
    double at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }
    size_t size() const { return values.size(); }

    double sum() const {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(),
                           [](double v) { return std::isfinite(v); });
    }

    bool same_shape(const Grid2D& other) const {
        return height == other.height && width == other.width;
    }
};

// FGRD: "FGRD" magic, u16-le width, u16-le height, then h*w float32-le row-major.
inline void write_grid(const Grid2D& grid, const fs::path& path) {
    if (grid.height < 1 || grid.width < 1)
        throw ParameterError("write_grid: empty grid");
    if (grid.height > 0xffff || grid.width > 0xffff)
        throw ParameterError("write_grid: FGRD dimensions are limited to 65535");
    if (!grid.all_finite())
        throw ParameterError("write_grid: grid contains non-finite values");

    std::vector<unsigned char> buf(8 + grid.size() * 4);
    buf[0] = 'F'; buf[1] = 'G'; buf[2] = 'R'; buf[3] = 'D';
    buf[4] = static_cast<unsigned char>(grid.width & 0xff);
    buf[5] = static_cast<unsigned char>((grid.width >> 8) & 0xff);
    buf[6] = static_cast<unsigned char>(grid.height & 0xff);
    buf[7] = static_cast<unsigned char>((grid.height >> 8) & 0xff);
    size_t o = 8;
    for (double v : grid.values) {
        uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(v));
        buf[o++] = static_cast<unsigned char>(bits & 0xff);
        buf[o++] = static_cast<unsigned char>((bits >> 8) & 0xff);
        buf[o++] = static_cast<unsigned char>((bits >> 16) & 0xff);
        buf[o++] = static_cast<unsigned char>((bits >> 24) & 0xff);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("write error: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out)
        throw IoError("write error: " + path.string());
}

inline Grid2D read_grid(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("read error: cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 8)
        throw FormatError("FGRD: file too short: " + path.string());
    if (buf[0] != 'F' || buf[1] != 'G' || buf[2] != 'R' || buf[3] != 'D')
        throw FormatError("FGRD: bad magic: " + path.string());
    int width = buf[4] | (buf[5] << 8);
    int height = buf[6] | (buf[7] << 8);
    if (width < 1 || height < 1)
        throw FormatError("FGRD: bad dimensions: " + path.string());
    size_t need = static_cast<size_t>(width) * height * 4;
    if (buf.size() - 8 < need)
        throw FormatError("FGRD: truncated payload: " + path.string());
    if (buf.size() - 8 > need)
        throw FormatError("FGRD: trailing bytes after payload: " + path.string());

    Grid2D grid(height, width);
    size_t o = 8;
    for (double& v : grid.values) {
        uint32_t bits = static_cast<uint32_t>(buf[o]) |
                        (static_cast<uint32_t>(buf[o + 1]) << 8) |
                        (static_cast<uint32_t>(buf[o + 2]) << 16) |
                        (static_cast<uint32_t>(buf[o + 3]) << 24);
        o += 4;
        float f = std::bit_cast<float>(bits);
        if (!std::isfinite(f))
            throw FormatError("FGRD: non-finite value in payload: " + path.string());
        v = static_cast<double>(f);
    }
    return grid;
}

// Block-sum reduction; conserves total mass.
inline Grid2D sum_pool(const Grid2D& grid, int factor) {
    if (factor < 1)
        throw ParameterError("sum_pool: factor must be positive");
    if (grid.height % factor != 0)
        throw DimensionError("sum_pool: height " + std::to_string(grid.height) +
                             " not divisible by factor " + std::to_string(factor));
    if (grid.width % factor != 0)
        throw DimensionError("sum_pool: width " + std::to_string(grid.width) +
                             " not divisible by factor " + std::to_string(factor));
    if (factor == 1) return grid;

    Grid2D out(grid.height / factor, grid.width / factor);
    for (int r = 0; r < out.height; ++r) {
        for (int c = 0; c < out.width; ++c) {
            double s = 0.0;
            for (int dr = 0; dr < factor; ++dr)
                for (int dc = 0; dc < factor; ++dc)
                    s += grid.at(r * factor + dr, c * factor + dc);
            out.at(r, c) = s;
        }
    }
    return out;
}

// Planar float image, values in [0,1]; channels is 1 (TIR/gray) or 3 (RGB).
struct ImageBuffer {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> values; // [channel][row][col]

    ImageBuffer() = default;
    ImageBuffer(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          values(detail::checked_grid_size(h, w) * static_cast<size_t>(c), fill) {
        if (c != 1 && c != 3)
            throw ParameterError("ImageBuffer: channels must be 1 or 3");
    }

    size_t plane() const { return static_cast<size_t>(height) * width; }
    float& at(int c, int y, int x) {
        return values[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return values[(static_cast<size_t>(c) * height + y) * width + x];
    }
};

// BT.601 luma. 1-channel input passes through unchanged.
inline ImageBuffer to_grayscale(const ImageBuffer& image) {
    if (image.channels == 1) return image;
    if (image.channels != 3)
        throw ParameterError("to_grayscale: expected 1 or 3 channels");
    ImageBuffer out(image.height, image.width, 1);
    const float* r = image.values.data();
    const float* g = r + image.plane();
    const float* b = g + image.plane();
    for (size_t i = 0; i < out.plane(); ++i)
        out.values[i] =
            static_cast<float>(0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]);
    return out;
}

// (x = column, y = row), origin top-left, pixel units. Duplicates allowed.
struct Point {
    float x = 0.0f;
    float y = 0.0f;
};

struct PointSet {
    std::vector<Point> points;

    size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    void add(float x, float y) { points.push_back({x, y}); }
};

enum class Split { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw FormatError("unknown split \"" + s + "\" (expected train|val|test)");
}

// One scene: RGB image, optional paired TIR image, head annotations.
struct SampleRecord {
    std::string id;
    fs::path rgb_path;
    std::optional<fs::path> tir_path;
    PointSet points;
    Split split = Split::train;
};

} // namespace qmm
