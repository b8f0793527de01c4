#pragma once

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "qmm/core.hpp"

namespace qmm {

// Truncated isotropic Gaussian; the window side 2*radius+1 is odd and the
// kernel is normalized to unit mass before placement.
struct KernelSpec {
    double sigma = 0.0;
    int radius = 0;

    static int default_radius(double sigma) {
        return std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    }
    static KernelSpec make(double sigma) { return {sigma, default_radius(sigma)}; }
    static KernelSpec make(double sigma, int radius) { return {sigma, radius}; }
};

inline Grid2D gaussian_kernel(const KernelSpec& spec) {
    if (!(spec.sigma > 0.0))
        throw ParameterError("gaussian_kernel: sigma must be > 0");
    if (spec.radius < 1)
        throw ParameterError("gaussian_kernel: radius must be >= 1");

    const int r = spec.radius;
    const int side = 2 * r + 1;
    Grid2D kernel(side, side);
    const double inv2s2 = 1.0 / (2.0 * spec.sigma * spec.sigma);
    double total = 0.0;
    for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
            double di = i - r, dj = j - r;
            double v = std::exp(-(di * di + dj * dj) * inv2s2);
            kernel.at(i, j) = v;
            total += v;
        }
    }
    for (double& v : kernel.values) v /= total;
    return kernel;
}

namespace detail {
inline void check_point_bounds(const PointSet& points, int height, int width) {
    for (size_t i = 0; i < points.size(); ++i) {
        const Point& p = points.points[i];
        if (!(p.x >= 0.0f) || !(p.x < static_cast<float>(width)) ||
            !(p.y >= 0.0f) || !(p.y < static_cast<float>(height)))
            throw AnnotationError("point " + std::to_string(i) + " at (" +
                                  std::to_string(p.x) + ", " + std::to_string(p.y) +
                                  ") outside " + std::to_string(width) + "x" +
                                  std::to_string(height) + " image");
    }
}
} // namespace detail

// Sparse localization map: +1 accumulated at (floor(y), floor(x)) per point.
inline Grid2D dot_map(const PointSet& points, int height, int width) {
    detail::check_point_bounds(points, height, width);
    Grid2D map(height, width);
    for (const Point& p : points.points) {
        int r = static_cast<int>(std::floor(p.y));
        int c = static_cast<int>(std::floor(p.x));
        map.at(r, c) += 1.0;
    }
    return map;
}

// One unit-mass kernel stamped per head; kernels clipped at the border are
// renormalized so every head still contributes exactly 1.0.
inline Grid2D density_map(const PointSet& points, int height, int width,
                          const KernelSpec& spec) {
    detail::check_point_bounds(points, height, width);
    const Grid2D kernel = gaussian_kernel(spec);
    const int r = spec.radius;

    Grid2D map(height, width);
    for (const Point& p : points.points) {
        int cy = static_cast<int>(std::floor(p.y));
        int cx = static_cast<int>(std::floor(p.x));
        int y0 = std::max(0, cy - r), y1 = std::min(height - 1, cy + r);
        int x0 = std::max(0, cx - r), x1 = std::min(width - 1, cx + r);

        double mass = 0.0;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                mass += kernel.at(y - cy + r, x - cx + r);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                map.at(y, x) += kernel.at(y - cy + r, x - cx + r) / mass;
    }
    return map;
}

// Ground truth at the counting network's reduced output resolution.
inline Grid2D target_at_scale(const PointSet& points, int height, int width,
                              const KernelSpec& spec, int factor) {
    if (factor < 1)
        throw ParameterError("target_at_scale: factor must be positive");
    if (height % factor != 0)
        throw DimensionError("target_at_scale: height " + std::to_string(height) +
                             " not divisible by factor " + std::to_string(factor));
    if (width % factor != 0)
        throw DimensionError("target_at_scale: width " + std::to_string(width) +
                             " not divisible by factor " + std::to_string(factor));
    return sum_pool(density_map(points, height, width, spec), factor);
}

// <id>.fgrd plus a sidecar <id>.json recording sigma, radius, factor.
inline void write_density_with_sidecar(const Grid2D& grid, const fs::path& dir,
                                       const std::string& id, const KernelSpec& spec,
                                       int factor) {
    write_grid(grid, dir / (id + ".fgrd"));
    nlohmann::json meta{{"sigma", spec.sigma}, {"radius", spec.radius}, {"factor", factor}};
    std::ofstream out(dir / (id + ".json"), std::ios::trunc);
    if (!out)
        throw IoError("cannot write sidecar for " + id);
    out << meta.dump() << "\n";
}

} // namespace qmm
