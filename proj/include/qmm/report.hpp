#pragma once

#include <iomanip>
#include <sstream>

#include "qmm/metrics.hpp"

namespace qmm {

namespace detail {

inline std::string fixed1(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    return os.str();
}

} // namespace detail

// Comparison table in the (input_mode x metric) layout; one row per run.
inline std::string render_markdown_table(const std::vector<MetricsReport>& reports) {
    std::vector<int> levels;
    for (const auto& r : reports)
        for (const auto& [level, value] : r.game)
            if (std::find(levels.begin(), levels.end(), level) == levels.end())
                levels.push_back(level);
    std::sort(levels.begin(), levels.end());

    std::ostringstream os;
    os << "| model | input_mode | split | n_images |";
    for (int level : levels) os << " GAME" << level << " |";
    os << "\n|---|---|---|---|";
    for (size_t i = 0; i < levels.size(); ++i) os << "---|";
    os << "\n";
    for (const auto& r : reports) {
        os << "| " << r.model << " | " << r.input_mode << " | " << r.split << " | "
           << r.n_images << " |";
        for (int level : levels) {
            auto it = r.game.find(level);
            os << " " << (it == r.game.end() ? std::string("-") : detail::fixed1(it->second))
               << " |";
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// small raster plotting (no text; series order is documented in report.md)

struct PlotSeries {
    std::string name;
    std::vector<double> values;
};

namespace detail {

inline const std::array<std::array<float, 3>, 8>& plot_palette() {
    static const std::array<std::array<float, 3>, 8> palette{{{0.122f, 0.467f, 0.706f},
                                                              {1.000f, 0.498f, 0.055f},
                                                              {0.173f, 0.627f, 0.173f},
                                                              {0.839f, 0.153f, 0.157f},
                                                              {0.580f, 0.404f, 0.741f},
                                                              {0.549f, 0.337f, 0.294f},
                                                              {0.890f, 0.467f, 0.761f},
                                                              {0.498f, 0.498f, 0.498f}}};
    return palette;
}

inline void put_pixel(ImageBuffer& img, int x, int y, const std::array<float, 3>& rgb) {
    if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
    for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[static_cast<size_t>(c)];
}

inline void draw_line(ImageBuffer& img, int x0, int y0, int x1, int y1,
                      const std::array<float, 3>& rgb) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
        put_pixel(img, x0, y0, rgb);
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

// viridis-style 5-stop ramp
inline std::array<float, 3> colormap(double t) {
    static const std::array<std::array<float, 3>, 5> stops{{{0.267f, 0.005f, 0.329f},
                                                            {0.229f, 0.322f, 0.545f},
                                                            {0.128f, 0.567f, 0.551f},
                                                            {0.369f, 0.789f, 0.383f},
                                                            {0.993f, 0.906f, 0.144f}}};
    t = std::clamp(t, 0.0, 1.0);
    double pos = t * 4.0;
    int lo = std::min(3, static_cast<int>(pos));
    double frac = pos - lo;
    std::array<float, 3> out{};
    for (int c = 0; c < 3; ++c)
        out[static_cast<size_t>(c)] =
            static_cast<float>(stops[static_cast<size_t>(lo)][static_cast<size_t>(c)] * (1 - frac) +
                               stops[static_cast<size_t>(lo + 1)][static_cast<size_t>(c)] * frac);
    return out;
}

} // namespace detail

// Polyline chart over a shared linear scale; x is the sample index. Legend
// squares along the top edge follow the series order.
inline ImageBuffer plot_loss_curves(const std::vector<PlotSeries>& series, int width = 640,
                                    int height = 400) {
    ImageBuffer img(height, width, 3, 1.0f);
    const int margin = 24;
    const std::array<float, 3> axis{0.2f, 0.2f, 0.2f};
    detail::draw_line(img, margin, height - margin, width - 8, height - margin, axis);
    detail::draw_line(img, margin, 8, margin, height - margin, axis);

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    size_t longest = 0;
    for (const auto& s : series) {
        longest = std::max(longest, s.values.size());
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!std::isfinite(lo) || longest < 2) return img;
    if (hi - lo < 1e-12) hi = lo + 1.0;

    auto to_x = [&](size_t i) {
        return margin + static_cast<int>(static_cast<double>(i) * (width - margin - 12) /
                                         static_cast<double>(longest - 1));
    };
    auto to_y = [&](double v) {
        double t = (v - lo) / (hi - lo);
        return height - margin - static_cast<int>(t * (height - margin - 16));
    };
    const auto& palette = detail::plot_palette();
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& rgb = palette[si % palette.size()];
        const auto& vals = series[si].values;
        for (size_t i = 0; i + 1 < vals.size(); ++i)
            detail::draw_line(img, to_x(i), to_y(vals[i]), to_x(i + 1), to_y(vals[i + 1]), rgb);
        // legend square
        int lx = margin + 4 + static_cast<int>(si) * 14;
        for (int dy = 0; dy < 8; ++dy)
            for (int dx = 0; dx < 8; ++dx)
                detail::put_pixel(img, lx + dx, 4 + dy, rgb);
    }
    return img;
}

// Predicted density next to ground truth on a shared color scale.
inline ImageBuffer density_side_by_side(const Grid2D& pred, const Grid2D& gt,
                                        int upscale = 8) {
    if (!pred.same_shape(gt))
        throw ParameterError("density_side_by_side: shape mismatch");
    double peak = 1e-12;
    for (double v : pred.values) peak = std::max(peak, v);
    for (double v : gt.values) peak = std::max(peak, v);

    const int divider = 4;
    const int h = pred.height * upscale;
    const int w = pred.width * upscale;
    ImageBuffer img(h, 2 * w + divider, 3, 1.0f);
    auto blit = [&](const Grid2D& g, int x_off) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                auto rgb = detail::colormap(g.at(y / upscale, x / upscale) / peak);
                detail::put_pixel(img, x_off + x, y, rgb);
            }
    };
    blit(pred, 0);
    blit(gt, w + divider);
    return img;
}

} // namespace qmm
