#pragma once

#include <map>
#include <sstream>

#include <json.hpp>

#include "qmm/core.hpp"

namespace qmm {

inline double mean_of(const std::vector<double>& values) {
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

// Mean absolute error over per-image counts.
inline double mae(const std::vector<double>& estimates,
                  const std::vector<double>& truths) {
    if (estimates.empty())
        throw ParameterError("mae: empty input");
    if (estimates.size() != truths.size())
        throw ParameterError("mae: length mismatch (" + std::to_string(estimates.size()) +
                             " vs " + std::to_string(truths.size()) + ")");
    double s = 0.0;
    for (size_t i = 0; i < estimates.size(); ++i)
        s += std::abs(estimates[i] - truths[i]);
    return s / static_cast<double>(estimates.size());
}

// Half-open [row0,row1) x [col0,col1).
struct PatchRect {
    int row0 = 0, col0 = 0, row1 = 0, col1 = 0;
};

// 4^level disjoint rectangles tiling the grid; each axis is cut at
// floor(k*dim/2^level), so patch sides differ by at most one.
inline std::vector<PatchRect> partition_patches(int height, int width, int level) {
    if (level < 0)
        throw ParameterError("partition_patches: level must be >= 0");
    if (level >= 30 || (1 << level) > std::min(height, width))
        throw ParameterError("partition_patches: 2^" + std::to_string(level) +
                             " patches per axis exceed min(" + std::to_string(height) +
                             ", " + std::to_string(width) + ")");
    const int k = 1 << level;
    auto cut = [](int dim, int k, int i) {
        return static_cast<int>((static_cast<int64_t>(i) * dim) / k);
    };
    std::vector<PatchRect> rects;
    rects.reserve(static_cast<size_t>(k) * k);
    for (int pr = 0; pr < k; ++pr)
        for (int pc = 0; pc < k; ++pc)
            rects.push_back({cut(height, k, pr), cut(width, k, pc),
                             cut(height, k, pr + 1), cut(width, k, pc + 1)});
    return rects;
}

namespace detail {

inline double patch_sum(const Grid2D& g, const PatchRect& r) {
    double s = 0.0;
    for (int y = r.row0; y < r.row1; ++y)
        for (int x = r.col0; x < r.col1; ++x)
            s += g.at(y, x);
    return s;
}

// Sums 2x2 blocks of a k x k row-major array in fixed (00,01,10,11) order.
inline std::vector<double> collapse2x2(const std::vector<double>& v, int k) {
    const int half = k / 2;
    std::vector<double> out(static_cast<size_t>(half) * half);
    for (int r = 0; r < half; ++r)
        for (int c = 0; c < half; ++c)
            out[static_cast<size_t>(r) * half + c] =
                v[static_cast<size_t>(2 * r) * k + 2 * c] +
                v[static_cast<size_t>(2 * r) * k + 2 * c + 1] +
                v[static_cast<size_t>(2 * r + 1) * k + 2 * c] +
                v[static_cast<size_t>(2 * r + 1) * k + 2 * c + 1];
    return out;
}

// Tree-sum grouped by the patch hierarchy. Using the same fixed 2x2
// grouping for both the signed diffs and their absolute values keeps
// GAME(L) <= GAME(L+1) exact in floating point, not just in the limit.
inline double tree_abs_sum(std::vector<double> v, int k) {
    for (double& x : v) x = std::abs(x);
    while (k > 1) {
        v = collapse2x2(v, k);
        k /= 2;
    }
    return v[0];
}

} // namespace detail

// Per-image GAME for every level 0..level_max in one hierarchical pass.
// result[L] = sum over 4^L patches of |sum(est patch) - sum(truth patch)|.
inline std::vector<double> game_profile(const Grid2D& estimated, const Grid2D& truth,
                                        int level_max) {
    if (!estimated.same_shape(truth))
        throw ParameterError("game: grid dimension mismatch (" +
                             std::to_string(estimated.height) + "x" +
                             std::to_string(estimated.width) + " vs " +
                             std::to_string(truth.height) + "x" +
                             std::to_string(truth.width) + ")");
    auto rects = partition_patches(estimated.height, estimated.width, level_max);

    int k = 1 << level_max;
    std::vector<double> diff(rects.size());
    for (size_t i = 0; i < rects.size(); ++i)
        diff[i] = detail::patch_sum(estimated, rects[i]) -
                  detail::patch_sum(truth, rects[i]);

    std::vector<double> out(static_cast<size_t>(level_max) + 1);
    for (int level = level_max; level >= 0; --level) {
        out[static_cast<size_t>(level)] = detail::tree_abs_sum(diff, k);
        if (level > 0) {
            diff = detail::collapse2x2(diff, k);
            k /= 2;
        }
    }
    return out;
}

inline double game(const Grid2D& estimated, const Grid2D& truth, int level) {
    return game_profile(estimated, truth, level).back();
}

struct PerImageCount {
    std::string id;
    double estimated = 0.0;
    double truth = 0.0;
};

// Per-split evaluation results; game[0] equals mae by construction.
struct MetricsReport {
    std::string model;
    std::string input_mode;
    std::string split;
    int n_images = 0;
    double mae = 0.0;
    std::map<int, double> game;
    std::vector<PerImageCount> per_image;

    // optional pointers consumed by the report renderer (paths relative
    // to the metrics file)
    std::string history_file;
    std::vector<std::array<std::string, 3>> density_samples; // id, pred, gt

    nlohmann::json to_json() const {
        nlohmann::json game_j = nlohmann::json::object();
        for (const auto& [level, value] : game)
            game_j[std::to_string(level)] = value;
        nlohmann::json per_j = nlohmann::json::array();
        for (const auto& p : per_image)
            per_j.push_back({{"id", p.id}, {"estimated", p.estimated}, {"truth", p.truth}});
        nlohmann::json j{{"model", model},     {"input_mode", input_mode},
                         {"split", split},     {"n_images", n_images},
                         {"mae", mae},         {"game", game_j},
                         {"per_image", per_j}};
        if (!history_file.empty()) j["history"] = history_file;
        if (!density_samples.empty()) {
            nlohmann::json d = nlohmann::json::array();
            for (const auto& s : density_samples)
                d.push_back({{"id", s[0]}, {"pred", s[1]}, {"gt", s[2]}});
            j["density_samples"] = d;
        }
        return j;
    }

    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport r;
        r.model = j.at("model").get<std::string>();
        r.input_mode = j.at("input_mode").get<std::string>();
        r.split = j.at("split").get<std::string>();
        r.n_images = j.at("n_images").get<int>();
        r.mae = j.at("mae").get<double>();
        for (const auto& [key, value] : j.at("game").items())
            r.game[std::stoi(key)] = value.get<double>();
        for (const auto& p : j.at("per_image"))
            r.per_image.push_back({p.at("id").get<std::string>(),
                                   p.at("estimated").get<double>(),
                                   p.at("truth").get<double>()});
        if (j.contains("history")) r.history_file = j["history"].get<std::string>();
        if (j.contains("density_samples"))
            for (const auto& s : j["density_samples"])
                r.density_samples.push_back({s.at("id").get<std::string>(),
                                             s.at("pred").get<std::string>(),
                                             s.at("gt").get<std::string>()});
        return r;
    }
};

namespace detail {
inline std::string format_metric(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}
} // namespace detail

// CSV with the comparison-table layout: model,input_mode,GAME0,GAME1,...
// Levels are the sorted union over the reports; missing cells stay empty.
inline std::string metrics_csv(const std::vector<MetricsReport>& reports) {
    std::vector<int> levels;
    for (const auto& r : reports)
        for (const auto& [level, value] : r.game)
            if (std::find(levels.begin(), levels.end(), level) == levels.end())
                levels.push_back(level);
    std::sort(levels.begin(), levels.end());

    std::string out = "model,input_mode";
    for (int level : levels) out += ",GAME" + std::to_string(level);
    out += "\n";
    for (const auto& r : reports) {
        out += r.model + "," + r.input_mode;
        for (int level : levels) {
            auto it = r.game.find(level);
            out += ",";
            if (it != r.game.end()) out += detail::format_metric(it->second);
        }
        out += "\n";
    }
    return out;
}

} // namespace qmm
