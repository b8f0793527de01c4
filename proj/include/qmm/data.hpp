#pragma once

#include <array>
#include <set>
#include <sstream>

#include <json.hpp>

#include "qmm/core.hpp"
#include "qmm/png_io.hpp"
#include "qmm/rng.hpp"

namespace qmm {

struct DatasetManifest {
    fs::path root;
    std::vector<SampleRecord> samples;
    double sigma = 0.0;

    std::vector<size_t> split_indices(Split split) const {
        std::vector<size_t> idx;
        for (size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == split) idx.push_back(i);
        return idx;
    }
};

namespace detail {

inline fs::path resolve_path(const fs::path& root, const std::string& rel) {
    fs::path p(rel);
    return p.is_absolute() ? p : root / p;
}

inline double read_dataset_sigma(const fs::path& root) {
    fs::path p = root / "dataset.json";
    std::ifstream in(p);
    if (!in)
        throw DataError("missing dataset.json next to manifest: " + p.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("dataset.json parse error: " + std::string(e.what()));
    }
    if (!j.contains("sigma") || !j["sigma"].is_number())
        throw FormatError("dataset.json must contain a numeric \"sigma\"");
    double sigma = j["sigma"].get<double>();
    if (!(sigma > 0.0))
        throw DataError("dataset sigma must be > 0, got " + std::to_string(sigma));
    return sigma;
}

} // namespace detail

// Manifest: UTF-8 JSON lines, one object per sample:
//   {"id": str, "rgb": relpath, "tir": relpath|null, "points": [[x,y],...],
//    "split": "train"|"val"|"test"}
// Dataset-level dataset.json carries {"sigma": float}. Every referenced file
// must exist and every point must fall inside its image.
inline DatasetManifest load_manifest(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in)
        throw IoError("cannot open manifest: " + manifest_path.string());

    DatasetManifest manifest;
    manifest.root = manifest_path.parent_path();
    manifest.sigma = detail::read_dataset_sigma(manifest.root);

    std::set<std::string> seen_ids;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest parse error at line " + std::to_string(line_no) +
                              ": " + e.what());
        }

        SampleRecord rec;
        try {
            rec.id = j.at("id").get<std::string>();
            rec.rgb_path = detail::resolve_path(manifest.root, j.at("rgb").get<std::string>());
            if (j.contains("tir") && !j["tir"].is_null())
                rec.tir_path = detail::resolve_path(manifest.root, j["tir"].get<std::string>());
            for (const auto& p : j.at("points")) {
                if (!p.is_array() || p.size() != 2)
                    throw FormatError("points entries must be [x, y] pairs");
                rec.points.add(p[0].get<float>(), p[1].get<float>());
            }
            rec.split = split_from_string(j.at("split").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest parse error at line " + std::to_string(line_no) +
                              ": " + e.what());
        }

        if (!seen_ids.insert(rec.id).second)
            throw DataError("duplicate sample id \"" + rec.id + "\" at line " +
                            std::to_string(line_no));
        if (!fs::exists(rec.rgb_path))
            throw DataError("load error: sample \"" + rec.id + "\" missing image file " +
                            rec.rgb_path.string());

        auto [h, w] = png_dimensions(rec.rgb_path);
        if (rec.tir_path) {
            if (!fs::exists(*rec.tir_path))
                throw DataError("load error: sample \"" + rec.id + "\" missing TIR file " +
                                rec.tir_path->string());
            auto [th, tw] = png_dimensions(*rec.tir_path);
            if (th != h || tw != w)
                throw DataError("sample \"" + rec.id + "\": TIR dimensions " +
                                std::to_string(tw) + "x" + std::to_string(th) +
                                " differ from RGB " + std::to_string(w) + "x" +
                                std::to_string(h));
        }
        for (size_t i = 0; i < rec.points.size(); ++i) {
            const Point& p = rec.points.points[i];
            if (!(p.x >= 0.0f) || !(p.x < static_cast<float>(w)) ||
                !(p.y >= 0.0f) || !(p.y < static_cast<float>(h)))
                throw AnnotationError("sample \"" + rec.id + "\": point " +
                                      std::to_string(i) + " at (" + std::to_string(p.x) +
                                      ", " + std::to_string(p.y) + ") outside " +
                                      std::to_string(w) + "x" + std::to_string(h));
        }
        manifest.samples.push_back(std::move(rec));
    }
    return manifest;
}

// Synthetic paired-scene parameters. dark_fraction is the probability that a
// head is rendered invisible in RGB while staying bright in TIR; sigma = 0
// derives the dataset kernel width from head_radius.
struct SynthParams {
    int n_images = 50;
    int height = 64;
    int width = 64;
    int heads_min = 4;
    int heads_max = 16;
    double head_radius = 3.0;
    double dark_fraction = 0.3;
    double sigma = 0.0;
    uint64_t seed = 1234;

    double effective_sigma() const { return sigma > 0.0 ? sigma : head_radius; }

    void validate() const {
        if (n_images < 1) throw ParameterError("synth: n_images must be >= 1");
        if (height < 32 || width < 32) throw ParameterError("synth: dims must be >= 32");
        if (heads_min < 0 || heads_max < heads_min)
            throw ParameterError("synth: need 0 <= heads_min <= heads_max");
        if (!(head_radius > 0.0)) throw ParameterError("synth: head_radius must be > 0");
        if (dark_fraction < 0.0 || dark_fraction > 1.0)
            throw ParameterError("synth: dark_fraction must be in [0,1]");
    }
};

struct SynthScene {
    ImageBuffer rgb;
    ImageBuffer tir;
    PointSet points;
};

namespace detail {

// Coarse-lattice value noise in [0,1], bilinearly interpolated.
struct ValueNoise {
    int cell = 8;
    int nx = 0, ny = 0;
    std::vector<double> lattice;

    ValueNoise(Rng& rng, int height, int width, int cell_size) : cell(cell_size) {
        nx = width / cell + 2;
        ny = height / cell + 2;
        lattice.resize(static_cast<size_t>(nx) * ny);
        for (double& v : lattice) v = rng.uniform();
    }

    double operator()(int y, int x) const {
        double fy = static_cast<double>(y) / cell, fx = static_cast<double>(x) / cell;
        int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
        double ty = fy - iy, tx = fx - ix;
        auto at = [&](int r, int c) { return lattice[static_cast<size_t>(r) * nx + c]; };
        double a = at(iy, ix) * (1 - tx) + at(iy, ix + 1) * tx;
        double b = at(iy + 1, ix) * (1 - tx) + at(iy + 1, ix + 1) * tx;
        return a * (1 - ty) + b * ty;
    }
};

// Soft-edged disc coverage in [0,1]: solid core, ~1px linear falloff.
inline double disc_coverage(double dist, double radius) {
    return std::clamp(radius - dist, 0.0, 1.0);
}

struct SynthHead {
    double x = 0, y = 0;
    bool dark = false;
    double rgb_jit[3] = {0, 0, 0};
    double tir_jit = 0;
};

inline void stamp_disc(ImageBuffer& img, int channel, double cx, double cy,
                       double radius, float level) {
    int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
    int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + radius + 1)));
    int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
    int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + radius + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double d = std::hypot(x - cx, y - cy);
            double cov = disc_coverage(d, radius);
            if (cov <= 0.0) continue;
            float v = static_cast<float>(level * cov);
            float& px = img.at(channel, y, x);
            px = std::max(px, v);
        }
}

} // namespace detail

// Deterministic in (params.seed, index): low-amplitude value-noise
// backgrounds; every head is a bright blob in TIR, while dark-selected heads
// are skipped in RGB. points lists all heads.
inline SynthScene synth_scene(const SynthParams& params, int index) {
    params.validate();
    Rng rng(substream_seed(params.seed, static_cast<uint64_t>(index)));
    const int h = params.height, w = params.width;

    SynthScene scene;
    scene.rgb = ImageBuffer(h, w, 3);
    scene.tir = ImageBuffer(h, w, 1);

    detail::ValueNoise rgb_noise(rng, h, w, 8);
    double chan_off[3] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    detail::ValueNoise tir_noise(rng, h, w, 8);

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double base = 0.32 + 0.10 * rgb_noise(y, x);
            for (int c = 0; c < 3; ++c)
                scene.rgb.at(c, y, x) =
                    static_cast<float>(std::clamp(base + 0.04 * chan_off[c], 0.0, 1.0));
            scene.tir.at(0, y, x) = static_cast<float>(0.10 + 0.08 * tir_noise(y, x));
        }

    const int n_heads = rng.uniform_int(params.heads_min, params.heads_max);
    const double r = params.head_radius;
    const double margin = r + 1.0;
    std::vector<detail::SynthHead> heads(static_cast<size_t>(n_heads));
    for (auto& head : heads) {
        head.x = rng.uniform(margin, w - 1 - margin);
        head.y = rng.uniform(margin, h - 1 - margin);
        head.dark = rng.bernoulli(params.dark_fraction);
        for (double& jit : head.rgb_jit) jit = rng.uniform(-1, 1);
        head.tir_jit = rng.uniform(-1, 1);
    }

    for (const auto& head : heads) {
        if (!head.dark) {
            // warm-toned blob, clearly above background
            float rgb_level[3] = {
                static_cast<float>(std::clamp(0.88 + 0.06 * head.rgb_jit[0], 0.0, 1.0)),
                static_cast<float>(std::clamp(0.78 + 0.06 * head.rgb_jit[1], 0.0, 1.0)),
                static_cast<float>(std::clamp(0.60 + 0.06 * head.rgb_jit[2], 0.0, 1.0))};
            for (int c = 0; c < 3; ++c)
                detail::stamp_disc(scene.rgb, c, head.x, head.y, r, rgb_level[c]);
        }
        float tir_level = static_cast<float>(std::clamp(0.90 + 0.05 * head.tir_jit, 0.0, 1.0));
        detail::stamp_disc(scene.tir, 0, head.x, head.y, r, tir_level);
        scene.points.add(static_cast<float>(head.x), static_cast<float>(head.y));
    }
    return scene;
}

namespace detail {

// Largest-remainder split sizes; ties resolved in (train, val, test) order.
inline std::array<int, 3> split_sizes(int n, const std::array<double, 3>& ratios) {
    double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-6)
        throw ParameterError("split ratios must sum to 1, got " + std::to_string(total));
    for (double r : ratios)
        if (r < 0.0) throw ParameterError("split ratios must be non-negative");

    std::array<int, 3> sizes{};
    std::array<double, 3> remainder{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = ratios[i] * n;
        sizes[i] = static_cast<int>(std::floor(exact));
        remainder[i] = exact - sizes[i];
        assigned += sizes[i];
    }
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (remainder[i] > remainder[best]) best = i;
        ++sizes[best];
        remainder[best] = -1.0;
        ++assigned;
    }
    return sizes;
}

} // namespace detail

// Writes PNGs + manifest.jsonl + dataset.json into out_dir; refuses a
// non-empty out_dir unless overwrite is set. Byte-identical for identical
// params.
inline DatasetManifest make_synth_dataset(const SynthParams& params,
                                          const fs::path& out_dir,
                                          const std::array<double, 3>& split_ratios,
                                          bool overwrite = false) {
    params.validate();
    auto sizes = detail::split_sizes(params.n_images, split_ratios);

    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !overwrite)
        throw IoError("output directory " + out_dir.string() +
                      " is not empty (use overwrite/--force)");
    fs::create_directories(out_dir / "images");

    // deterministic split assignment: seeded shuffle, then contiguous runs
    std::vector<int> order(static_cast<size_t>(params.n_images));
    for (int i = 0; i < params.n_images; ++i) order[static_cast<size_t>(i)] = i;
    Rng split_rng(substream_seed(params.seed, 0x53504c4954ull)); // "SPLIT"
    split_rng.shuffle(order.begin(), order.end());
    std::vector<Split> split_of(static_cast<size_t>(params.n_images));
    {
        int pos = 0;
        for (int s = 0; s < 3; ++s)
            for (int i = 0; i < sizes[static_cast<size_t>(s)]; ++i)
                split_of[static_cast<size_t>(order[static_cast<size_t>(pos++)])] =
                    static_cast<Split>(s);
    }

    std::ostringstream manifest_text;
    int digits = std::max(4, static_cast<int>(std::to_string(params.n_images - 1).size()));
    for (int i = 0; i < params.n_images; ++i) {
        SynthScene scene = synth_scene(params, i);
        std::string num = std::to_string(i);
        std::string id = "s" + std::string(static_cast<size_t>(digits) - num.size(), '0') + num;
        std::string rgb_rel = "images/" + id + "_rgb.png";
        std::string tir_rel = "images/" + id + "_tir.png";
        write_png(out_dir / rgb_rel, scene.rgb);
        write_png(out_dir / tir_rel, scene.tir);

        nlohmann::json points = nlohmann::json::array();
        for (const Point& p : scene.points.points)
            points.push_back({p.x, p.y});
        nlohmann::json line{{"id", id},
                            {"rgb", rgb_rel},
                            {"tir", tir_rel},
                            {"points", points},
                            {"split", to_string(split_of[static_cast<size_t>(i)])}};
        manifest_text << line.dump() << "\n";
    }

    {
        std::ofstream mf(out_dir / "manifest.jsonl", std::ios::trunc | std::ios::binary);
        if (!mf) throw IoError("cannot write manifest in " + out_dir.string());
        mf << manifest_text.str();
    }
    {
        nlohmann::json ds{{"sigma", params.effective_sigma()}};
        std::ofstream df(out_dir / "dataset.json", std::ios::trunc | std::ios::binary);
        if (!df) throw IoError("cannot write dataset.json in " + out_dir.string());
        df << ds.dump() << "\n";
    }
    return load_manifest(out_dir / "manifest.jsonl");
}

} // namespace qmm
