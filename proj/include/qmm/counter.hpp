#pragma once

#include <functional>
#include <mutex>

#include "qmm/data.hpp"
#include "qmm/density.hpp"
#include "qmm/gan.hpp"
#include "qmm/metrics.hpp"
#include "qmm/nn/adam.hpp"
#include "qmm/nn/checkpoint.hpp"
#include "qmm/parallel.hpp"

namespace qmm {

enum class InputMode { rgb, tir, rgb_tir };

inline const char* to_string(InputMode m) {
    switch (m) {
        case InputMode::rgb: return "rgb";
        case InputMode::tir: return "tir";
        case InputMode::rgb_tir: return "rgb+tir";
    }
    return "?";
}

inline InputMode input_mode_from_string(const std::string& s) {
    if (s == "rgb") return InputMode::rgb;
    if (s == "tir") return InputMode::tir;
    if (s == "rgb+tir") return InputMode::rgb_tir;
    throw ConfigError("unknown input mode \"" + s + "\" (expected rgb|tir|rgb+tir)");
}

// Declarative layer stack; the network is instantiated from these lists, and
// the ground-truth pooling factor is derived from them, never hard-coded.
struct ConvSpec {
    int in_ch, out_ch, kernel, pad, stride;
    bool operator==(const ConvSpec&) const = default;
};
struct PoolSpec {
    int kernel, stride;
    bool operator==(const PoolSpec&) const = default;
};
struct LayerSpec {
    enum class Kind { conv, pool } kind;
    ConvSpec conv{};
    PoolSpec pool{};

    static LayerSpec make_conv(int in_ch, int out_ch, int kernel, int pad, int stride) {
        return {Kind::conv, {in_ch, out_ch, kernel, pad, stride}, {}};
    }
    static LayerSpec make_pool(int kernel, int stride) {
        return {Kind::pool, {}, {kernel, stride}};
    }
    bool operator==(const LayerSpec&) const = default;
};

// Two branches of [conv 16, pool, conv 32, pool, conv 64, conv 128], 3x3
// kernels, ReLU after every conv; concat fusion conv (256->256) and a 1x1
// regressor with a final ReLU so density stays non-negative. The 1x1
// regressor uses padding 0 so output dims equal fusion dims.
struct MMCountConfig {
    std::vector<LayerSpec> rgb_branch;
    std::vector<LayerSpec> tir_branch;
    ConvSpec fusion{256, 256, 3, 1, 1};
    ConvSpec regressor{256, 1, 1, 0, 1};
    InputMode input_mode = InputMode::rgb_tir;

    MMCountConfig() {
        rgb_branch = default_branch(3, 1);
        tir_branch = default_branch(1, 1);
    }

    static std::vector<LayerSpec> default_branch(int in_channels, int div) {
        auto f = [div](int c) { return std::max(1, c / div); };
        return {LayerSpec::make_conv(in_channels, f(16), 3, 1, 1),
                LayerSpec::make_pool(2, 2),
                LayerSpec::make_conv(f(16), f(32), 3, 1, 1),
                LayerSpec::make_pool(2, 2),
                LayerSpec::make_conv(f(32), f(64), 3, 1, 1),
                LayerSpec::make_conv(f(64), f(128), 3, 1, 1)};
    }

    // test-scale model: every filter count divided by `div`
    static MMCountConfig scaled(int div, InputMode mode = InputMode::rgb_tir) {
        MMCountConfig cfg;
        cfg.rgb_branch = default_branch(3, div);
        cfg.tir_branch = default_branch(1, div);
        int c = std::max(1, 128 / div) * 2;
        cfg.fusion = {c, c, 3, 1, 1};
        cfg.regressor = {c, 1, 1, 0, 1};
        cfg.input_mode = mode;
        return cfg;
    }

    int downsample_factor() const {
        int f = 1;
        for (const auto& layer : rgb_branch)
            if (layer.kind == LayerSpec::Kind::pool) f *= layer.pool.stride;
        return f;
    }

    void validate() const {
        if (rgb_branch.empty() || tir_branch.empty())
            throw ConfigError("mmcount: branches must be non-empty");
        int rgb_out = 0, tir_out = 0;
        for (const auto& l : rgb_branch)
            if (l.kind == LayerSpec::Kind::conv) rgb_out = l.conv.out_ch;
        for (const auto& l : tir_branch)
            if (l.kind == LayerSpec::Kind::conv) tir_out = l.conv.out_ch;
        if (fusion.in_ch != rgb_out + tir_out)
            throw ConfigError("mmcount: fusion input channels must equal concat width");
        if (regressor.in_ch != fusion.out_ch || regressor.out_ch != 1)
            throw ConfigError("mmcount: regressor must map fusion channels to 1");
    }
};

struct CounterTrainConfig {
    int epochs_max = 100;
    int batch_size = 4;
    double lr = 1e-3;
    std::array<double, 2> adam_betas{0.9, 0.999};
    int early_stop_patience = 10;
    uint64_t seed = 1234;
    int threads = default_thread_count();
    // test affordance: stop once train MAE reaches this value (0 disables)
    double stop_at_train_mae = 0.0;

    void validate() const {
        if (epochs_max < 1 || batch_size < 1 || !(lr > 0.0) || threads < 1)
            throw ConfigError("counter train config: values must be positive");
        if (early_stop_patience < 1)
            throw ConfigError("counter train config: patience must be >= 1");
    }
};

// Stops once val MAE has not strictly improved for `patience` epochs.
struct EarlyStopTracker {
    int patience;
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = -1;

    explicit EarlyStopTracker(int patience_) : patience(patience_) {}

    // returns true when training should stop after this epoch
    bool update(int epoch, double val_mae) {
        if (val_mae < best) {
            best = val_mae;
            best_epoch = epoch;
            return false;
        }
        return epoch - best_epoch >= patience;
    }
};

// ---------------------------------------------------------------------------
// network

template <typename T>
struct BranchNet {
    std::vector<LayerSpec> spec;
    std::vector<nn::ConvLayer<T>> convs;

    BranchNet() = default;
    BranchNet(const std::vector<LayerSpec>& spec_, Rng& rng) : spec(spec_) {
        for (const auto& layer : spec)
            if (layer.kind == LayerSpec::Kind::conv) {
                convs.emplace_back(layer.conv.in_ch, layer.conv.out_ch, layer.conv.kernel,
                                   layer.conv.pad, layer.conv.stride);
                convs.back().init(rng);
            }
    }
    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& c : convs) n += c.parameter_count();
        return n;
    }
};

template <typename T>
struct BranchGrads {
    std::vector<nn::ConvGrads<T>> convs;
    BranchGrads() = default;
    explicit BranchGrads(const BranchNet<T>& net) {
        for (const auto& c : net.convs) convs.emplace_back(c);
    }
    void zero() {
        for (auto& g : convs) g.zero();
    }
};

template <typename T>
struct BranchWorkspace {
    std::vector<nn::Tensor<T>> outs;             // one per layer, post-activation
    std::vector<std::vector<int>> pool_argmax;   // one per pool layer
    nn::Tensor<T> ga, gb;                        // backward ping-pong scratch
};

template <typename T>
const nn::Tensor<T>& branch_forward(BranchNet<T>& net, BranchWorkspace<T>& ws,
                                    const nn::Tensor<T>& x, nn::ConvScratch<T>& scratch) {
    ws.outs.resize(net.spec.size());
    size_t n_pools = 0;
    for (const auto& l : net.spec)
        if (l.kind == LayerSpec::Kind::pool) ++n_pools;
    ws.pool_argmax.resize(n_pools);

    const nn::Tensor<T>* cur = &x;
    size_t ci = 0, pi = 0;
    for (size_t li = 0; li < net.spec.size(); ++li) {
        if (net.spec[li].kind == LayerSpec::Kind::conv) {
            nn::conv_forward(net.convs[ci], *cur, ws.outs[li], scratch);
            nn::relu_forward(ws.outs[li]);
            ++ci;
        } else {
            nn::maxpool2_forward(*cur, ws.outs[li], ws.pool_argmax[pi]);
            ++pi;
        }
        cur = &ws.outs[li];
    }
    return *cur;
}

// d_top consumed in place; input gradients are never needed (images).
template <typename T>
void branch_backward(BranchNet<T>& net, BranchWorkspace<T>& ws, const nn::Tensor<T>& x,
                     nn::Tensor<T>& d_top, BranchGrads<T>& grads,
                     nn::ConvScratch<T>& scratch) {
    size_t ci = net.convs.size();
    size_t pi = ws.pool_argmax.size();
    nn::Tensor<T>* cur = &d_top;
    auto next_buf = [&]() { return cur == &ws.ga ? &ws.gb : &ws.ga; };
    for (size_t li = net.spec.size(); li-- > 0;) {
        const nn::Tensor<T>& input = li == 0 ? x : ws.outs[li - 1];
        if (net.spec[li].kind == LayerSpec::Kind::conv) {
            --ci;
            nn::relu_backward(ws.outs[li], *cur);
            if (li == 0) {
                nn::conv_backward(net.convs[ci], input, *cur,
                                  static_cast<nn::Tensor<T>*>(nullptr), &grads.convs[ci],
                                  scratch);
            } else {
                nn::Tensor<T>* nxt = next_buf();
                nn::conv_backward(net.convs[ci], input, *cur, nxt, &grads.convs[ci], scratch);
                cur = nxt;
            }
        } else {
            --pi;
            nn::Tensor<T>* nxt = next_buf();
            nn::maxpool2_backward(ws.pool_argmax[pi], *cur, input.h, input.w, *nxt);
            cur = nxt;
        }
    }
}

// Introspectable description of the full instantiated stack.
struct MMCountLayerDesc {
    std::string stage;  // "rgb", "tir", "fusion", "regressor"
    LayerSpec layer;
    bool relu_after = false;
};

template <typename T>
struct MMCountNet {
    MMCountConfig cfg;
    BranchNet<T> rgb, tir;
    nn::ConvLayer<T> fusion, regressor;

    MMCountNet() = default;
    explicit MMCountNet(const MMCountConfig& cfg_, uint64_t init_seed = 3) : cfg(cfg_) {
        cfg.validate();
        Rng rng(init_seed);
        rgb = BranchNet<T>(cfg.rgb_branch, rng);
        tir = BranchNet<T>(cfg.tir_branch, rng);
        fusion = nn::ConvLayer<T>(cfg.fusion.in_ch, cfg.fusion.out_ch, cfg.fusion.kernel,
                                  cfg.fusion.pad, cfg.fusion.stride);
        fusion.init(rng);
        regressor = nn::ConvLayer<T>(cfg.regressor.in_ch, cfg.regressor.out_ch,
                                     cfg.regressor.kernel, cfg.regressor.pad,
                                     cfg.regressor.stride);
        regressor.init(rng, 1.0);
    }

    int downsample_factor() const { return cfg.downsample_factor(); }

    size_t parameter_count() const {
        return rgb.parameter_count() + tir.parameter_count() +
               fusion.parameter_count() + regressor.parameter_count();
    }

    std::vector<MMCountLayerDesc> layer_descs() const {
        std::vector<MMCountLayerDesc> out;
        for (const auto& l : cfg.rgb_branch)
            out.push_back({"rgb", l, l.kind == LayerSpec::Kind::conv});
        for (const auto& l : cfg.tir_branch)
            out.push_back({"tir", l, l.kind == LayerSpec::Kind::conv});
        out.push_back({"fusion",
                       LayerSpec::make_conv(cfg.fusion.in_ch, cfg.fusion.out_ch,
                                            cfg.fusion.kernel, cfg.fusion.pad,
                                            cfg.fusion.stride),
                       true});
        out.push_back({"regressor",
                       LayerSpec::make_conv(cfg.regressor.in_ch, cfg.regressor.out_ch,
                                            cfg.regressor.kernel, cfg.regressor.pad,
                                            cfg.regressor.stride),
                       true});
        return out;
    }

    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        for (size_t i = 0; i < rgb.convs.size(); ++i)
            nn::append_conv_params(out, "rgb.c" + std::to_string(i), rgb.convs[i]);
        for (size_t i = 0; i < tir.convs.size(); ++i)
            nn::append_conv_params(out, "tir.c" + std::to_string(i), tir.convs[i]);
        nn::append_conv_params(out, "fusion", fusion);
        nn::append_conv_params(out, "regressor", regressor);
        return out;
    }
};

template <typename T>
struct MMCountGrads {
    BranchGrads<T> rgb, tir;
    nn::ConvGrads<T> fusion, regressor;

    MMCountGrads() = default;
    explicit MMCountGrads(const MMCountNet<T>& net)
        : rgb(net.rgb), tir(net.tir), fusion(net.fusion), regressor(net.regressor) {}
    void zero() {
        rgb.zero();
        tir.zero();
        fusion.zero();
        regressor.zero();
    }
    std::vector<std::vector<T>*> refs() {
        std::vector<std::vector<T>*> out;
        for (auto& g : rgb.convs) nn::append_conv_grads(out, g);
        for (auto& g : tir.convs) nn::append_conv_grads(out, g);
        nn::append_conv_grads(out, fusion);
        nn::append_conv_grads(out, regressor);
        return out;
    }
};

template <typename T>
struct MMCountWorkspace {
    BranchWorkspace<T> rgb, tir;
    nn::Tensor<T> cat, fus, out;
    nn::Tensor<T> d_fus, d_cat, d_rgb, d_tir;
    nn::ConvScratch<T> scratch;
};

// Inputs are full batches; the branch a mode does not use receives zeros of
// the right shape, keeping capacity identical across the three input modes.
template <typename T>
const nn::Tensor<T>& mmcount_forward(MMCountNet<T>& net, MMCountWorkspace<T>& ws,
                                     const nn::Tensor<T>& rgb_in,
                                     const nn::Tensor<T>& tir_in) {
    if (rgb_in.n != tir_in.n || rgb_in.h != tir_in.h || rgb_in.w != tir_in.w)
        throw DimensionError("mmcount: rgb/tir batch shapes differ");
    const int factor = net.downsample_factor();
    if (rgb_in.h % factor != 0 || rgb_in.w % factor != 0)
        throw DimensionError("mmcount: input " + std::to_string(rgb_in.h) + "x" +
                             std::to_string(rgb_in.w) + " not divisible by factor " +
                             std::to_string(factor));
    const auto& rgb_top = branch_forward(net.rgb, ws.rgb, rgb_in, ws.scratch);
    const auto& tir_top = branch_forward(net.tir, ws.tir, tir_in, ws.scratch);
    nn::concat_channels(rgb_top, tir_top, ws.cat);
    nn::conv_forward(net.fusion, ws.cat, ws.fus, ws.scratch);
    nn::relu_forward(ws.fus);
    nn::conv_forward(net.regressor, ws.fus, ws.out, ws.scratch);
    nn::relu_forward(ws.out);
    return ws.out;
}

template <typename T>
void mmcount_backward(MMCountNet<T>& net, MMCountWorkspace<T>& ws,
                      const nn::Tensor<T>& rgb_in, const nn::Tensor<T>& tir_in,
                      nn::Tensor<T>& d_out, MMCountGrads<T>& grads) {
    nn::relu_backward(ws.out, d_out);
    nn::conv_backward(net.regressor, ws.fus, d_out, &ws.d_fus, &grads.regressor, ws.scratch);
    nn::relu_backward(ws.fus, ws.d_fus);
    nn::conv_backward(net.fusion, ws.cat, ws.d_fus, &ws.d_cat, &grads.fusion, ws.scratch);
    int rgb_channels = ws.cat.c - (net.tir.convs.empty() ? 0 : net.tir.convs.back().out_ch);
    nn::split_channels(ws.d_cat, ws.d_rgb, ws.d_tir, rgb_channels);
    branch_backward(net.rgb, ws.rgb, rgb_in, ws.d_rgb, grads.rgb, ws.scratch);
    branch_backward(net.tir, ws.tir, tir_in, ws.d_tir, grads.tir, ws.scratch);
}

inline MMCountNet<float> build_mmcount(const MMCountConfig& cfg, uint64_t seed = 3) {
    return MMCountNet<float>(cfg, seed);
}

// ---------------------------------------------------------------------------
// Eq-style density loss: per-sample sum of squared per-pixel differences,
// mean over samples.

template <typename T>
double mse_density_loss(const nn::Tensor<T>& predicted, const nn::Tensor<T>& target) {
    if (!predicted.same_shape(target))
        throw ParameterError("mse_density_loss: shape mismatch");
    if (predicted.n == 0)
        throw ParameterError("mse_density_loss: empty batch");
    double total = 0.0;
    for (int i = 0; i < predicted.n; ++i) {
        const T* p = predicted.sample(i);
        const T* t = target.sample(i);
        double s = 0.0;
        for (size_t k = 0; k < predicted.chw(); ++k) {
            double d = static_cast<double>(p[k]) - static_cast<double>(t[k]);
            s += d * d;
        }
        total += s;
    }
    return total / static_cast<double>(predicted.n);
}

template <typename T>
void mse_density_loss_grad(const nn::Tensor<T>& predicted, const nn::Tensor<T>& target,
                           double weight, nn::Tensor<T>& dpred) {
    dpred.resize(predicted.n, predicted.c, predicted.h, predicted.w);
    const double w = 2.0 * weight / static_cast<double>(predicted.n);
    for (size_t i = 0; i < predicted.size(); ++i)
        dpred.v[i] = static_cast<T>(w * (static_cast<double>(predicted.v[i]) -
                                         static_cast<double>(target.v[i])));
}

// ---------------------------------------------------------------------------
// data plumbing shared by training and evaluation

struct TirSource {
    enum class Kind { real, generated, none } kind = Kind::real;
    fs::path gan_checkpoint;

    static TirSource real() { return {Kind::real, {}}; }
    static TirSource none() { return {Kind::none, {}}; }
    static TirSource generated(const fs::path& ckpt) { return {Kind::generated, ckpt}; }

    static TirSource parse(const std::string& s) {
        if (s == "real") return real();
        if (s == "none") return none();
        if (s.rfind("generated:", 0) == 0) return generated(s.substr(10));
        throw ConfigError("tir_source must be real | none | generated:<checkpoint>, got \"" +
                          s + "\"");
    }
    std::string str() const {
        switch (kind) {
            case Kind::real: return "real";
            case Kind::none: return "none";
            case Kind::generated: return "generated:" + gan_checkpoint.string();
        }
        return "?";
    }
};

namespace detail {

struct CounterSample {
    std::string id;
    ImageBuffer rgb;  // empty when the mode never reads it
    ImageBuffer tir;
    Grid2D target;
    double count = 0.0;
    Split split = Split::train;
};

struct CounterDataset {
    std::vector<CounterSample> samples;
    int height = 0, width = 0;

    std::vector<size_t> of_split(Split s) const {
        std::vector<size_t> idx;
        for (size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == s) idx.push_back(i);
        return idx;
    }
};

// Loads every sample of the requested splits, resolves the TIR channel per
// tir_source, and precomputes ground-truth targets at the model scale.
inline CounterDataset load_counter_dataset(const DatasetManifest& manifest,
                                           const std::vector<Split>& splits,
                                           InputMode mode, const TirSource& tir_source,
                                           int factor, int threads) {
    const bool need_rgb = mode != InputMode::tir || tir_source.kind == TirSource::Kind::generated;
    const bool need_tir = mode != InputMode::rgb;

    if (need_tir && tir_source.kind == TirSource::Kind::none)
        throw DataError("input mode " + std::string(to_string(mode)) +
                        " requires a TIR source (real or generated)");

    std::optional<TrainedGan> gan;
    if (need_tir && tir_source.kind == TirSource::Kind::generated)
        gan = load_gan_checkpoint(tir_source.gan_checkpoint);

    std::vector<size_t> wanted;
    for (Split s : splits) {
        auto idx = manifest.split_indices(s);
        wanted.insert(wanted.end(), idx.begin(), idx.end());
    }

    CounterDataset ds;
    ds.samples.resize(wanted.size());
    KernelSpec spec = KernelSpec::make(manifest.sigma);

    parallel_chunks(static_cast<int>(wanted.size()), threads, [&](int begin, int end, int) {
        for (int k = begin; k < end; ++k) {
            const SampleRecord& rec = manifest.samples[wanted[static_cast<size_t>(k)]];
            CounterSample s;
            s.id = rec.id;
            s.split = rec.split;

            ImageBuffer rgb = read_png(rec.rgb_path);
            if (rgb.channels == 1) {
                ImageBuffer rgb3(rgb.height, rgb.width, 3);
                for (int c = 0; c < 3; ++c)
                    std::copy(rgb.values.begin(), rgb.values.end(),
                              rgb3.values.begin() + static_cast<long>(c) *
                                  static_cast<long>(rgb.plane()));
                rgb = std::move(rgb3);
            }
            const int h = rgb.height, w = rgb.width;
            if (h % factor != 0 || w % factor != 0)
                throw DimensionError("sample \"" + rec.id + "\": " + std::to_string(h) +
                                     "x" + std::to_string(w) +
                                     " not divisible by model factor " +
                                     std::to_string(factor));

            if (need_tir) {
                if (tir_source.kind == TirSource::Kind::real) {
                    if (!rec.tir_path)
                        throw DataError("tir_source=real but sample \"" + rec.id +
                                        "\" has no TIR image");
                    s.tir = to_grayscale(read_png(*rec.tir_path));
                } else {
                    auto generated = translate({rgb}, gan->gen, 1);
                    s.tir = std::move(generated[0]);
                }
            }
            if (need_rgb) s.rgb = std::move(rgb);

            s.count = static_cast<double>(rec.points.size());
            s.target = target_at_scale(rec.points, h, w, spec, factor);
            ds.samples[static_cast<size_t>(k)] = std::move(s);
        }
    });

    if (!ds.samples.empty()) {
        const ImageBuffer& first = need_rgb ? ds.samples[0].rgb : ds.samples[0].tir;
        ds.height = first.height;
        ds.width = first.width;
        for (const auto& s : ds.samples) {
            const ImageBuffer& img = need_rgb ? s.rgb : s.tir;
            if (img.height != ds.height || img.width != ds.width)
                throw DataError("mixed image sizes are unsupported; sample \"" + s.id +
                                "\" differs");
        }
    }
    return ds;
}

// Assembles (rgb, tir) batch tensors for the given sample indices; branches a
// mode does not use stay zero-filled.
template <typename T>
void fill_counter_batch(const CounterDataset& ds, const std::vector<size_t>& idx,
                        InputMode mode, nn::Tensor<T>& rgb, nn::Tensor<T>& tir) {
    const int b = static_cast<int>(idx.size());
    rgb.resize(b, 3, ds.height, ds.width);
    tir.resize(b, 1, ds.height, ds.width);
    for (int i = 0; i < b; ++i) {
        const CounterSample& s = ds.samples[idx[static_cast<size_t>(i)]];
        if (mode != InputMode::tir) nn::load_image(rgb, i, s.rgb);
        if (mode != InputMode::rgb) nn::load_image(tir, i, s.tir);
    }
}

template <typename T>
void fill_target_batch(const CounterDataset& ds, const std::vector<size_t>& idx,
                       nn::Tensor<T>& target) {
    const CounterSample& first = ds.samples[idx[0]];
    target.resize(static_cast<int>(idx.size()), 1, first.target.height, first.target.width);
    for (size_t i = 0; i < idx.size(); ++i) {
        const Grid2D& g = ds.samples[idx[i]].target;
        T* dst = target.sample(static_cast<int>(i));
        for (size_t k = 0; k < g.size(); ++k) dst[k] = static_cast<T>(g.values[k]);
    }
}

} // namespace detail

// The spec's forward operation over image buffers: predicted density grids at
// 1/factor resolution. A null/omitted modality that the mode requires is an
// error; a supplied modality the mode ignores is zero-filled.
inline std::vector<Grid2D> mmcount_predict(MMCountNet<float>& net,
                                           const std::vector<ImageBuffer>* rgb,
                                           const std::vector<ImageBuffer>* tir,
                                           int threads = default_thread_count()) {
    const InputMode mode = net.cfg.input_mode;
    if (mode != InputMode::tir && (rgb == nullptr || rgb->empty()))
        throw DataError("input mode " + std::string(to_string(mode)) + " requires RGB input");
    if (mode != InputMode::rgb && (tir == nullptr || tir->empty()))
        throw DataError("input mode " + std::string(to_string(mode)) + " requires TIR input");

    const std::vector<ImageBuffer>& ref = mode == InputMode::tir ? *tir : *rgb;
    const int n = static_cast<int>(ref.size());
    const int h = ref[0].height, w = ref[0].width;

    std::vector<Grid2D> out(static_cast<size_t>(n));
    parallel_chunks(n, threads, [&](int begin, int end, int) {
        MMCountWorkspace<float> ws;
        nn::Tensor<float> rgb1(1, 3, h, w), tir1(1, 1, h, w);
        for (int i = begin; i < end; ++i) {
            rgb1.zero();
            tir1.zero();
            if (mode != InputMode::tir) nn::load_image(rgb1, 0, (*rgb)[static_cast<size_t>(i)]);
            if (mode != InputMode::rgb) nn::load_image(tir1, 0, (*tir)[static_cast<size_t>(i)]);
            const auto& pred = mmcount_forward(net, ws, rgb1, tir1);
            out[static_cast<size_t>(i)] = nn::to_grid(pred, 0);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// training

struct CounterEpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_mae = 0.0;
    double train_mae = -1.0; // only filled when stop_at_train_mae is active
};

struct TrainedCounter {
    MMCountConfig model_cfg;
    CounterTrainConfig train_cfg;
    MMCountNet<float> net;
    std::vector<CounterEpochStats> history;
    int best_epoch = -1;
    double best_val_mae = std::numeric_limits<double>::infinity();
    std::string tir_source;
};

namespace detail {

template <typename T>
std::vector<double> predict_counts(MMCountNet<T>& net, const CounterDataset& ds,
                                   const std::vector<size_t>& idx, InputMode mode,
                                   int threads) {
    std::vector<double> counts(idx.size(), 0.0);
    parallel_chunks(static_cast<int>(idx.size()), threads, [&](int begin, int end, int) {
        MMCountWorkspace<T> ws;
        nn::Tensor<T> rgb(1, 3, ds.height, ds.width), tir(1, 1, ds.height, ds.width);
        for (int i = begin; i < end; ++i) {
            rgb.zero();
            tir.zero();
            const CounterSample& s = ds.samples[idx[static_cast<size_t>(i)]];
            if (mode != InputMode::tir) nn::load_image(rgb, 0, s.rgb);
            if (mode != InputMode::rgb) nn::load_image(tir, 0, s.tir);
            const auto& pred = mmcount_forward(net, ws, rgb, tir);
            double sum = 0.0;
            for (size_t k = 0; k < pred.chw(); ++k)
                sum += static_cast<double>(pred.v[k]);
            counts[static_cast<size_t>(i)] = sum;
        }
    });
    return counts;
}

template <typename T>
double split_mae(MMCountNet<T>& net, const CounterDataset& ds,
                 const std::vector<size_t>& idx, InputMode mode, int threads) {
    auto counts = predict_counts(net, ds, idx, mode, threads);
    std::vector<double> truths(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) truths[i] = ds.samples[idx[i]].count;
    return mae(counts, truths);
}

inline std::vector<float> snapshot_params(std::vector<nn::ParamRef<float>>& params) {
    std::vector<float> flat;
    for (auto& p : params) flat.insert(flat.end(), p.values->begin(), p.values->end());
    return flat;
}

inline void restore_params(std::vector<nn::ParamRef<float>>& params,
                           const std::vector<float>& flat) {
    size_t o = 0;
    for (auto& p : params) {
        std::copy(flat.begin() + static_cast<long>(o),
                  flat.begin() + static_cast<long>(o + p.values->size()), p.values->begin());
        o += p.values->size();
    }
}

} // namespace detail

// Adam on the density loss; per-epoch validation MAE drives early stopping
// with best-weights restoration. Ground truth is built with the manifest's
// sigma at the factor derived from the instantiated architecture.
inline TrainedCounter train_counter(const DatasetManifest& manifest,
                                    const MMCountConfig& model_cfg,
                                    const CounterTrainConfig& train_cfg,
                                    const TirSource& tir_source,
                                    const std::function<void(const CounterEpochStats&)>& on_epoch = {}) {
    model_cfg.validate();
    train_cfg.validate();
    if (model_cfg.input_mode == InputMode::rgb && tir_source.kind != TirSource::Kind::none)
        throw ConfigError("input mode rgb ignores TIR; use tir_source=none");

    TrainedCounter result;
    result.model_cfg = model_cfg;
    result.train_cfg = train_cfg;
    result.tir_source = tir_source.str();
    result.net = MMCountNet<float>(model_cfg, substream_seed(train_cfg.seed, 0xC0DE));

    auto ds = detail::load_counter_dataset(manifest, {Split::train, Split::val},
                                           model_cfg.input_mode, tir_source,
                                           result.net.downsample_factor(), train_cfg.threads);
    auto train_idx = ds.of_split(Split::train);
    auto val_idx = ds.of_split(Split::val);
    if (train_idx.empty())
        throw DataError("counter training: train split is empty");

    nn::AdamOptimizer<float> opt(train_cfg.lr, train_cfg.adam_betas[0], train_cfg.adam_betas[1]);
    auto params = result.net.params();

    const int n = static_cast<int>(train_idx.size());
    const int pool = std::min(std::max(1, train_cfg.threads),
                              std::max(1, std::min(n, train_cfg.batch_size)));
    std::vector<MMCountWorkspace<float>> ws(static_cast<size_t>(pool));
    std::vector<MMCountGrads<float>> slot;
    for (int i = 0; i < train_cfg.batch_size; ++i) slot.emplace_back(result.net);
    MMCountGrads<float> total(result.net);

    EarlyStopTracker stopper(train_cfg.early_stop_patience);
    std::vector<float> best_weights;

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < train_cfg.epochs_max; ++epoch) {
        Rng shuffle_rng(substream_seed(train_cfg.seed, 0xC0000000ull + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order.begin(), order.end());

        double ep_loss = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += train_cfg.batch_size) {
            const int bsz = std::min(train_cfg.batch_size, n - start);
            std::vector<double> losses(static_cast<size_t>(bsz), 0.0);

            parallel_chunks(bsz, pool, [&](int begin, int end, int chunk) {
                auto& w = ws[static_cast<size_t>(chunk)];
                nn::Tensor<float> rgb(1, 3, ds.height, ds.width);
                nn::Tensor<float> tir(1, 1, ds.height, ds.width);
                nn::Tensor<float> target, dpred;
                for (int bi = begin; bi < end; ++bi) {
                    size_t si = train_idx[static_cast<size_t>(
                        order[static_cast<size_t>(start + bi)])];
                    std::vector<size_t> one{si};
                    detail::fill_counter_batch(ds, one, model_cfg.input_mode, rgb, tir);
                    detail::fill_target_batch(ds, one, target);
                    slot[static_cast<size_t>(bi)].zero();
                    const auto& pred = mmcount_forward(result.net, w, rgb, tir);
                    losses[static_cast<size_t>(bi)] = mse_density_loss(pred, target);
                    // per-sample sum, mean over the whole batch
                    mse_density_loss_grad(pred, target, 1.0 / bsz, dpred);
                    mmcount_backward(result.net, w, rgb, tir, dpred,
                                     slot[static_cast<size_t>(bi)]);
                }
            });

            double batch_loss = mean_of(losses);
            if (!std::isfinite(batch_loss))
                throw TrainError("non-finite counter loss at epoch " + std::to_string(epoch) +
                                 " batch " + std::to_string(batches) + " (first sample \"" +
                                 ds.samples[train_idx[static_cast<size_t>(
                                     order[static_cast<size_t>(start)])]].id + "\")");

            total.zero();
            auto total_refs = total.refs();
            for (int bi = 0; bi < bsz; ++bi) {
                auto src = slot[static_cast<size_t>(bi)].refs();
                nn::accumulate_grads(total_refs, src);
            }
            opt.step(params, total_refs);
            ep_loss += batch_loss;
            ++batches;
        }

        CounterEpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = ep_loss / batches;

        bool stop = false;
        if (!val_idx.empty()) {
            stats.val_mae = detail::split_mae(result.net, ds, val_idx,
                                              model_cfg.input_mode, train_cfg.threads);
            if (stats.val_mae < stopper.best) {
                best_weights = detail::snapshot_params(params);
                result.best_val_mae = stats.val_mae;
            }
            stop = stopper.update(epoch, stats.val_mae);
            result.best_epoch = stopper.best_epoch;
        }
        if (train_cfg.stop_at_train_mae > 0.0) {
            stats.train_mae = detail::split_mae(result.net, ds, train_idx,
                                                model_cfg.input_mode, train_cfg.threads);
            if (stats.train_mae <= train_cfg.stop_at_train_mae) stop = true;
        }
        result.history.push_back(stats);
        if (on_epoch) on_epoch(stats);
        if (stop) break;
    }

    if (!best_weights.empty() && train_cfg.stop_at_train_mae <= 0.0)
        detail::restore_params(params, best_weights);
    return result;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalDump {
    std::string id;
    Grid2D pred;
    Grid2D gt;
};

// Per-image predicted count = sum of the predicted map; ground truth maps are
// built at the model's output resolution. game[0] is mae by definition.
inline MetricsReport evaluate(MMCountNet<float>& net, const DatasetManifest& manifest,
                              Split split, const std::vector<int>& levels,
                              const TirSource& tir_source,
                              const std::string& model_name = "MMCount",
                              int threads = default_thread_count(),
                              int dump_first_n = 0, std::vector<EvalDump>* dumps = nullptr) {
    auto ds = detail::load_counter_dataset(manifest, {split}, net.cfg.input_mode, tir_source,
                                           net.downsample_factor(), threads);
    std::vector<size_t> idx(ds.samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.empty())
        throw ParameterError("evaluate: split " + std::string(to_string(split)) +
                             " is empty");

    int level_max = 0;
    for (int level : levels) level_max = std::max(level_max, level);

    std::vector<double> est(idx.size()), truth(idx.size());
    std::vector<std::vector<double>> profiles(idx.size());
    std::mutex dump_mutex;

    parallel_chunks(static_cast<int>(idx.size()), threads, [&](int begin, int end, int) {
        MMCountWorkspace<float> ws;
        nn::Tensor<float> rgb(1, 3, ds.height, ds.width), tir(1, 1, ds.height, ds.width);
        for (int i = begin; i < end; ++i) {
            const detail::CounterSample& s = ds.samples[idx[static_cast<size_t>(i)]];
            rgb.zero();
            tir.zero();
            if (net.cfg.input_mode != InputMode::tir) nn::load_image(rgb, 0, s.rgb);
            if (net.cfg.input_mode != InputMode::rgb) nn::load_image(tir, 0, s.tir);
            const auto& pred_t = mmcount_forward(net, ws, rgb, tir);
            Grid2D pred = nn::to_grid(pred_t, 0);

            est[static_cast<size_t>(i)] = pred.sum();
            truth[static_cast<size_t>(i)] = s.count;
            profiles[static_cast<size_t>(i)] = game_profile(pred, s.target, level_max);

            if (dumps && i < dump_first_n) {
                std::lock_guard<std::mutex> lock(dump_mutex);
                dumps->push_back({s.id, pred, s.target});
            }
        }
    });

    MetricsReport report;
    report.model = model_name;
    report.input_mode = to_string(net.cfg.input_mode);
    report.split = to_string(split);
    report.n_images = static_cast<int>(idx.size());
    for (size_t i = 0; i < idx.size(); ++i)
        report.per_image.push_back({ds.samples[idx[i]].id, est[i], truth[i]});
    report.mae = mae(est, truth);
    for (int level : levels) {
        if (level == 0) {
            report.game[0] = report.mae;
        } else {
            std::vector<double> per(idx.size());
            for (size_t i = 0; i < idx.size(); ++i)
                per[i] = profiles[i][static_cast<size_t>(level)];
            report.game[level] = mean_of(per);
        }
    }
    if (dumps)
        std::sort(dumps->begin(), dumps->end(),
                  [](const EvalDump& a, const EvalDump& b) { return a.id < b.id; });
    return report;
}

// ---------------------------------------------------------------------------
// checkpoint container glue

inline nlohmann::json layer_spec_json(const LayerSpec& l) {
    if (l.kind == LayerSpec::Kind::conv)
        return {{"type", "conv"},
                {"in", l.conv.in_ch},
                {"out", l.conv.out_ch},
                {"kernel", l.conv.kernel},
                {"pad", l.conv.pad},
                {"stride", l.conv.stride}};
    return {{"type", "pool"}, {"kernel", l.pool.kernel}, {"stride", l.pool.stride}};
}

inline LayerSpec layer_spec_from_json(const nlohmann::json& j) {
    if (j.at("type").get<std::string>() == "conv")
        return LayerSpec::make_conv(j.at("in").get<int>(), j.at("out").get<int>(),
                                    j.at("kernel").get<int>(), j.at("pad").get<int>(),
                                    j.at("stride").get<int>());
    return LayerSpec::make_pool(j.at("kernel").get<int>(), j.at("stride").get<int>());
}

inline nlohmann::json counter_config_json(const MMCountConfig& cfg) {
    nlohmann::json rgb = nlohmann::json::array(), tir = nlohmann::json::array();
    for (const auto& l : cfg.rgb_branch) rgb.push_back(layer_spec_json(l));
    for (const auto& l : cfg.tir_branch) tir.push_back(layer_spec_json(l));
    return {{"rgb_branch", rgb},
            {"tir_branch", tir},
            {"fusion", layer_spec_json(LayerSpec::make_conv(cfg.fusion.in_ch, cfg.fusion.out_ch,
                                                            cfg.fusion.kernel, cfg.fusion.pad,
                                                            cfg.fusion.stride))},
            {"regressor",
             layer_spec_json(LayerSpec::make_conv(cfg.regressor.in_ch, cfg.regressor.out_ch,
                                                  cfg.regressor.kernel, cfg.regressor.pad,
                                                  cfg.regressor.stride))},
            {"input_mode", to_string(cfg.input_mode)}};
}

inline MMCountConfig counter_config_from_json(const nlohmann::json& j) {
    MMCountConfig cfg;
    cfg.rgb_branch.clear();
    cfg.tir_branch.clear();
    for (const auto& l : j.at("rgb_branch")) cfg.rgb_branch.push_back(layer_spec_from_json(l));
    for (const auto& l : j.at("tir_branch")) cfg.tir_branch.push_back(layer_spec_from_json(l));
    LayerSpec fusion = layer_spec_from_json(j.at("fusion"));
    LayerSpec regressor = layer_spec_from_json(j.at("regressor"));
    cfg.fusion = fusion.conv;
    cfg.regressor = regressor.conv;
    cfg.input_mode = input_mode_from_string(j.at("input_mode").get<std::string>());
    return cfg;
}

inline void save_counter_checkpoint(const fs::path& path, TrainedCounter& counter) {
    nlohmann::json history_tail = nlohmann::json::array();
    size_t start = counter.history.size() > 10 ? counter.history.size() - 10 : 0;
    for (size_t i = start; i < counter.history.size(); ++i)
        history_tail.push_back({{"epoch", counter.history[i].epoch},
                                {"train_loss", counter.history[i].train_loss},
                                {"val_mae", counter.history[i].val_mae}});
    nlohmann::json meta{{"kind", "counter"},
                        {"seed", counter.train_cfg.seed},
                        {"epoch", counter.history.empty() ? 0 : counter.history.back().epoch},
                        {"best_epoch", counter.best_epoch},
                        {"tir_source", counter.tir_source},
                        {"config", counter_config_json(counter.model_cfg)},
                        {"history_tail", history_tail}};
    auto params = counter.net.params();
    nn::write_checkpoint(path, meta, params);
}

inline TrainedCounter load_counter_checkpoint(const fs::path& path) {
    nlohmann::json meta = nn::read_checkpoint_meta(path);
    if (meta.at("kind").get<std::string>() != "counter")
        throw FormatError("checkpoint is not a counter checkpoint: " + path.string());
    TrainedCounter counter;
    counter.model_cfg = counter_config_from_json(meta.at("config"));
    counter.net = MMCountNet<float>(counter.model_cfg);
    counter.train_cfg.seed = meta.at("seed").get<uint64_t>();
    counter.best_epoch = meta.value("best_epoch", -1);
    counter.tir_source = meta.value("tir_source", std::string("real"));
    auto params = counter.net.params();
    nn::load_checkpoint_arrays(path, params);
    return counter;
}

} // namespace qmm
