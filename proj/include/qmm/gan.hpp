#pragma once

#include <functional>

#include "qmm/data.hpp"
#include "qmm/metrics.hpp"
#include "qmm/nn/adam.hpp"
#include "qmm/nn/checkpoint.hpp"
#include "qmm/nn/layers.hpp"
#include "qmm/parallel.hpp"

namespace qmm {

// U-shaped encoder-decoder translating 3-channel RGB to 1-channel TIR.
// Each encoder level halves the spatial dims; decoder level k concatenates
// encoder level k features when skip connections are on.
struct GeneratorConfig {
    int levels = 4;
    int base_filters = 32;
    bool skip_connections = true;

    void validate() const {
        if (levels < 1) throw ConfigError("generator: levels must be >= 1");
        if (base_filters < 1) throw ConfigError("generator: base_filters must be >= 1");
        if (levels > 10) throw ConfigError("generator: levels > 10 is unsupported");
    }
    int downsample() const { return 1 << levels; }
};

// Patch discriminator over the (RGB, TIR) channel concat; emits a logit grid
// at 1/2^layers resolution, sigmoid applied inside the losses.
struct DiscriminatorConfig {
    int layers = 3;
    int base_filters = 32;

    void validate() const {
        if (layers < 1) throw ConfigError("discriminator: layers must be >= 1");
        if (base_filters < 1) throw ConfigError("discriminator: base_filters must be >= 1");
    }
};

struct GanTrainConfig {
    int epochs = 50;
    int batch_size = 4;
    double lr = 1e-3;
    std::array<double, 2> adam_betas{0.5, 0.999};
    double lambda_l1 = 100.0;
    uint64_t seed = 1234;
    int threads = default_thread_count();

    void validate() const {
        if (epochs < 1 || batch_size < 1 || !(lr > 0.0) || threads < 1)
            throw ConfigError("gan train config: values must be positive");
        if (lambda_l1 < 0.0) throw ConfigError("gan train config: lambda_l1 must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// losses (element means; batch entries contribute uniformly)

template <typename T>
double l1_loss(const nn::Tensor<T>& generated, const nn::Tensor<T>& target) {
    if (!generated.same_shape(target))
        throw ParameterError("l1_loss: shape mismatch");
    if (generated.size() == 0)
        throw ParameterError("l1_loss: empty input");
    double s = 0.0;
    for (size_t i = 0; i < generated.size(); ++i)
        s += std::abs(static_cast<double>(generated.v[i]) - static_cast<double>(target.v[i]));
    return s / static_cast<double>(generated.size());
}

// dgen += weight * d(l1)/d(generated)
template <typename T>
void l1_loss_grad(const nn::Tensor<T>& generated, const nn::Tensor<T>& target,
                  double weight, nn::Tensor<T>& dgen) {
    const double w = weight / static_cast<double>(generated.size());
    for (size_t i = 0; i < generated.size(); ++i) {
        double d = static_cast<double>(generated.v[i]) - static_cast<double>(target.v[i]);
        if (d > 0)
            dgen.v[i] += static_cast<T>(w);
        else if (d < 0)
            dgen.v[i] -= static_cast<T>(w);
    }
}

// mean over elements of BCE(sigmoid(logit), target), target constant 0 or 1;
// computed from logits with the stable softplus form.
template <typename T>
double bce_with_logits(const nn::Tensor<T>& logits, double target) {
    if (logits.size() == 0)
        throw ParameterError("bce_with_logits: empty input");
    auto softplus = [](double x) {
        return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    };
    double s = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double x = static_cast<double>(logits.v[i]);
        s += target * softplus(-x) + (1.0 - target) * softplus(x);
    }
    return s / static_cast<double>(logits.size());
}

template <typename T>
void bce_with_logits_grad(const nn::Tensor<T>& logits, double target, double weight,
                          nn::Tensor<T>& dlogits) {
    dlogits.resize(logits.n, logits.c, logits.h, logits.w);
    const double w = weight / static_cast<double>(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        double x = static_cast<double>(logits.v[i]);
        double sig = 1.0 / (1.0 + std::exp(-x));
        dlogits.v[i] = static_cast<T>(w * (sig - target));
    }
}

// Eq-style named objectives.
template <typename T>
double discriminator_loss(const nn::Tensor<T>& d_real_logits,
                          const nn::Tensor<T>& d_fake_logits) {
    return (bce_with_logits(d_real_logits, 1.0) + bce_with_logits(d_fake_logits, 0.0)) / 2.0;
}

template <typename T>
double generator_loss(const nn::Tensor<T>& d_fake_logits, const nn::Tensor<T>& generated,
                      const nn::Tensor<T>& target, double lambda_l1) {
    return bce_with_logits(d_fake_logits, 1.0) + lambda_l1 * l1_loss(generated, target);
}

// ---------------------------------------------------------------------------
// generator network

template <typename T>
struct GeneratorNet {
    GeneratorConfig cfg;
    std::vector<nn::ConvLayer<T>> enc; // stride-2 + LeakyReLU(0.2)
    std::vector<nn::ConvLayer<T>> dec; // upsample + concat + conv + ReLU
    nn::ConvLayer<T> out_conv;         // conv + tanh mapped to [0,1]

    GeneratorNet() = default;
    explicit GeneratorNet(const GeneratorConfig& cfg_, uint64_t init_seed = 1) : cfg(cfg_) {
        cfg.validate();
        const int L = cfg.levels, F = cfg.base_filters;
        Rng rng(init_seed);
        for (int i = 0; i < L; ++i) {
            int in = i == 0 ? 3 : F << (i - 1);
            enc.emplace_back(in, F << i, 3, 1, 2);
        }
        for (int j = 0; j < L - 1; ++j) {
            int t = L - 2 - j; // encoder level this stage lands on
            int prev = j == 0 ? F << (L - 1) : F << (t + 1);
            int in = prev + (cfg.skip_connections ? (F << t) : 0);
            dec.emplace_back(in, F << t, 3, 1, 1);
        }
        out_conv = nn::ConvLayer<T>(F, 1, 3, 1, 1);
        for (auto& layer : enc) layer.init(rng);
        for (auto& layer : dec) layer.init(rng);
        out_conv.init(rng, 1.0);
    }

    size_t parameter_count() const {
        size_t n = out_conv.parameter_count();
        for (const auto& l : enc) n += l.parameter_count();
        for (const auto& l : dec) n += l.parameter_count();
        return n;
    }

    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        for (size_t i = 0; i < enc.size(); ++i)
            nn::append_conv_params(out, "gen.enc" + std::to_string(i), enc[i]);
        for (size_t j = 0; j < dec.size(); ++j)
            nn::append_conv_params(out, "gen.dec" + std::to_string(j), dec[j]);
        nn::append_conv_params(out, "gen.out", out_conv);
        return out;
    }
};

template <typename T>
struct GeneratorGrads {
    std::vector<nn::ConvGrads<T>> enc, dec;
    nn::ConvGrads<T> out;

    GeneratorGrads() = default;
    explicit GeneratorGrads(const GeneratorNet<T>& net) : out(net.out_conv) {
        for (const auto& l : net.enc) enc.emplace_back(l);
        for (const auto& l : net.dec) dec.emplace_back(l);
    }
    void zero() {
        for (auto& g : enc) g.zero();
        for (auto& g : dec) g.zero();
        out.zero();
    }
    std::vector<std::vector<T>*> refs() {
        std::vector<std::vector<T>*> out_refs;
        for (auto& g : enc) nn::append_conv_grads(out_refs, g);
        for (auto& g : dec) nn::append_conv_grads(out_refs, g);
        nn::append_conv_grads(out_refs, out);
        return out_refs;
    }
};

template <typename T>
struct GeneratorWorkspace {
    std::vector<nn::Tensor<T>> e, up, cat, d;
    nn::Tensor<T> up_out, y;
    // backward scratch
    std::vector<nn::Tensor<T>> de;
    nn::Tensor<T> g_cur, d_cat, d_up, d_skip, d_up_out;
    nn::ConvScratch<T> scratch;
};

template <typename T>
const nn::Tensor<T>& gen_forward(GeneratorNet<T>& net, GeneratorWorkspace<T>& ws,
                                 const nn::Tensor<T>& x) {
    const int L = net.cfg.levels;
    if (x.h % net.cfg.downsample() != 0 || x.w % net.cfg.downsample() != 0)
        throw DimensionError("generator: input " + std::to_string(x.h) + "x" +
                             std::to_string(x.w) + " not divisible by 2^levels = " +
                             std::to_string(net.cfg.downsample()));
    ws.e.resize(static_cast<size_t>(L));
    ws.up.resize(net.dec.size());
    ws.cat.resize(net.dec.size());
    ws.d.resize(net.dec.size());

    const nn::Tensor<T>* cur = &x;
    for (int i = 0; i < L; ++i) {
        nn::conv_forward(net.enc[static_cast<size_t>(i)], *cur, ws.e[static_cast<size_t>(i)],
                         ws.scratch);
        nn::leaky_relu_forward(ws.e[static_cast<size_t>(i)], static_cast<T>(0.2));
        cur = &ws.e[static_cast<size_t>(i)];
    }
    for (size_t j = 0; j < net.dec.size(); ++j) {
        size_t t = static_cast<size_t>(L) - 2 - j;
        nn::upsample2_forward(*cur, ws.up[j]);
        if (net.cfg.skip_connections)
            nn::concat_channels(ws.up[j], ws.e[t], ws.cat[j]);
        else
            ws.cat[j] = ws.up[j];
        nn::conv_forward(net.dec[j], ws.cat[j], ws.d[j], ws.scratch);
        nn::relu_forward(ws.d[j]);
        cur = &ws.d[j];
    }
    nn::upsample2_forward(*cur, ws.up_out);
    nn::conv_forward(net.out_conv, ws.up_out, ws.y, ws.scratch);
    nn::tanh01_forward(ws.y);
    return ws.y;
}

// d_y is consumed in place. Workspace must hold the matching forward state.
template <typename T>
void gen_backward(GeneratorNet<T>& net, GeneratorWorkspace<T>& ws, const nn::Tensor<T>& x,
                  nn::Tensor<T>& d_y, GeneratorGrads<T>& grads) {
    const int L = net.cfg.levels;
    ws.de.resize(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) {
        auto& e = ws.e[static_cast<size_t>(i)];
        ws.de[static_cast<size_t>(i)].resize(e.n, e.c, e.h, e.w);
        ws.de[static_cast<size_t>(i)].zero();
    }

    nn::tanh01_backward(ws.y, d_y);
    nn::conv_backward(net.out_conv, ws.up_out, d_y, &ws.d_up_out, &grads.out, ws.scratch);

    // gradient flowing into the current decoder/bottleneck output
    nn::upsample2_backward(ws.d_up_out, ws.g_cur);

    for (size_t jj = net.dec.size(); jj-- > 0;) {
        size_t t = static_cast<size_t>(L) - 2 - jj;
        nn::relu_backward(ws.d[jj], ws.g_cur);
        nn::conv_backward(net.dec[jj], ws.cat[jj], ws.g_cur, &ws.d_cat, &grads.dec[jj],
                          ws.scratch);
        const nn::Tensor<T>* d_up_ptr = &ws.d_cat;
        if (net.cfg.skip_connections) {
            nn::split_channels(ws.d_cat, ws.d_up, ws.d_skip, ws.up[jj].c);
            for (size_t i = 0; i < ws.d_skip.size(); ++i)
                ws.de[t].v[i] += ws.d_skip.v[i];
            d_up_ptr = &ws.d_up;
        }
        nn::Tensor<T> below;
        nn::upsample2_backward(*d_up_ptr, below);
        if (jj == 0) {
            for (size_t i = 0; i < below.size(); ++i)
                ws.de[static_cast<size_t>(L) - 1].v[i] += below.v[i];
        } else {
            ws.g_cur = std::move(below);
        }
    }
    if (net.dec.empty()) {
        for (size_t i = 0; i < ws.g_cur.size(); ++i)
            ws.de[static_cast<size_t>(L) - 1].v[i] += ws.g_cur.v[i];
    }

    for (int i = L - 1; i >= 0; --i) {
        auto& g = ws.de[static_cast<size_t>(i)];
        nn::leaky_relu_backward(ws.e[static_cast<size_t>(i)], g, static_cast<T>(0.2));
        const nn::Tensor<T>& input = i == 0 ? x : ws.e[static_cast<size_t>(i) - 1];
        if (i == 0) {
            nn::conv_backward(net.enc[0], input, g, static_cast<nn::Tensor<T>*>(nullptr),
                              &grads.enc[0], ws.scratch);
        } else {
            nn::Tensor<T> dx;
            nn::conv_backward(net.enc[static_cast<size_t>(i)], input, g, &dx,
                              &grads.enc[static_cast<size_t>(i)], ws.scratch);
            auto& sink = ws.de[static_cast<size_t>(i) - 1];
            for (size_t k = 0; k < dx.size(); ++k) sink.v[k] += dx.v[k];
        }
    }
}

// ---------------------------------------------------------------------------
// discriminator network

template <typename T>
struct DiscriminatorNet {
    DiscriminatorConfig cfg;
    std::vector<nn::ConvLayer<T>> blocks; // stride-2 + LeakyReLU(0.2)
    nn::ConvLayer<T> head;                // stride-1 conv to 1-channel logits

    DiscriminatorNet() = default;
    explicit DiscriminatorNet(const DiscriminatorConfig& cfg_, uint64_t init_seed = 2)
        : cfg(cfg_) {
        cfg.validate();
        const int F = cfg.base_filters;
        Rng rng(init_seed);
        for (int i = 0; i < cfg.layers; ++i) {
            int in = i == 0 ? 4 : F << (i - 1);
            blocks.emplace_back(in, F << i, 3, 1, 2);
        }
        head = nn::ConvLayer<T>(F << (cfg.layers - 1), 1, 3, 1, 1);
        for (auto& layer : blocks) layer.init(rng);
        head.init(rng, 1.0);
    }

    size_t parameter_count() const {
        size_t n = head.parameter_count();
        for (const auto& l : blocks) n += l.parameter_count();
        return n;
    }

    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        for (size_t i = 0; i < blocks.size(); ++i)
            nn::append_conv_params(out, "disc.b" + std::to_string(i), blocks[i]);
        nn::append_conv_params(out, "disc.head", head);
        return out;
    }
};

template <typename T>
struct DiscriminatorGrads {
    std::vector<nn::ConvGrads<T>> blocks;
    nn::ConvGrads<T> head;

    DiscriminatorGrads() = default;
    explicit DiscriminatorGrads(const DiscriminatorNet<T>& net) : head(net.head) {
        for (const auto& l : net.blocks) blocks.emplace_back(l);
    }
    void zero() {
        for (auto& g : blocks) g.zero();
        head.zero();
    }
    std::vector<std::vector<T>*> refs() {
        std::vector<std::vector<T>*> out;
        for (auto& g : blocks) nn::append_conv_grads(out, g);
        nn::append_conv_grads(out, head);
        return out;
    }
};

template <typename T>
struct DiscriminatorWorkspace {
    std::vector<nn::Tensor<T>> b;
    nn::Tensor<T> logits;
    nn::Tensor<T> g_cur;
    nn::ConvScratch<T> scratch;
};

template <typename T>
const nn::Tensor<T>& disc_forward(DiscriminatorNet<T>& net, DiscriminatorWorkspace<T>& ws,
                                  const nn::Tensor<T>& x) {
    if (x.c != 4)
        throw DimensionError("discriminator: expected 4 input channels (RGB + TIR)");
    if (x.h % (1 << net.cfg.layers) != 0 || x.w % (1 << net.cfg.layers) != 0)
        throw DimensionError("discriminator: input dims not divisible by 2^layers");
    ws.b.resize(net.blocks.size());
    const nn::Tensor<T>* cur = &x;
    for (size_t i = 0; i < net.blocks.size(); ++i) {
        nn::conv_forward(net.blocks[i], *cur, ws.b[i], ws.scratch);
        nn::leaky_relu_forward(ws.b[i], static_cast<T>(0.2));
        cur = &ws.b[i];
    }
    nn::conv_forward(net.head, *cur, ws.logits, ws.scratch);
    return ws.logits;
}

// grads may be null (generator step through a frozen discriminator);
// dx may be null (discriminator's own update needs no input gradients).
template <typename T>
void disc_backward(DiscriminatorNet<T>& net, DiscriminatorWorkspace<T>& ws,
                   const nn::Tensor<T>& x, const nn::Tensor<T>& d_logits,
                   std::type_identity_t<nn::Tensor<T>*> dx,
                   std::type_identity_t<DiscriminatorGrads<T>*> grads) {
    const nn::Tensor<T>& head_in = net.blocks.empty() ? x : ws.b.back();
    nn::conv_backward(net.head, head_in, d_logits, &ws.g_cur,
                      grads ? &grads->head : nullptr, ws.scratch);
    for (size_t ii = net.blocks.size(); ii-- > 0;) {
        nn::leaky_relu_backward(ws.b[ii], ws.g_cur, static_cast<T>(0.2));
        const nn::Tensor<T>& input = ii == 0 ? x : ws.b[ii - 1];
        bool need_dx = ii > 0 || dx != nullptr;
        nn::Tensor<T> dcur;
        nn::conv_backward(net.blocks[ii], input, ws.g_cur,
                          need_dx ? &dcur : nullptr,
                          grads ? &grads->blocks[ii] : nullptr, ws.scratch);
        if (ii == 0) {
            if (dx) *dx = std::move(dcur);
        } else {
            ws.g_cur = std::move(dcur);
        }
    }
}

// public shape-level constructors (the spec's build_* operations)
inline GeneratorNet<float> build_generator(const GeneratorConfig& cfg, uint64_t seed = 1) {
    return GeneratorNet<float>(cfg, seed);
}
inline DiscriminatorNet<float> build_discriminator(const DiscriminatorConfig& cfg,
                                                   uint64_t seed = 2) {
    return DiscriminatorNet<float>(cfg, seed);
}

// ---------------------------------------------------------------------------
// training

struct GanEpochStats {
    int epoch = 0;
    double g_l1 = 0.0;
    double g_adv = 0.0;
    double d_loss = 0.0;
};

struct TrainedGan {
    GeneratorConfig gen_cfg;
    DiscriminatorConfig disc_cfg;
    GanTrainConfig train_cfg;
    GeneratorNet<float> gen;
    DiscriminatorNet<float> disc;
    std::vector<GanEpochStats> history;
};

namespace detail {

inline void copy_sample(const nn::Tensor<float>& batch, int i, nn::Tensor<float>& out) {
    out.resize(1, batch.c, batch.h, batch.w);
    std::copy(batch.sample(i), batch.sample(i) + batch.chw(), out.data());
}

struct GanPair {
    ImageBuffer rgb;
    ImageBuffer tir;
    std::string id;
};

inline std::vector<GanPair> load_gan_pairs(const DatasetManifest& manifest, Split split) {
    std::vector<GanPair> pairs;
    auto idx = manifest.split_indices(split);
    pairs.resize(idx.size());
    for (size_t k = 0; k < idx.size(); ++k) {
        const SampleRecord& rec = manifest.samples[idx[k]];
        if (!rec.tir_path)
            throw DataError("gan training needs paired TIR; sample \"" + rec.id +
                            "\" has none");
        GanPair pair;
        pair.id = rec.id;
        pair.rgb = read_png(rec.rgb_path);
        if (pair.rgb.channels == 1) {
            // promote grayscale source to 3 channels
            ImageBuffer rgb3(pair.rgb.height, pair.rgb.width, 3);
            for (int c = 0; c < 3; ++c)
                std::copy(pair.rgb.values.begin(), pair.rgb.values.end(),
                          rgb3.values.begin() + static_cast<long>(c * pair.rgb.plane()));
            pair.rgb = std::move(rgb3);
        }
        pair.tir = to_grayscale(read_png(*rec.tir_path));
        if (pair.tir.height != pair.rgb.height || pair.tir.width != pair.rgb.width)
            throw DataError("sample \"" + rec.id + "\": TIR/RGB dimension mismatch");
        pairs[k] = std::move(pair);
    }
    if (!pairs.empty()) {
        int h = pairs[0].rgb.height, w = pairs[0].rgb.width;
        for (const auto& p : pairs)
            if (p.rgb.height != h || p.rgb.width != w)
                throw DataError("gan training needs uniform image dimensions; sample \"" +
                                p.id + "\" differs");
    }
    return pairs;
}

} // namespace detail

// Alternating per-batch updates: discriminator first, then generator, both on
// the conditional (RGB, TIR) pair. Deterministic for fixed (seed, threads).
inline TrainedGan train_pix2pix(const DatasetManifest& manifest,
                                const GanTrainConfig& train_cfg,
                                const GeneratorConfig& gen_cfg = {},
                                const DiscriminatorConfig& disc_cfg = {},
                                const std::function<void(const GanEpochStats&)>& on_epoch = {}) {
    train_cfg.validate();
    gen_cfg.validate();
    disc_cfg.validate();

    auto pairs = detail::load_gan_pairs(manifest, Split::train);
    if (pairs.empty())
        throw DataError("gan training: train split is empty");
    const int h = pairs[0].rgb.height, w = pairs[0].rgb.width;
    if (h % gen_cfg.downsample() != 0 || w % gen_cfg.downsample() != 0)
        throw DimensionError("gan training: image dims " + std::to_string(h) + "x" +
                             std::to_string(w) + " not divisible by 2^levels = " +
                             std::to_string(gen_cfg.downsample()));
    if (h % (1 << disc_cfg.layers) != 0 || w % (1 << disc_cfg.layers) != 0)
        throw DimensionError("gan training: image dims not divisible by discriminator 2^layers");

    TrainedGan result;
    result.gen_cfg = gen_cfg;
    result.disc_cfg = disc_cfg;
    result.train_cfg = train_cfg;
    result.gen = GeneratorNet<float>(gen_cfg, substream_seed(train_cfg.seed, 0xA11CE));
    result.disc = DiscriminatorNet<float>(disc_cfg, substream_seed(train_cfg.seed, 0xB0B));

    nn::AdamOptimizer<float> opt_g(train_cfg.lr, train_cfg.adam_betas[0], train_cfg.adam_betas[1]);
    nn::AdamOptimizer<float> opt_d(train_cfg.lr, train_cfg.adam_betas[0], train_cfg.adam_betas[1]);
    auto g_params = result.gen.params();
    auto d_params = result.disc.params();

    const int n = static_cast<int>(pairs.size());
    const int threads = std::max(1, train_cfg.threads);
    const int pool = std::min(threads, std::max(1, std::min(n, train_cfg.batch_size)));

    std::vector<GeneratorWorkspace<float>> gws(static_cast<size_t>(pool));
    std::vector<DiscriminatorWorkspace<float>> dws(static_cast<size_t>(pool));
    std::vector<GeneratorGrads<float>> g_slot;
    std::vector<DiscriminatorGrads<float>> d_slot;
    for (int i = 0; i < train_cfg.batch_size; ++i) {
        g_slot.emplace_back(result.gen);
        d_slot.emplace_back(result.disc);
    }
    GeneratorGrads<float> g_total(result.gen);
    DiscriminatorGrads<float> d_total(result.disc);

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        Rng shuffle_rng(substream_seed(train_cfg.seed, 0xE0000000ull + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order.begin(), order.end());

        double ep_l1 = 0.0, ep_adv = 0.0, ep_d = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += train_cfg.batch_size) {
            const int bsz = std::min(train_cfg.batch_size, n - start);
            std::vector<double> d_losses(static_cast<size_t>(bsz), 0.0);
            std::vector<double> adv_losses(static_cast<size_t>(bsz), 0.0);
            std::vector<double> l1_losses(static_cast<size_t>(bsz), 0.0);

            // --- discriminator step
            parallel_chunks(bsz, pool, [&](int begin, int end, int chunk) {
                auto& gw = gws[static_cast<size_t>(chunk)];
                auto& dw = dws[static_cast<size_t>(chunk)];
                nn::Tensor<float> rgb1(1, 3, h, w), tir1(1, 1, h, w), pair4, dlog;
                for (int bi = begin; bi < end; ++bi) {
                    const auto& sample = pairs[static_cast<size_t>(order[static_cast<size_t>(start + bi)])];
                    nn::load_image(rgb1, 0, sample.rgb);
                    nn::load_image(tir1, 0, sample.tir);
                    d_slot[static_cast<size_t>(bi)].zero();

                    const auto& fake = gen_forward(result.gen, gw, rgb1);
                    nn::Tensor<float> fake_copy = fake;

                    nn::concat_channels(rgb1, tir1, pair4);
                    const auto& real_logits = disc_forward(result.disc, dw, pair4);
                    double loss_real = bce_with_logits(real_logits, 1.0);
                    bce_with_logits_grad(real_logits, 1.0, 1.0 / (2.0 * bsz), dlog);
                    disc_backward(result.disc, dw, pair4, dlog, nullptr,
                                  &d_slot[static_cast<size_t>(bi)]);

                    nn::concat_channels(rgb1, fake_copy, pair4);
                    const auto& fake_logits = disc_forward(result.disc, dw, pair4);
                    double loss_fake = bce_with_logits(fake_logits, 0.0);
                    bce_with_logits_grad(fake_logits, 0.0, 1.0 / (2.0 * bsz), dlog);
                    disc_backward(result.disc, dw, pair4, dlog, nullptr,
                                  &d_slot[static_cast<size_t>(bi)]);

                    d_losses[static_cast<size_t>(bi)] = (loss_real + loss_fake) / 2.0;
                }
            });
            d_total.zero();
            auto d_total_refs = d_total.refs();
            for (int bi = 0; bi < bsz; ++bi) {
                auto src = d_slot[static_cast<size_t>(bi)].refs();
                nn::accumulate_grads(d_total_refs, src);
            }
            opt_d.step(d_params, d_total_refs);

            // --- generator step (sees the updated discriminator)
            parallel_chunks(bsz, pool, [&](int begin, int end, int chunk) {
                auto& gw = gws[static_cast<size_t>(chunk)];
                auto& dw = dws[static_cast<size_t>(chunk)];
                nn::Tensor<float> rgb1(1, 3, h, w), tir1(1, 1, h, w), pair4, dlog, dpair, dfake;
                for (int bi = begin; bi < end; ++bi) {
                    const auto& sample = pairs[static_cast<size_t>(order[static_cast<size_t>(start + bi)])];
                    nn::load_image(rgb1, 0, sample.rgb);
                    nn::load_image(tir1, 0, sample.tir);
                    g_slot[static_cast<size_t>(bi)].zero();

                    const auto& fake = gen_forward(result.gen, gw, rgb1);
                    nn::concat_channels(rgb1, fake, pair4);
                    const auto& logits = disc_forward(result.disc, dw, pair4);

                    adv_losses[static_cast<size_t>(bi)] = bce_with_logits(logits, 1.0);
                    l1_losses[static_cast<size_t>(bi)] = l1_loss(fake, tir1);

                    bce_with_logits_grad(logits, 1.0, 1.0 / bsz, dlog);
                    disc_backward(result.disc, dw, pair4, dlog, &dpair, nullptr);
                    nn::Tensor<float> d_rgb_unused;
                    nn::split_channels(dpair, d_rgb_unused, dfake, 3);
                    l1_loss_grad(fake, tir1, train_cfg.lambda_l1 / bsz, dfake);
                    gen_backward(result.gen, gw, rgb1, dfake, g_slot[static_cast<size_t>(bi)]);
                }
            });
            g_total.zero();
            auto g_total_refs = g_total.refs();
            for (int bi = 0; bi < bsz; ++bi) {
                auto src = g_slot[static_cast<size_t>(bi)].refs();
                nn::accumulate_grads(g_total_refs, src);
            }
            opt_g.step(g_params, g_total_refs);

            double batch_d = mean_of(d_losses);
            double batch_adv = mean_of(adv_losses);
            double batch_l1 = mean_of(l1_losses);
            if (!std::isfinite(batch_d) || !std::isfinite(batch_adv) || !std::isfinite(batch_l1))
                throw TrainError("non-finite gan loss at epoch " + std::to_string(epoch) +
                                 " batch " + std::to_string(batches) + " (first sample \"" +
                                 pairs[static_cast<size_t>(order[static_cast<size_t>(start)])].id + "\")");
            ep_d += batch_d;
            ep_adv += batch_adv;
            ep_l1 += batch_l1;
            ++batches;
        }
        GanEpochStats stats{epoch, ep_l1 / batches, ep_adv / batches, ep_d / batches};
        result.history.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return result;
}

// Deterministic inference: 1-channel outputs in [0,1], same spatial dims.
inline std::vector<ImageBuffer> translate(const std::vector<ImageBuffer>& rgb_images,
                                          GeneratorNet<float>& gen,
                                          int threads = default_thread_count()) {
    std::vector<ImageBuffer> out(rgb_images.size());
    const int n = static_cast<int>(rgb_images.size());
    parallel_chunks(n, threads, [&](int begin, int end, int) {
        GeneratorWorkspace<float> ws;
        for (int i = begin; i < end; ++i) {
            const ImageBuffer& src = rgb_images[static_cast<size_t>(i)];
            nn::Tensor<float> x(1, 3, src.height, src.width);
            if (src.channels == 3) {
                nn::load_image(x, 0, src);
            } else {
                for (int c = 0; c < 3; ++c)
                    std::copy(src.values.begin(), src.values.end(),
                              x.data() + static_cast<size_t>(c) * src.values.size());
            }
            const auto& y = gen_forward(gen, ws, x);
            out[static_cast<size_t>(i)] = nn::to_image(y, 0);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint container glue

inline nlohmann::json gan_config_json(const TrainedGan& gan) {
    return {{"generator",
             {{"levels", gan.gen_cfg.levels},
              {"base_filters", gan.gen_cfg.base_filters},
              {"skip_connections", gan.gen_cfg.skip_connections}}},
            {"discriminator",
             {{"layers", gan.disc_cfg.layers},
              {"base_filters", gan.disc_cfg.base_filters}}},
            {"train",
             {{"epochs", gan.train_cfg.epochs},
              {"batch_size", gan.train_cfg.batch_size},
              {"lr", gan.train_cfg.lr},
              {"adam_betas", gan.train_cfg.adam_betas},
              {"lambda_l1", gan.train_cfg.lambda_l1},
              {"seed", gan.train_cfg.seed}}}};
}

inline void save_gan_checkpoint(const fs::path& path, TrainedGan& gan) {
    nlohmann::json history_tail = nlohmann::json::array();
    size_t start = gan.history.size() > 10 ? gan.history.size() - 10 : 0;
    for (size_t i = start; i < gan.history.size(); ++i)
        history_tail.push_back({{"epoch", gan.history[i].epoch},
                                {"g_l1", gan.history[i].g_l1},
                                {"g_adv", gan.history[i].g_adv},
                                {"d_loss", gan.history[i].d_loss}});
    nlohmann::json meta{{"kind", "gan"},
                        {"seed", gan.train_cfg.seed},
                        {"epoch", gan.history.empty() ? 0 : gan.history.back().epoch},
                        {"config", gan_config_json(gan)},
                        {"history_tail", history_tail}};
    auto params = gan.gen.params();
    auto disc_params = gan.disc.params();
    params.insert(params.end(), disc_params.begin(), disc_params.end());
    nn::write_checkpoint(path, meta, params);
}

inline TrainedGan load_gan_checkpoint(const fs::path& path) {
    nlohmann::json meta = nn::read_checkpoint_meta(path);
    if (meta.at("kind").get<std::string>() != "gan")
        throw FormatError("checkpoint is not a gan checkpoint: " + path.string());
    const auto& cfg = meta.at("config");

    TrainedGan gan;
    gan.gen_cfg.levels = cfg.at("generator").at("levels").get<int>();
    gan.gen_cfg.base_filters = cfg.at("generator").at("base_filters").get<int>();
    gan.gen_cfg.skip_connections = cfg.at("generator").at("skip_connections").get<bool>();
    gan.disc_cfg.layers = cfg.at("discriminator").at("layers").get<int>();
    gan.disc_cfg.base_filters = cfg.at("discriminator").at("base_filters").get<int>();
    const auto& t = cfg.at("train");
    gan.train_cfg.epochs = t.at("epochs").get<int>();
    gan.train_cfg.batch_size = t.at("batch_size").get<int>();
    gan.train_cfg.lr = t.at("lr").get<double>();
    gan.train_cfg.adam_betas = t.at("adam_betas").get<std::array<double, 2>>();
    gan.train_cfg.lambda_l1 = t.at("lambda_l1").get<double>();
    gan.train_cfg.seed = t.at("seed").get<uint64_t>();

    gan.gen = GeneratorNet<float>(gan.gen_cfg);
    gan.disc = DiscriminatorNet<float>(gan.disc_cfg);
    auto params = gan.gen.params();
    auto disc_params = gan.disc.params();
    params.insert(params.end(), disc_params.begin(), disc_params.end());
    nn::load_checkpoint_arrays(path, params);
    return gan;
}

} // namespace qmm
