#include <catch2/catch_amalgamated.hpp>

#include "qmm/counter.hpp"
#include "test_util.hpp"

using namespace qmm;
using nn::Tensor;

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

DatasetManifest tiny_counter_dataset(const fs::path& dir, int n = 8, int h = 32, int w = 32,
                                     uint64_t seed = 500,
                                     std::array<double, 3> ratios = {0.75, 0.25, 0.0}) {
    SynthParams params;
    params.n_images = n;
    params.height = h;
    params.width = w;
    params.heads_min = 2;
    params.heads_max = 6;
    params.head_radius = 2.0;
    params.seed = seed;
    return make_synth_dataset(params, dir, ratios);
}

} // namespace

TEST_CASE("architecture conformance against the declared stack", "[counter]") {
    MMCountConfig cfg;
    MMCountNet<float> net(cfg, 7);
    CHECK(net.downsample_factor() == 4);

    auto descs = net.layer_descs();
    // the declared table: [in, out, kernel, pad, stride] per conv, [k, s] per pool
    std::vector<LayerSpec> expected_rgb = {
        LayerSpec::make_conv(3, 16, 3, 1, 1), LayerSpec::make_pool(2, 2),
        LayerSpec::make_conv(16, 32, 3, 1, 1), LayerSpec::make_pool(2, 2),
        LayerSpec::make_conv(32, 64, 3, 1, 1), LayerSpec::make_conv(64, 128, 3, 1, 1)};
    std::vector<LayerSpec> expected_tir = expected_rgb;
    expected_tir[0] = LayerSpec::make_conv(1, 16, 3, 1, 1);

    REQUIRE(descs.size() == expected_rgb.size() + expected_tir.size() + 2);
    for (size_t i = 0; i < expected_rgb.size(); ++i) {
        CHECK(descs[i].stage == "rgb");
        CHECK(descs[i].layer == expected_rgb[i]);
    }
    for (size_t i = 0; i < expected_tir.size(); ++i) {
        CHECK(descs[expected_rgb.size() + i].stage == "tir");
        CHECK(descs[expected_rgb.size() + i].layer == expected_tir[i]);
    }
    const auto& fusion = descs[descs.size() - 2];
    CHECK(fusion.stage == "fusion");
    CHECK(fusion.layer == LayerSpec::make_conv(256, 256, 3, 1, 1));
    const auto& regressor = descs.back();
    CHECK(regressor.stage == "regressor");
    // 1x1 regressor with pad 0 so output dims match fusion dims
    CHECK(regressor.layer == LayerSpec::make_conv(256, 1, 1, 0, 1));
    CHECK(regressor.relu_after); // density is non-negative

    // ReLU follows every conv
    for (const auto& d : descs)
        if (d.layer.kind == LayerSpec::Kind::conv) CHECK(d.relu_after);
}

TEST_CASE("parameter count matches the hand tally", "[counter]") {
    auto conv_params = [](int in, int out, int k) {
        return static_cast<size_t>(in * k * k + 1) * static_cast<size_t>(out);
    };
    // RGB branch: (3*9+1)*16 + (16*9+1)*32 + (32*9+1)*64 + (64*9+1)*128
    size_t rgb = conv_params(3, 16, 3) + conv_params(16, 32, 3) + conv_params(32, 64, 3) +
                 conv_params(64, 128, 3);
    size_t tir = conv_params(1, 16, 3) + conv_params(16, 32, 3) + conv_params(32, 64, 3) +
                 conv_params(64, 128, 3);
    size_t fusion = conv_params(256, 256, 3);
    size_t regressor = conv_params(256, 1, 1);
    CHECK(rgb == 97440u);
    CHECK(tir == 97152u);
    CHECK(fusion == 590080u);
    CHECK(regressor == 257u);

    MMCountNet<float> net(MMCountConfig{}, 7);
    CHECK(net.parameter_count() == rgb + tir + fusion + regressor);
    CHECK(net.parameter_count() == 784929u);
}

TEST_CASE("forward shape contract and zero input sanity", "[counter]") {
    MMCountNet<float> net(MMCountConfig{}, 11);
    MMCountWorkspace<float> ws;

    Tensor<float> rgb(2, 3, 128, 160), tir(2, 1, 128, 160);
    const auto& out = mmcount_forward(net, ws, rgb, tir);
    CHECK(out.n == 2);
    CHECK(out.c == 1);
    CHECK(out.h == 32);
    CHECK(out.w == 40);
    for (float v : out.v) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0f);
    }

    Tensor<float> rgb2(1, 3, 256, 320), tir2(1, 1, 256, 320);
    const auto& out2 = mmcount_forward(net, ws, rgb2, tir2);
    CHECK(out2.h == 64);
    CHECK(out2.w == 80);

    Tensor<float> bad_rgb(1, 3, 30, 30), bad_tir(1, 1, 30, 30);
    CHECK_THROWS_AS(mmcount_forward(net, ws, bad_rgb, bad_tir), DimensionError);
}

TEST_CASE("mse density loss fixtures", "[counter]") {
    Tensor<float> a(1, 1, 2, 2), b(1, 1, 2, 2);
    CHECK(mse_density_loss(a, b) == 0.0);
    b.v[2] = 2.0f; // one pixel differs by 2 -> squared 4, per-sample sum 4
    CHECK(mse_density_loss(a, b) == 4.0);

    Tensor<float> c(2, 1, 2, 2), d(2, 1, 2, 2);
    d.v[0] = 2.0f; // sample 0 sum = 4, sample 1 sum = 0 -> mean 2
    CHECK(mse_density_loss(c, d) == 2.0);

    Tensor<float> e(1, 1, 3, 2);
    CHECK_THROWS_AS(mse_density_loss(a, e), ParameterError);
}

TEST_CASE("tiny mmcount gradients match finite differences", "[counter][gradcheck]") {
    MMCountConfig cfg = MMCountConfig::scaled(8); // filters 2,4,8,16; fusion 32
    MMCountNet<double> net(cfg, 13);
    MMCountWorkspace<double> ws;
    Rng rng(601);
    Tensor<double> rgb(1, 3, 16, 16), tir(1, 1, 16, 16), target(1, 1, 4, 4);
    for (double& v : rgb.v) v = rng.uniform();
    for (double& v : tir.v) v = rng.uniform();
    for (double& v : target.v) v = rng.uniform(0.0, 0.2);

    auto loss_fn = [&]() {
        const auto& pred = mmcount_forward(net, ws, rgb, tir);
        return mse_density_loss(pred, target);
    };

    MMCountGrads<double> grads(net);
    grads.zero();
    {
        const auto& pred = mmcount_forward(net, ws, rgb, tir);
        Tensor<double> dpred;
        mse_density_loss_grad(pred, target, 1.0, dpred);
        mmcount_backward(net, ws, rgb, tir, dpred, grads);
    }

    auto params = net.params();
    auto refs = grads.refs();
    REQUIRE(params.size() == refs.size());
    size_t checked = 0, total = 0;
    for (size_t s = 0; s < params.size(); ++s) {
        auto& p = *params[s].values;
        const auto& g = *refs[s];
        for (size_t i = 0; i < p.size(); ++i) {
            ++total;
            double orig = p[i];
            const double h = 1e-6;
            p[i] = orig + h;
            double lp = loss_fn();
            p[i] = orig - h;
            double lm = loss_fn();
            p[i] = orig;
            double num = (lp - lm) / (2 * h);
            REQUIRE(rel_err(g[i], num) < 1e-3);
            ++checked;
        }
    }
    CHECK(checked == total);
    CHECK(total == MMCountNet<double>(cfg, 13).parameter_count());
}

TEST_CASE("monomodal zero-fill: rgb mode ignores TIR contents", "[counter]") {
    MMCountConfig cfg = MMCountConfig::scaled(4, InputMode::rgb);
    MMCountNet<float> net(cfg, 17);
    Rng rng(603);

    std::vector<ImageBuffer> rgbs;
    ImageBuffer rgb(32, 32, 3);
    for (float& v : rgb.values) v = static_cast<float>(rng.uniform());
    rgbs.push_back(rgb);

    std::vector<ImageBuffer> tir_a, tir_b;
    ImageBuffer ta(32, 32, 1, 0.9f), tb(32, 32, 1, 0.1f);
    tir_a.push_back(ta);
    tir_b.push_back(tb);

    auto with_a = mmcount_predict(net, &rgbs, &tir_a, 1);
    auto with_b = mmcount_predict(net, &rgbs, &tir_b, 1);
    auto with_none = mmcount_predict(net, &rgbs, nullptr, 1);
    REQUIRE(with_a.size() == 1);
    CHECK(with_a[0].values == with_b[0].values);
    CHECK(with_a[0].values == with_none[0].values);

    // rgb+tir mode with tir missing is an input error
    MMCountNet<float> both(MMCountConfig::scaled(4, InputMode::rgb_tir), 17);
    CHECK_THROWS_AS(mmcount_predict(both, &rgbs, nullptr, 1), DataError);
}

TEST_CASE("count linearity under power-of-two scaling", "[counter]") {
    Rng rng(605);
    Grid2D pred = qmmtest::random_grid(rng, 8, 10, 0.0, 0.5);
    double count = pred.sum();
    Grid2D scaled = pred;
    for (double& v : scaled.values) v *= 2.0;
    CHECK(scaled.sum() == 2.0 * count);
    Grid2D halved = pred;
    for (double& v : halved.values) v *= 0.5;
    CHECK(halved.sum() == 0.5 * count);
}

TEST_CASE("early stop tracker semantics", "[counter]") {
    // improves at epochs 0,1,2 then plateaus; patience 10 stops at epoch 12
    EarlyStopTracker t(10);
    std::vector<double> maes{5.0, 4.0, 3.0, 3.0, 3.2, 3.1, 3.0, 3.0, 3.05,
                             3.0, 3.0, 3.0, 3.0, 3.0, 3.0};
    int stopped_at = -1;
    for (int e = 0; e < static_cast<int>(maes.size()); ++e)
        if (t.update(e, maes[static_cast<size_t>(e)])) {
            stopped_at = e;
            break;
        }
    CHECK(t.best_epoch == 2);
    CHECK(stopped_at == 12); // plateau of 10 epochs after the best epoch

    EarlyStopTracker k(2);
    CHECK_FALSE(k.update(0, 1.0));
    CHECK_FALSE(k.update(1, 0.9));
    CHECK_FALSE(k.update(2, 0.95));
    CHECK(k.update(3, 0.91));
}

TEST_CASE("training determinism and history shape", "[counter][slow]") {
    qmmtest::TempDir tmp("counter_det");
    DatasetManifest manifest = tiny_counter_dataset(tmp.path / "ds");

    MMCountConfig cfg = MMCountConfig::scaled(4, InputMode::rgb_tir);
    CounterTrainConfig tcfg;
    tcfg.epochs_max = 3;
    tcfg.batch_size = 2;
    tcfg.seed = 909;
    tcfg.threads = 1;

    TrainedCounter a = train_counter(manifest, cfg, tcfg, TirSource::real());
    TrainedCounter b = train_counter(manifest, cfg, tcfg, TirSource::real());
    REQUIRE(a.history.size() == 3);
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].train_loss == b.history[i].train_loss);
        CHECK(a.history[i].val_mae == b.history[i].val_mae);
    }
    auto pa = a.net.params(), pb = b.net.params();
    for (size_t s = 0; s < pa.size(); ++s) CHECK(*pa[s].values == *pb[s].values);
}

TEST_CASE("early stopping fires on a validation plateau", "[counter][slow]") {
    qmmtest::TempDir tmp("counter_plateau");
    DatasetManifest manifest = tiny_counter_dataset(tmp.path / "ds", 8, 32, 32, 501);

    MMCountConfig cfg = MMCountConfig::scaled(8, InputMode::rgb_tir);
    CounterTrainConfig tcfg;
    tcfg.epochs_max = 60;
    tcfg.batch_size = 3;
    tcfg.seed = 41;
    tcfg.threads = 1;
    tcfg.early_stop_patience = 4;

    TrainedCounter r = train_counter(manifest, cfg, tcfg, TirSource::real());
    if (static_cast<int>(r.history.size()) < tcfg.epochs_max) {
        // stopped early: exactly patience epochs after the best one
        CHECK(static_cast<int>(r.history.size()) == r.best_epoch + tcfg.early_stop_patience + 1);
        double best = r.history[static_cast<size_t>(r.best_epoch)].val_mae;
        for (size_t e = static_cast<size_t>(r.best_epoch) + 1; e < r.history.size(); ++e)
            CHECK(r.history[e].val_mae >= best);
    }
}

TEST_CASE("counter checkpoint roundtrip preserves predictions", "[counter][slow]") {
    qmmtest::TempDir tmp("counter_ckpt");
    DatasetManifest manifest = tiny_counter_dataset(tmp.path / "ds");
    MMCountConfig cfg = MMCountConfig::scaled(4, InputMode::rgb_tir);
    CounterTrainConfig tcfg;
    tcfg.epochs_max = 2;
    tcfg.batch_size = 2;
    tcfg.seed = 11;
    tcfg.threads = 1;
    TrainedCounter trained = train_counter(manifest, cfg, tcfg, TirSource::real());

    auto path = tmp.path / "counter.ckpt";
    save_counter_checkpoint(path, trained);
    TrainedCounter loaded = load_counter_checkpoint(path);
    CHECK(loaded.model_cfg.input_mode == InputMode::rgb_tir);
    CHECK(loaded.net.downsample_factor() == 4);

    std::vector<ImageBuffer> rgbs{read_png(manifest.samples[0].rgb_path)};
    std::vector<ImageBuffer> tirs{to_grayscale(read_png(*manifest.samples[0].tir_path))};
    auto before = mmcount_predict(trained.net, &rgbs, &tirs, 1);
    auto after = mmcount_predict(loaded.net, &rgbs, &tirs, 1);
    CHECK(before[0].values == after[0].values);
}

TEST_CASE("evaluate: oracle predictions give zero error and game[0]==mae", "[counter][slow]") {
    qmmtest::TempDir tmp("counter_eval");
    DatasetManifest manifest =
        tiny_counter_dataset(tmp.path / "ds", 8, 32, 32, 502, {0.5, 0.25, 0.25});

    MMCountConfig cfg = MMCountConfig::scaled(8, InputMode::rgb_tir);
    CounterTrainConfig tcfg;
    tcfg.epochs_max = 2;
    tcfg.batch_size = 2;
    tcfg.seed = 5;
    tcfg.threads = 1;
    TrainedCounter trained = train_counter(manifest, cfg, tcfg, TirSource::real());

    std::vector<EvalDump> dumps;
    MetricsReport report = evaluate(trained.net, manifest, Split::test, {0, 1, 2},
                                    TirSource::real(), "MMCount", 1, 2, &dumps);
    CHECK(report.split == "test");
    CHECK(report.n_images == 2);
    CHECK(report.game.at(0) == report.mae);
    CHECK(report.game.at(1) >= report.game.at(0) - 1e-9);
    CHECK(report.game.at(2) >= report.game.at(1) - 1e-9);
    CHECK(report.per_image.size() == 2);
    CHECK(dumps.size() == 2);

    // perfect oracle: feed each image's GT map as the prediction
    KernelSpec spec = KernelSpec::make(manifest.sigma);
    std::vector<double> est, truth, game0;
    for (size_t idx : manifest.split_indices(Split::test)) {
        const SampleRecord& rec = manifest.samples[idx];
        auto [h, w] = png_dimensions(rec.rgb_path);
        Grid2D gt = target_at_scale(rec.points, h, w, spec, 4);
        est.push_back(gt.sum());
        truth.push_back(static_cast<double>(rec.points.size()));
        game0.push_back(game(gt, gt, 1));
    }
    CHECK(mae(est, truth) <= 1e-4);
    for (double g0 : game0) CHECK(g0 == 0.0);

    DatasetManifest no_val =
        tiny_counter_dataset(tmp.path / "ds2", 4, 32, 32, 504, {1.0, 0.0, 0.0});
    CHECK_THROWS_AS(evaluate(trained.net, no_val, Split::val, {0},
                             TirSource::real(), "MMCount", 1),
                    ParameterError);
}

TEST_CASE("tir-only mode trains from TIR alone", "[counter][slow]") {
    qmmtest::TempDir tmp("counter_tir");
    DatasetManifest manifest = tiny_counter_dataset(tmp.path / "ds", 6, 32, 32, 503);
    MMCountConfig cfg = MMCountConfig::scaled(8, InputMode::tir);
    CounterTrainConfig tcfg;
    tcfg.epochs_max = 2;
    tcfg.batch_size = 2;
    tcfg.threads = 1;
    TrainedCounter trained = train_counter(manifest, cfg, tcfg, TirSource::real());
    CHECK(trained.history.size() == 2);

    // rgb mode with a tir source is a config error
    MMCountConfig rgb_cfg = MMCountConfig::scaled(8, InputMode::rgb);
    CHECK_THROWS_AS(train_counter(manifest, rgb_cfg, tcfg, TirSource::real()), ConfigError);
    TrainedCounter rgb_only = train_counter(manifest, rgb_cfg, tcfg, TirSource::none());
    CHECK(rgb_only.history.size() == 2);

    // rgb+tir without a tir source is a data error
    MMCountConfig both = MMCountConfig::scaled(8, InputMode::rgb_tir);
    CHECK_THROWS_AS(train_counter(manifest, both, tcfg, TirSource::none()), DataError);
}
