#include <catch2/catch_amalgamated.hpp>

#include "qmm/nn/adam.hpp"
#include "qmm/nn/checkpoint.hpp"
#include "qmm/nn/layers.hpp"
#include "test_util.hpp"

using namespace qmm;
using nn::Tensor;

namespace {

void fill_random(Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (double& v : t.v) v = rng.uniform(lo, hi);
}

// projection loss L = sum_k w_k * y_k; dL/dy = w
struct Projection {
    std::vector<double> w;
    explicit Projection(size_t n, Rng& rng) : w(n) {
        for (double& v : w) v = rng.uniform(-1.0, 1.0);
    }
    double loss(const Tensor<double>& y) const {
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += w[i] * y.v[i];
        return s;
    }
    Tensor<double> dy(const Tensor<double>& y) const {
        Tensor<double> d(y.n, y.c, y.h, y.w);
        d.v.assign(w.begin(), w.end());
        return d;
    }
};

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

// central finite difference through an arbitrary loss closure
template <typename LossFn>
double fd(std::vector<double>& param, size_t idx, LossFn&& loss, double h = 1e-6) {
    double orig = param[idx];
    param[idx] = orig + h;
    double lp = loss();
    param[idx] = orig - h;
    double lm = loss();
    param[idx] = orig;
    return (lp - lm) / (2.0 * h);
}

} // namespace

TEST_CASE("conv forward matches a direct convolution oracle", "[nn]") {
    Rng rng(101);
    // shapes chosen to exercise stride and padding
    struct Case {
        int n, c, h, w, out, k, pad, stride;
    };
    for (const Case& cs : {Case{2, 3, 6, 8, 4, 3, 1, 1}, Case{1, 2, 8, 8, 3, 3, 1, 2},
                           Case{1, 4, 5, 5, 2, 1, 0, 1}}) {
        nn::ConvLayer<double> layer(cs.c, cs.out, cs.k, cs.pad, cs.stride);
        layer.init(rng);
        Tensor<double> x(cs.n, cs.c, cs.h, cs.w);
        fill_random(x, rng);
        Tensor<double> y;
        nn::ConvScratch<double> scratch;
        nn::conv_forward(layer, x, y, scratch);

        const int ho = nn::conv_out_dim(cs.h, cs.k, cs.pad, cs.stride);
        const int wo = nn::conv_out_dim(cs.w, cs.k, cs.pad, cs.stride);
        REQUIRE(y.h == ho);
        REQUIRE(y.w == wo);
        for (int i = 0; i < cs.n; ++i)
            for (int oc = 0; oc < cs.out; ++oc)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        double s = layer.bias[static_cast<size_t>(oc)];
                        for (int ic = 0; ic < cs.c; ++ic)
                            for (int ky = 0; ky < cs.k; ++ky)
                                for (int kx = 0; kx < cs.k; ++kx) {
                                    int iy = oy * cs.stride - cs.pad + ky;
                                    int ix = ox * cs.stride - cs.pad + kx;
                                    if (iy < 0 || iy >= cs.h || ix < 0 || ix >= cs.w) continue;
                                    s += layer.weight[((static_cast<size_t>(oc) * cs.c + ic) *
                                                           cs.k + ky) * cs.k + kx] *
                                         x.at(i, ic, iy, ix);
                                }
                        CHECK(rel_err(s, y.at(i, oc, oy, ox)) < 1e-9);
                    }
    }
}

TEST_CASE("conv backward matches finite differences", "[nn][gradcheck]") {
    Rng rng(103);
    nn::ConvLayer<double> layer(3, 4, 3, 1, 2);
    layer.init(rng);
    Tensor<double> x(2, 3, 6, 6);
    fill_random(x, rng);
    nn::ConvScratch<double> scratch;

    Tensor<double> y;
    nn::conv_forward(layer, x, y, scratch);
    Projection proj(y.size(), rng);

    Tensor<double> dy = proj.dy(y);
    Tensor<double> dx;
    nn::ConvGrads<double> grads(layer);
    nn::conv_backward(layer, x, dy, &dx, &grads, scratch);

    auto loss = [&]() {
        Tensor<double> out;
        nn::conv_forward(layer, x, out, scratch);
        return proj.loss(out);
    };
    for (size_t i = 0; i < layer.weight.size(); ++i)
        CHECK(rel_err(grads.dweight[i], fd(layer.weight, i, loss)) < 1e-6);
    for (size_t i = 0; i < layer.bias.size(); ++i)
        CHECK(rel_err(grads.dbias[i], fd(layer.bias, i, loss)) < 1e-6);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(rel_err(dx.v[i], fd(x.v, i, loss)) < 1e-6);
}

TEST_CASE("maxpool forward/backward", "[nn][gradcheck]") {
    Rng rng(107);
    Tensor<double> x(2, 3, 6, 4);
    fill_random(x, rng);
    Tensor<double> y;
    std::vector<int> argmax;
    nn::maxpool2_forward(x, y, argmax);
    REQUIRE(y.h == 3);
    REQUIRE(y.w == 2);
    // oracle: block maxima
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < 3; ++c)
            for (int oy = 0; oy < 3; ++oy)
                for (int ox = 0; ox < 2; ++ox) {
                    double m = std::max({x.at(i, c, 2 * oy, 2 * ox), x.at(i, c, 2 * oy, 2 * ox + 1),
                                         x.at(i, c, 2 * oy + 1, 2 * ox),
                                         x.at(i, c, 2 * oy + 1, 2 * ox + 1)});
                    CHECK(y.at(i, c, oy, ox) == m);
                }

    Projection proj(y.size(), rng);
    Tensor<double> dy = proj.dy(y);
    Tensor<double> dx;
    nn::maxpool2_backward(argmax, dy, x.h, x.w, dx);
    auto loss = [&]() {
        Tensor<double> out;
        std::vector<int> am;
        nn::maxpool2_forward(x, out, am);
        return proj.loss(out);
    };
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(rel_err(dx.v[i], fd(x.v, i, loss)) < 1e-6);

    Tensor<double> odd(1, 1, 5, 4);
    Tensor<double> tmp;
    std::vector<int> am;
    CHECK_THROWS_AS(nn::maxpool2_forward(odd, tmp, am), DimensionError);
}

TEST_CASE("upsample2 forward/backward", "[nn][gradcheck]") {
    Rng rng(109);
    Tensor<double> x(1, 2, 3, 3);
    fill_random(x, rng);
    Tensor<double> y;
    nn::upsample2_forward(x, y);
    REQUIRE(y.h == 6);
    REQUIRE(y.w == 6);
    CHECK(y.at(0, 1, 5, 4) == x.at(0, 1, 2, 2));

    Projection proj(y.size(), rng);
    Tensor<double> dy = proj.dy(y);
    Tensor<double> dx;
    nn::upsample2_backward(dy, dx);
    auto loss = [&]() {
        Tensor<double> out;
        nn::upsample2_forward(x, out);
        return proj.loss(out);
    };
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(rel_err(dx.v[i], fd(x.v, i, loss)) < 1e-6);
}

TEST_CASE("activations match finite differences", "[nn][gradcheck]") {
    Rng rng(113);
    Tensor<double> x(1, 2, 4, 4);
    fill_random(x, rng);

    SECTION("leaky relu") {
        Tensor<double> y = x;
        nn::leaky_relu_forward(y, 0.2);
        Projection proj(y.size(), rng);
        Tensor<double> dy = proj.dy(y);
        nn::leaky_relu_backward(y, dy, 0.2);
        for (size_t i = 0; i < x.size(); ++i) {
            auto loss = [&]() {
                Tensor<double> t = x;
                nn::leaky_relu_forward(t, 0.2);
                return proj.loss(t);
            };
            CHECK(rel_err(dy.v[i], fd(x.v, i, loss)) < 1e-6);
        }
    }
    SECTION("tanh01") {
        Tensor<double> y = x;
        nn::tanh01_forward(y);
        for (double v : y.v) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
        Projection proj(y.size(), rng);
        Tensor<double> dy = proj.dy(y);
        nn::tanh01_backward(y, dy);
        for (size_t i = 0; i < x.size(); ++i) {
            auto loss = [&]() {
                Tensor<double> t = x;
                nn::tanh01_forward(t);
                return proj.loss(t);
            };
            CHECK(rel_err(dy.v[i], fd(x.v, i, loss)) < 1e-6);
        }
    }
}

TEST_CASE("concat/split are inverse", "[nn]") {
    Rng rng(127);
    Tensor<double> a(2, 3, 4, 5), b(2, 2, 4, 5);
    fill_random(a, rng);
    fill_random(b, rng);
    Tensor<double> cat;
    nn::concat_channels(a, b, cat);
    REQUIRE(cat.c == 5);
    Tensor<double> da, db;
    nn::split_channels(cat, da, db, 3);
    CHECK(da.v == a.v);
    CHECK(db.v == b.v);
}

TEST_CASE("adam single step hand fixture", "[nn]") {
    // one parameter, g=0.5: mhat=0.5, vhat=0.25, step = lr * 0.5 / (0.5 + eps)
    std::vector<float> p{1.0f};
    std::vector<float> g{0.5f};
    nn::ParamRef<float> ref{"p", &p};
    nn::AdamOptimizer<float> opt(0.1, 0.9, 0.999, 1e-8);
    opt.step({ref}, {&g});
    CHECK(p[0] == Catch::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8))).epsilon(1e-6));

    // direction follows the gradient sign
    std::vector<float> q{0.0f};
    std::vector<float> gq{-2.0f};
    nn::ParamRef<float> qref{"q", &q};
    nn::AdamOptimizer<float> opt2(0.01, 0.9, 0.999);
    opt2.step({qref}, {&gq});
    CHECK(q[0] > 0.0f);
}

TEST_CASE("checkpoint container roundtrip", "[nn]") {
    qmmtest::TempDir tmp("ckpt");
    Rng rng(131);
    std::vector<float> a(37), b(5);
    for (float& v : a) v = static_cast<float>(rng.uniform(-2, 2));
    for (float& v : b) v = static_cast<float>(rng.uniform(-2, 2));
    std::vector<nn::ParamRef<float>> params{{"net.a", &a}, {"net.b", &b}};

    nlohmann::json meta{{"kind", "test"}, {"seed", 7}, {"config", {{"x", 1}}}};
    auto path = tmp.path / "m.ckpt";
    nn::write_checkpoint(path, meta, params);

    nlohmann::json back = nn::read_checkpoint_meta(path);
    CHECK(back.at("kind") == "test");
    CHECK(back.at("seed") == 7);
    REQUIRE(back.at("arrays").size() == 2);
    CHECK(back["arrays"][0]["name"] == "net.a");

    std::vector<float> a2(37, 0.0f), b2(5, 0.0f);
    std::vector<nn::ParamRef<float>> params2{{"net.a", &a2}, {"net.b", &b2}};
    nn::load_checkpoint_arrays(path, params2);
    CHECK(a2 == a);
    CHECK(b2 == b);

    // wrong name order rejected
    std::vector<nn::ParamRef<float>> bad{{"net.b", &b2}, {"net.a", &a2}};
    CHECK_THROWS_AS(nn::load_checkpoint_arrays(path, bad), FormatError);

    // corrupt magic rejected
    auto junk = tmp.path / "junk.ckpt";
    {
        std::ofstream f(junk, std::ios::binary);
        f << "AAAA0000000000000000";
    }
    CHECK_THROWS_AS(nn::read_checkpoint_meta(junk), FormatError);
}
