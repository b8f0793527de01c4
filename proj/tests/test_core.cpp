#include <catch2/catch_amalgamated.hpp>

#include "qmm/core.hpp"
#include "qmm/png_io.hpp"
#include "test_util.hpp"

using namespace qmm;
using qmmtest::TempDir;

TEST_CASE("FGRD header arithmetic", "[core]") {
    TempDir tmp("fgrd");
    Grid2D g(2, 2);
    g.values = {1, 2, 3, 4};
    auto path = tmp.path / "g.fgrd";
    write_grid(g, path);
    CHECK(fs::file_size(path) == 8 + 4 * 4);

    Grid2D z(512, 640);
    auto zpath = tmp.path / "z.fgrd";
    write_grid(z, zpath);
    CHECK(fs::file_size(zpath) == 8u + 512u * 640u * 4u);

    Grid2D back = read_grid(path);
    REQUIRE(back.height == 2);
    REQUIRE(back.width == 2);
    CHECK(back.values == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("FGRD roundtrip is bitwise for float32 grids", "[core][property]") {
    TempDir tmp("fgrd_prop");
    Rng rng(7);
    for (int iter = 0; iter < 100; ++iter) {
        int h = rng.uniform_int(1, 9), w = rng.uniform_int(1, 9);
        Grid2D g = qmmtest::random_float32_grid(rng, h, w);
        auto path = tmp.path / "p.fgrd";
        write_grid(g, path);
        Grid2D back = read_grid(path);
        REQUIRE(back.height == h);
        REQUIRE(back.width == w);
        for (size_t i = 0; i < g.size(); ++i) {
            auto a = std::bit_cast<uint64_t>(g.values[i]);
            auto b = std::bit_cast<uint64_t>(back.values[i]);
            REQUIRE(a == b);
        }
    }
}

TEST_CASE("FGRD format errors", "[core]") {
    TempDir tmp("fgrd_err");
    auto bad_magic = tmp.path / "bad.fgrd";
    {
        std::ofstream f(bad_magic, std::ios::binary);
        f << "NOPE";
        std::vector<char> rest(4 + 16, 0);
        f.write(rest.data(), static_cast<std::streamsize>(rest.size()));
    }
    CHECK_THROWS_AS(read_grid(bad_magic), FormatError);

    Grid2D g(3, 3, 1.0);
    auto trunc = tmp.path / "trunc.fgrd";
    write_grid(g, trunc);
    fs::resize_file(trunc, fs::file_size(trunc) - 5);
    CHECK_THROWS_AS(read_grid(trunc), FormatError);

    CHECK_THROWS_AS(read_grid(tmp.path / "missing.fgrd"), IoError);

    Grid2D nf(1, 2);
    nf.values = {1.0, std::numeric_limits<double>::infinity()};
    CHECK_THROWS_AS(write_grid(nf, tmp.path / "nf.fgrd"), ParameterError);
}

TEST_CASE("sum_pool block sums", "[core]") {
    Grid2D ones(4, 4, 1.0);
    Grid2D pooled = sum_pool(ones, 2);
    REQUIRE(pooled.height == 2);
    REQUIRE(pooled.width == 2);
    for (double v : pooled.values) CHECK(v == 4.0);
    CHECK(pooled.sum() == 16.0);

    Rng rng(3);
    Grid2D g = qmmtest::random_grid(rng, 6, 4);
    Grid2D same = sum_pool(g, 1);
    CHECK(same.values == g.values);

    CHECK_THROWS_AS(sum_pool(g, 4), DimensionError);
    CHECK_THROWS_MATCHES(sum_pool(g, 4), DimensionError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("height")));
}

TEST_CASE("sum_pool conserves and composes", "[core][property]") {
    Rng rng(11);
    for (int iter = 0; iter < 50; ++iter) {
        int a = rng.uniform_int(1, 3), b = rng.uniform_int(1, 3);
        int h = a * b * rng.uniform_int(1, 6);
        int w = a * b * rng.uniform_int(1, 6);
        Grid2D g = qmmtest::random_grid(rng, h, w, 0.0, 10.0);

        Grid2D pooled = sum_pool(g, a);
        double in_sum = g.sum();
        CHECK(std::abs(pooled.sum() - in_sum) <= 1e-6 * std::max(1.0, in_sum));

        Grid2D two_step = sum_pool(pooled, b);
        Grid2D one_step = sum_pool(g, a * b);
        REQUIRE(two_step.size() == one_step.size());
        for (size_t i = 0; i < one_step.size(); ++i)
            CHECK(std::abs(two_step.values[i] - one_step.values[i]) <=
                  1e-6 * std::max(1.0, std::abs(one_step.values[i])));
    }
}

TEST_CASE("to_grayscale weights", "[core]") {
    ImageBuffer white(2, 2, 3, 1.0f);
    ImageBuffer gray = to_grayscale(white);
    REQUIRE(gray.channels == 1);
    CHECK(gray.at(0, 0, 0) == Catch::Approx(1.0).margin(1e-6));

    ImageBuffer red(1, 1, 3);
    red.at(0, 0, 0) = 1.0f;
    CHECK(to_grayscale(red).at(0, 0, 0) == Catch::Approx(0.299).margin(1e-6));

    ImageBuffer half(1, 1, 3, 0.5f);
    CHECK(to_grayscale(half).at(0, 0, 0) == Catch::Approx(0.5).margin(1e-6));

    ImageBuffer mono(2, 3, 1, 0.25f);
    ImageBuffer same = to_grayscale(mono);
    CHECK(same.channels == 1);
    CHECK(same.values == mono.values);
}

TEST_CASE("to_grayscale stays in range", "[core][property]") {
    Rng rng(5);
    for (int iter = 0; iter < 20; ++iter) {
        ImageBuffer img(4, 5, 3);
        for (float& v : img.values) v = static_cast<float>(rng.uniform());
        ImageBuffer g = to_grayscale(img);
        for (float v : g.values) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("PNG roundtrip 8-bit", "[core]") {
    TempDir tmp("png");
    Rng rng(17);

    ImageBuffer rgb(13, 9, 3);
    for (float& v : rgb.values)
        v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
    auto p3 = tmp.path / "rgb.png";
    write_png(p3, rgb);
    auto [h, w] = png_dimensions(p3);
    CHECK(h == 13);
    CHECK(w == 9);
    ImageBuffer back = read_png(p3);
    REQUIRE(back.channels == 3);
    REQUIRE(back.height == 13);
    REQUIRE(back.width == 9);
    CHECK(back.values == rgb.values);

    ImageBuffer gray(7, 7, 1);
    for (float& v : gray.values)
        v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
    auto p1 = tmp.path / "gray.png";
    write_png(p1, gray);
    ImageBuffer gback = read_png(p1);
    REQUIRE(gback.channels == 1);
    CHECK(gback.values == gray.values);
}

TEST_CASE("PNG error paths", "[core]") {
    TempDir tmp("png_err");
    CHECK_THROWS_AS(read_png(tmp.path / "absent.png"), IoError);
    auto junk = tmp.path / "junk.png";
    {
        std::ofstream f(junk, std::ios::binary);
        f << "this is not a png at all, definitely longer than 24 bytes";
    }
    CHECK_THROWS_AS(read_png(junk), FormatError);
    CHECK_THROWS_AS(png_dimensions(junk), FormatError);
}
