#include <catch2/catch_amalgamated.hpp>

#include "qmm/png_io.hpp"
#include "qmm/report.hpp"
#include "test_util.hpp"

using namespace qmm;

static MetricsReport fixture(const std::string& model, const std::string& mode,
                             std::map<int, double> game) {
    MetricsReport r;
    r.model = model;
    r.input_mode = mode;
    r.split = "test";
    r.n_images = 10;
    r.game = std::move(game);
    r.mae = r.game.count(0) ? r.game[0] : 0.0;
    return r;
}

TEST_CASE("markdown table renders the comparison fixtures verbatim", "[report]") {
    // monomodal comparison rows
    auto t2 = render_markdown_table({fixture("MCNN", "rgb", {{0, 17.9}}),
                                     fixture("MCNN", "tir", {{0, 20.2}}),
                                     fixture("MCNN", "generated-tir", {{0, 22.5}})});
    CHECK(t2.find("| 17.9 |") != std::string::npos);
    CHECK(t2.find("| 20.2 |") != std::string::npos);
    CHECK(t2.find("| 22.5 |") != std::string::npos);

    // multimodal rows with GAME levels
    auto t3 = render_markdown_table(
        {fixture("MMCount", "rgb+tir", {{0, 9.2}, {1, 18.0}, {2, 26.0}})});
    CHECK(t3.find("GAME0") != std::string::npos);
    CHECK(t3.find("GAME1") != std::string::npos);
    CHECK(t3.find("GAME2") != std::string::npos);
    CHECK(t3.find("| 9.2 |") != std::string::npos);
    CHECK(t3.find("| 18.0 |") != std::string::npos);
    CHECK(t3.find("| 26.0 |") != std::string::npos);

    // three input modes -> three rows
    auto rows = render_markdown_table(
        {fixture("MMCount", "rgb", {{0, 10.8}, {1, 21.1}, {2, 32.4}}),
         fixture("MMCount", "tir", {{0, 16.0}, {1, 23.3}, {2, 40.6}}),
         fixture("MMCount", "rgb+tir", {{0, 9.2}, {1, 18.0}, {2, 26.0}})});
    int row_count = 0;
    for (size_t pos = 0; (pos = rows.find("| MMCount |", pos)) != std::string::npos; ++pos)
        ++row_count;
    CHECK(row_count == 3);
}

TEST_CASE("loss curve plot writes a decodable PNG", "[report]") {
    qmmtest::TempDir tmp("plot");
    std::vector<PlotSeries> series{{"a", {1.0, 0.8, 0.5, 0.4, 0.35}},
                                   {"b", {0.2, 0.3, 0.25, 0.2, 0.18}}};
    ImageBuffer img = plot_loss_curves(series, 320, 200);
    CHECK(img.width == 320);
    CHECK(img.height == 200);
    write_png(tmp.path / "loss.png", img);
    ImageBuffer back = read_png(tmp.path / "loss.png");
    CHECK(back.width == 320);
    // something was drawn (not all white)
    bool non_white = false;
    for (float v : back.values)
        if (v < 0.9f) non_white = true;
    CHECK(non_white);
}

TEST_CASE("density side-by-side panel", "[report]") {
    Rng rng(701);
    Grid2D pred = qmmtest::random_grid(rng, 8, 10, 0.0, 0.2);
    Grid2D gt = qmmtest::random_grid(rng, 8, 10, 0.0, 0.2);
    ImageBuffer img = density_side_by_side(pred, gt, 4);
    CHECK(img.height == 32);
    CHECK(img.width == 2 * 40 + 4);

    Grid2D other(4, 4);
    CHECK_THROWS_AS(density_side_by_side(pred, other), ParameterError);
}
