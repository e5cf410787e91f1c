#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "reprloc/error.hpp"
#include "reprloc/localizer.hpp"
#include "test_support.hpp"

using namespace reprloc;
using namespace reprloc::localizer;
using featstore::BBox;
using reprloc::testing::map_from_patches;

namespace {

Grid grid_of(int h, int w, std::vector<double> v) {
    Grid g(h, w);
    g.values = std::move(v);
    return g;
}

Mask mask_of(int h, int w, const std::vector<int>& bits) {
    Mask m{h, w, {}};
    for (int b : bits) m.bits.push_back(static_cast<std::uint8_t>(b));
    return m;
}

representer::ForegroundPredictor predictor(std::vector<double> w) {
    representer::ForegroundPredictor p;
    p.w = std::move(w);
    p.tau = 1.0;
    return p;
}

}  // namespace

TEST_CASE("minmax_normalize") {
    auto n = minmax_normalize(grid_of(1, 3, {-2, 0, 2}));
    CHECK_FALSE(n.degenerate);
    CHECK(n.grid.values == std::vector<double>{0.0, 0.5, 1.0});

    auto d = minmax_normalize(grid_of(2, 2, {3, 3, 3, 3}));
    CHECK(d.degenerate);
    CHECK(d.grid.values == std::vector<double>(4, 0.0));

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-50, 50);
    for (int t = 0; t < 50; ++t) {
        Grid g(5, 7);
        for (auto& x : g.values) x = u(rng);
        auto r = minmax_normalize(g).grid;
        CHECK(*std::max_element(r.values.begin(), r.values.end()) == 1.0);
        CHECK(*std::min_element(r.values.begin(), r.values.end()) == 0.0);
    }
}

TEST_CASE("activation map uses w against unit patches") {
    auto fm = map_from_patches("a", 1, 3, {{2, 0}, {0, 5}, {0, 0}});
    auto am = activation_map(fm, predictor({0.5, -1.0}));
    CHECK(am.raw.values == std::vector<double>{0.5, -1.0, 0.0});
    CHECK(am.normalized.values == std::vector<double>{1.0, 0.0, 1.0 / 1.5});
    CHECK_THROWS_AS(activation_map(fm, predictor({1, 2, 3})), DimensionError);

    auto flat = activation_map(fm, predictor({0.0, 0.0}));
    CHECK(flat.degenerate);
}

TEST_CASE("bilinear upsampling") {
    auto up = upsample_bilinear(grid_of(2, 2, {0, 1, 0, 1}), 4, 2);
    CHECK(up.values == std::vector<double>{0, 0.25, 0.75, 1, 0, 0.25, 0.75, 1});

    auto same = grid_of(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(upsample_bilinear(same, 3, 2) == same);

    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 30; ++t) {
        Grid g(1 + rng() % 6, 1 + rng() % 6);
        for (auto& x : g.values) x = u(rng);
        const int tw = 1 + rng() % 40, th = 1 + rng() % 40;
        auto a = upsample_bilinear(g, tw, th);
        auto b = oracle::bilinear(g, tw, th);
        REQUIRE(a.values.size() == b.values.size());
        for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(std::abs(a.values[i] - b.values[i]) <= 1e-12);
        // Convex combination of the input: stays inside its range.
        const auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
        for (double x : a.values) CHECK((x >= *lo - 1e-12 && x <= *hi + 1e-12));
    }
}

TEST_CASE("threshold mask is inclusive") {
    auto m = threshold_mask(grid_of(1, 4, {0.2, 0.5, 0.7, 1.0}), 0.5);
    CHECK(m.bits == std::vector<std::uint8_t>{0, 1, 1, 1});
    CHECK(threshold_mask(grid_of(1, 2, {0.0, 0.3}), 0.0).bits == std::vector<std::uint8_t>{1, 1});
}

TEST_CASE("boxes from mask fixtures") {
    // 3×2 blob at columns 1..3, rows 1..2 of a 5×5 mask.
    Mask blob{5, 5, std::vector<std::uint8_t>(25, 0)};
    for (int r = 1; r < 3; ++r)
        for (int c = 1; c < 4; ++c) blob.bits[r * 5 + c] = 1;
    auto b = boxes_from_mask(blob, 4, BoxPolicy::largest);
    REQUIRE(b.size() == 1);
    CHECK(b[0] == BBox{1, 1, 4, 3});

    auto diag = mask_of(2, 2, {1, 0, 0, 1});
    CHECK(boxes_from_mask(diag, 4, BoxPolicy::all).size() == 2);
    auto d8 = boxes_from_mask(diag, 8, BoxPolicy::all);
    REQUIRE(d8.size() == 1);
    CHECK(d8[0] == BBox{0, 0, 2, 2});

    CHECK(boxes_from_mask(mask_of(2, 2, {0, 0, 0, 0}), 4, BoxPolicy::largest).empty());
    CHECK_THROWS_AS(boxes_from_mask(diag, 6, BoxPolicy::all), UsageError);

    // Equal pixel counts: smallest (x0, y0) wins.
    auto tie = mask_of(3, 3, {0, 0, 1, 0, 0, 0, 1, 0, 0});
    auto t = boxes_from_mask(tie, 4, BoxPolicy::largest);
    REQUIRE(t.size() == 1);
    CHECK(t[0] == BBox{0, 2, 1, 3});

    // `all` orders by area.
    auto two = mask_of(3, 4, {1, 1, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0});
    auto all = boxes_from_mask(two, 4, BoxPolicy::all);
    REQUIRE(all.size() == 2);
    CHECK(all[0] == BBox{0, 0, 2, 2});
    CHECK(all[1] == BBox{3, 0, 4, 1});
}

TEST_CASE("components match the union-find oracle on random masks") {
    std::mt19937_64 rng(123);
    for (int t = 0; t < 100; ++t) {
        Mask m{16, 16, std::vector<std::uint8_t>(256)};
        const double p = 0.2 + 0.5 * (t % 5) / 4.0;
        std::bernoulli_distribution bit(p);
        for (auto& x : m.bits) x = bit(rng);
        for (int conn : {4, 8}) {
            auto got = boxes_from_mask(m, conn, BoxPolicy::all);
            std::sort(got.begin(), got.end());
            auto want = oracle::component_boxes(m, conn);
            CHECK(got == want);
            for (const auto& b : got) {
                CHECK(b.valid());
                CHECK(b.x1 <= 16);
                CHECK(b.y1 <= 16);
            }
        }
    }
}

TEST_CASE("localize end to end") {
    // Foreground patches along (1,0), background along (0,1).
    auto fm = map_from_patches("img", 2, 2, {{1, 0}, {0, 1}, {0, 1}, {0, 1}});
    auto pred = predictor({1.0, -1.0});
    auto r = localize(fm, pred, 8, 8, {});
    CHECK(r.score_map.height == 8);
    CHECK(r.score_map.width == 8);
    CHECK_FALSE(r.degenerate);
    REQUIRE(r.chosen_box);
    CHECK(r.chosen_box->x0 == 0);
    CHECK(r.chosen_box->y0 == 0);
    CHECK(r.chosen_box->x1 <= 8);

    LocalizeParams zero;
    zero.threshold = 0.0;
    auto z = localize(fm, pred, 8, 8, zero);
    REQUIRE(z.chosen_box);
    CHECK(*z.chosen_box == BBox{0, 0, 8, 8});

    LocalizeParams bad;
    bad.threshold = 1.01;
    CHECK_THROWS_AS(localize(fm, pred, 8, 8, bad), UsageError);

    auto flat = localize(fm, predictor({0.0, 0.0}), 8, 8, {});
    CHECK(flat.degenerate);
    CHECK(flat.chosen_box == std::nullopt);
    CHECK(flat.boxes.empty());

    auto j = to_json(r);
    CHECK(j["image_id"] == "img");
    CHECK(j["normalized"].size() == 4);  // row-major, 2×2
    CHECK(j["chosen_box"].size() == 4);
}

TEST_CASE("masks nest as the threshold rises") {
    std::mt19937_64 rng(44);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 20; ++t) {
        Grid g(12, 12);
        for (auto& x : g.values) x = u(rng);
        Mask prev = threshold_mask(g, 0.0);
        for (int k = 1; k <= 20; ++k) {
            Mask cur = threshold_mask(g, k / 20.0);
            for (std::size_t p = 0; p < cur.bits.size(); ++p)
                if (cur.bits[p]) CHECK(prev.bits[p]);
            prev = cur;
        }
    }
}

TEST_CASE("localization is invariant to positive feature scaling") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 10; ++t) {
        auto fm = reprloc::testing::random_map("s", 4, 6, 6, rng);
        auto pred = predictor({0.3, -0.2, 0.7, 0.1});
        auto base = localize(fm, pred, 48, 48, {});
        for (double s : {0.5, 3.0}) {
            auto scaled = fm;
            for (auto& x : scaled.data) x = static_cast<float>(x * s);
            auto r = localize(scaled, pred, 48, 48, {});
            for (std::size_t i = 0; i < base.activation.raw.values.size(); ++i)
                CHECK(std::abs(r.activation.raw.values[i] - base.activation.raw.values[i]) <= 1e-6);
            for (std::size_t i = 0; i < base.activation.normalized.values.size(); ++i)
                CHECK(std::abs(r.activation.normalized.values[i] - base.activation.normalized.values[i]) <= 1e-6);
            CHECK(r.chosen_box == base.chosen_box);
        }
    }
}

TEST_CASE("policy parsing") {
    CHECK(parse_policy("largest") == BoxPolicy::largest);
    CHECK(parse_policy("all") == BoxPolicy::all);
    CHECK(to_string(BoxPolicy::all) == "all");
    CHECK_THROWS_AS(parse_policy("biggest"), UsageError);
}
