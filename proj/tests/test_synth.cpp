#include <doctest.h>

#include "reprloc/error.hpp"
#include "reprloc/fsutil.hpp"
#include "reprloc/synth.hpp"
#include "test_support.hpp"

using namespace reprloc;
using namespace reprloc::synth;
using featstore::BBox;
using reprloc::testing::TempDir;

namespace {

SynthSpec small() {
    SynthSpec s;
    s.image_count = 6;
    s.image_width = 32;
    s.image_height = 32;
    s.grid_height = 4;
    s.grid_width = 4;
    s.channels = 8;
    return s;
}

}  // namespace

TEST_CASE("fixed box is echoed exactly") {
    TempDir dir("syn1");
    auto s = small();
    s.fixed_box = BBox{8, 8, 24, 24};
    auto m = generate_synthetic(s, dir.path());
    REQUIRE(m.entries.size() == 6);
    for (const auto& e : m.entries) {
        REQUIRE(e.gt_boxes.size() == 1);
        CHECK(e.gt_boxes[0] == BBox{8, 8, 24, 24});
        CHECK(e.image_width == 32);
        auto mask = featstore::read_pgm(*e.gt_mask_file);
        CHECK(mask.width == 32);
        int fg = 0;
        for (auto p : mask.pixels) fg += p != 0;
        CHECK(fg == 16 * 16);
    }
    CHECK(featstore::validate_dataset(m).failures.empty());
}

TEST_CASE("output is a pure function of the spec") {
    TempDir a("syn2a"), b("syn2b"), c("syn2c");
    auto s = small();
    s.seed = 42;
    generate_synthetic(s, a.path());
    generate_synthetic(s, b.path());
    s.seed = 43;
    generate_synthetic(s, c.path());
    for (const auto& rel : {"manifest.json", "features/img_00000.rpsf", "features/img_00005.rpsf",
                            "masks/img_00003.pgm"}) {
        CHECK(read_file_bytes(a / rel) == read_file_bytes(b / rel));
    }
    CHECK(read_file_bytes(a / "features/img_00000.rpsf") != read_file_bytes(c / "features/img_00000.rpsf"));
}

TEST_CASE("splits, classes and random boxes") {
    TempDir dir("syn3");
    auto s = small();
    s.image_count = 10;
    s.num_classes = 3;
    s.test_fraction = 0.3;
    auto m = generate_synthetic(s, dir.path());
    CHECK(m.with_split(featstore::Split::test).size() == 3);
    CHECK(m.entries.back().split == featstore::Split::test);
    CHECK(m.entries.front().split == featstore::Split::train);
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const auto& e = m.entries[i];
        CHECK(e.class_id == static_cast<int>(i % 3));
        const auto& b = e.gt_boxes.at(0);
        CHECK(b.valid());
        CHECK(b.x0 % 8 == 0);
        CHECK(b.y1 % 8 == 0);
        CHECK(b.x1 <= 32);
    }
    auto fm = featstore::read_feature_map(m.entries[0].feature_file);
    CHECK(fm.channels == 8);
    CHECK(fm.height == 4);
}

TEST_CASE("spec validation and JSON") {
    auto s = small();
    s.fixed_box = BBox{0, 0, 40, 10};
    CHECK_THROWS_AS(s.validate(), InvariantError);
    s.fixed_box = BBox{1, 1, 3, 3};  // covers no patch centre
    CHECK_THROWS_AS(s.validate(), InvariantError);
    s = small();
    s.image_count = 0;
    CHECK_THROWS_AS(s.validate(), InvariantError);

    s = small();
    s.fixed_box = BBox{8, 8, 24, 24};
    s.seed = 9;
    auto back = spec_from_json(to_json(s));
    CHECK(to_json(back) == to_json(s));
    CHECK(spec_from_json(nlohmann::json::object()).image_count == 50);
    CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"image_count", "many"}}), FormatError);
}
