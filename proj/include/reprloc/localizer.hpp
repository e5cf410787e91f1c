#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprloc/featstore.hpp"
#include "reprloc/representer.hpp"

namespace reprloc::localizer {

using featstore::BBox;

// Row-major 2-D grid of doubles.
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    Grid() = default;
    Grid(int h, int w, double fill = 0.0)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
    bool operator==(const Grid&) const = default;
};

struct Normalized {
    Grid grid;
    bool degenerate = false;
};

// (x − min) / (max − min); all-zero grid plus the flag when max == min.
Normalized minmax_normalize(const Grid& g);

struct ActivationMap {
    std::string image_id;
    Grid raw;         // wᵀ f̂ per patch, zero-norm patches score 0
    Grid normalized;  // in [0, 1]
    bool degenerate = false;
};

ActivationMap activation_map(const featstore::FeatureMap& fm,
                             const representer::ForegroundPredictor& predictor);

// Bilinear resampling with half-pixel centres (source coordinate
// (x + 0.5)·W/Wi − 0.5, clamped to the border).
Grid upsample_bilinear(const Grid& g, int target_width, int target_height);

// Binary mask, row-major.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    bool at(int r, int c) const { return bits[static_cast<std::size_t>(r) * width + c] != 0; }
    bool operator==(const Mask&) const = default;
};

// Pixels with value >= theta.
Mask threshold_mask(const Grid& g, double theta);

enum class BoxPolicy { largest, all };
BoxPolicy parse_policy(const std::string& s);
std::string to_string(BoxPolicy p);

// Tight half-open boxes of the connected components of mask. `largest` keeps
// the component with most pixels (ties: smallest (x0, y0)); `all` returns every
// component sorted by box area descending, then by coordinates.
std::vector<BBox> boxes_from_mask(const Mask& mask, int connectivity, BoxPolicy policy);

struct LocalizeParams {
    double threshold = 0.5;
    int connectivity = 4;
    BoxPolicy policy = BoxPolicy::largest;
};

struct LocalizationResult {
    std::string image_id;
    double threshold = 0.0;
    bool degenerate = false;
    ActivationMap activation;
    Grid score_map;  // normalized activation at image resolution
    Mask mask;
    std::vector<BBox> boxes;
    std::optional<BBox> chosen_box;
};

LocalizationResult localize(const featstore::FeatureMap& fm,
                            const representer::ForegroundPredictor& predictor,
                            int image_width, int image_height, const LocalizeParams& params);

// Normalized activation upsampled to image resolution (zeros when degenerate).
Grid score_map(const ActivationMap& am, int image_width, int image_height);

}  // namespace reprloc::localizer

namespace reprloc::localizer {

// Patch-resolution normalized map, boxes and flags; shared by `infer` output
// and the localize endpoint.
nlohmann::json to_json(const LocalizationResult& r);

}  // namespace reprloc::localizer
