#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <json.hpp>

#include "reprloc/featstore.hpp"

namespace reprloc::synth {

// Planted-foreground dataset description. Patches inside each image's box get
// norms around fg_norm_mean and directions near a per-class foreground
// prototype; the rest get bg_norm_mean and a shared background prototype.
// Direction = normalize(concentration·prototype + N(0, I)), so a larger
// concentration gives tighter clusters.
struct SynthSpec {
    int image_count = 50;
    int image_width = 64;
    int image_height = 64;
    int grid_height = 8;
    int grid_width = 8;
    int channels = 16;
    std::optional<featstore::BBox> fixed_box;  // pixel box used for every image
    double min_box_frac = 0.25;                // random box side, fraction of the grid
    double max_box_frac = 0.75;
    double fg_norm_mean = 2.0;
    double bg_norm_mean = 0.5;
    double norm_jitter = 0.1;  // relative std-dev of patch norms
    double fg_concentration = 4.0;
    double bg_concentration = 4.0;
    int num_classes = 1;
    double test_fraction = 0.5;  // trailing fraction of images tagged test
    std::uint64_t seed = 0;
    bool emit_masks = true;

    void validate() const;
};

SynthSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthSpec& s);

// Pixel column where patch column c starts (c may equal grid width).
int patch_edge(int c, int grid, int pixels);

// Writes out_dir/manifest.json, out_dir/features/*.rpsf and, when enabled,
// out_dir/masks/*.pgm. Output bytes are a pure function of the spec.
featstore::DatasetManifest generate_synthetic(const SynthSpec& spec,
                                              const std::filesystem::path& out_dir);

}  // namespace reprloc::synth
