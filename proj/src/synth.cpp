#include "reprloc/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "reprloc/error.hpp"
#include "reprloc/parallel.hpp"

namespace reprloc::synth {

namespace fs = std::filesystem;
using featstore::BBox;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Gaussian draws built directly on mt19937_64 output so that bytes do not
// depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double gaussian() {
        if (spare_) {
            double s = *spare_;
            spare_.reset();
            return s;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    int integer(int lo, int hi) {  // inclusive
        return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

private:
    std::mt19937_64 eng_;
    std::optional<double> spare_;
};

std::vector<double> random_unit(Rng& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    double n = 0.0;
    while (n == 0.0) {
        n = 0.0;
        for (auto& x : v) {
            x = rng.gaussian();
            n += x * x;
        }
        n = std::sqrt(n);
    }
    for (auto& x : v) x /= n;
    return v;
}

void write_patch(featstore::FeatureMap& fm, int row, int col, const std::vector<double>& proto,
                 double concentration, double norm_mean, double jitter, Rng& rng) {
    std::vector<double> d(proto.size());
    double n = 0.0;
    for (std::size_t c = 0; c < d.size(); ++c) {
        d[c] = concentration * proto[c] + rng.gaussian();
        n += d[c] * d[c];
    }
    n = std::sqrt(n);
    const double norm = norm_mean * std::max(0.05, 1.0 + jitter * rng.gaussian());
    for (std::size_t c = 0; c < d.size(); ++c)
        fm.at(static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(row),
              static_cast<std::uint32_t>(col)) = static_cast<float>(n > 0 ? norm * d[c] / n : 0.0);
}

}  // namespace

void SynthSpec::validate() const {
    auto fail = [](const std::string& m) { throw InvariantError("synth spec: " + m); };
    if (image_count < 1) fail("image_count must be >= 1");
    if (image_width < 1 || image_height < 1) fail("image size must be positive");
    if (grid_width < 1 || grid_height < 1) fail("grid size must be positive");
    if (grid_width > image_width || grid_height > image_height)
        fail("grid cannot be finer than the image");
    if (channels < 1) fail("channels must be >= 1");
    if (!(fg_norm_mean > 0) || !(bg_norm_mean > 0)) fail("norm means must be positive");
    if (norm_jitter < 0) fail("norm_jitter must be >= 0");
    if (!(min_box_frac > 0 && min_box_frac <= max_box_frac && max_box_frac <= 1))
        fail("need 0 < min_box_frac <= max_box_frac <= 1");
    if (num_classes < 1) fail("num_classes must be >= 1");
    if (!(test_fraction >= 0 && test_fraction < 1)) fail("test_fraction must lie in [0, 1)");
    if (fixed_box) {
        const auto& b = *fixed_box;
        if (!b.valid() || b.x1 > image_width || b.y1 > image_height)
            fail("fixed_box " + featstore::to_json(b).dump() + " exceeds the " +
                 std::to_string(image_width) + "x" + std::to_string(image_height) + " image");
        // Foreground patches are those whose centre lies inside the box.
        bool any = false;
        for (int r = 0; r < grid_height && !any; ++r)
            for (int c = 0; c < grid_width && !any; ++c) {
                const double cx = (c + 0.5) * image_width / grid_width;
                const double cy = (r + 0.5) * image_height / grid_height;
                any = cx >= b.x0 && cx < b.x1 && cy >= b.y0 && cy < b.y1;
            }
        if (!any) fail("fixed_box covers no patch centre of the feature grid");
    }
}

int patch_edge(int c, int grid, int pixels) {
    return static_cast<int>((static_cast<long long>(c) * pixels) / grid);
}

SynthSpec spec_from_json(const json& j) {
    SynthSpec s;
    try {
        s.image_count = j.value("image_count", s.image_count);
        s.image_width = j.value("image_width", s.image_width);
        s.image_height = j.value("image_height", s.image_height);
        s.grid_height = j.value("grid_height", s.grid_height);
        s.grid_width = j.value("grid_width", s.grid_width);
        s.channels = j.value("channels", s.channels);
        if (j.contains("fixed_box") && !j["fixed_box"].is_null())
            s.fixed_box = featstore::box_from_json(j["fixed_box"]);
        s.min_box_frac = j.value("min_box_frac", s.min_box_frac);
        s.max_box_frac = j.value("max_box_frac", s.max_box_frac);
        s.fg_norm_mean = j.value("fg_norm_mean", s.fg_norm_mean);
        s.bg_norm_mean = j.value("bg_norm_mean", s.bg_norm_mean);
        s.norm_jitter = j.value("norm_jitter", s.norm_jitter);
        s.fg_concentration = j.value("fg_concentration", s.fg_concentration);
        s.bg_concentration = j.value("bg_concentration", s.bg_concentration);
        s.num_classes = j.value("num_classes", s.num_classes);
        s.test_fraction = j.value("test_fraction", s.test_fraction);
        s.seed = j.value("seed", s.seed);
        s.emit_masks = j.value("emit_masks", s.emit_masks);
    } catch (const json::type_error& e) {
        throw FormatError(std::string("synth spec: ") + e.what());
    }
    s.validate();
    return s;
}

json to_json(const SynthSpec& s) {
    json j{{"image_count", s.image_count},       {"image_width", s.image_width},
           {"image_height", s.image_height},     {"grid_height", s.grid_height},
           {"grid_width", s.grid_width},         {"channels", s.channels},
           {"min_box_frac", s.min_box_frac},     {"max_box_frac", s.max_box_frac},
           {"fg_norm_mean", s.fg_norm_mean},     {"bg_norm_mean", s.bg_norm_mean},
           {"norm_jitter", s.norm_jitter},       {"fg_concentration", s.fg_concentration},
           {"bg_concentration", s.bg_concentration}, {"num_classes", s.num_classes},
           {"test_fraction", s.test_fraction},   {"seed", s.seed},
           {"emit_masks", s.emit_masks}};
    j["fixed_box"] = s.fixed_box ? featstore::to_json(*s.fixed_box) : json(nullptr);
    return j;
}

featstore::DatasetManifest generate_synthetic(const SynthSpec& spec, const fs::path& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "features", ec);
    if (spec.emit_masks) fs::create_directories(out_dir / "masks", ec);
    if (ec) throw IoError("cannot create output directories under " + out_dir.string());

    Rng proto_rng(splitmix64(spec.seed));
    const auto bg_proto = random_unit(proto_rng, spec.channels);
    std::vector<std::vector<double>> fg_protos;
    for (int c = 0; c < spec.num_classes; ++c)
        fg_protos.push_back(random_unit(proto_rng, spec.channels));

    const int n = spec.image_count;
    const int n_test = static_cast<int>(std::llround(spec.test_fraction * n));
    featstore::DatasetManifest m;
    m.root = ".";
    m.root_dir = out_dir;
    m.metadata = {{"generator", "reprloc-synth"}, {"synth_spec", to_json(spec)}};
    m.entries.resize(static_cast<std::size_t>(n));

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t idx) {
        const int i = static_cast<int>(idx);
        Rng rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(i) + 1)));
        char id_buf[32];
        std::snprintf(id_buf, sizeof id_buf, "img_%05d", i);
        const std::string id = id_buf;
        const int cls = i % spec.num_classes;

        // Foreground patch range (half-open) and the matching pixel box.
        int r0, r1, c0, c1;
        BBox box;
        if (spec.fixed_box) {
            box = *spec.fixed_box;
            r0 = spec.grid_height, r1 = 0, c0 = spec.grid_width, c1 = 0;
            for (int r = 0; r < spec.grid_height; ++r)
                for (int c = 0; c < spec.grid_width; ++c) {
                    const double cx = (c + 0.5) * spec.image_width / spec.grid_width;
                    const double cy = (r + 0.5) * spec.image_height / spec.grid_height;
                    if (cx >= box.x0 && cx < box.x1 && cy >= box.y0 && cy < box.y1) {
                        r0 = std::min(r0, r), r1 = std::max(r1, r + 1);
                        c0 = std::min(c0, c), c1 = std::max(c1, c + 1);
                    }
                }
        } else {
            auto side = [&](int grid) {
                const int lo = std::max(1, static_cast<int>(std::ceil(spec.min_box_frac * grid)));
                const int hi = std::max(lo, static_cast<int>(std::floor(spec.max_box_frac * grid)));
                return rng.integer(lo, std::min(hi, grid));
            };
            const int bh = side(spec.grid_height);
            const int bw = side(spec.grid_width);
            r0 = rng.integer(0, spec.grid_height - bh);
            c0 = rng.integer(0, spec.grid_width - bw);
            r1 = r0 + bh;
            c1 = c0 + bw;
            box = {patch_edge(c0, spec.grid_width, spec.image_width),
                   patch_edge(r0, spec.grid_height, spec.image_height),
                   patch_edge(c1, spec.grid_width, spec.image_width),
                   patch_edge(r1, spec.grid_height, spec.image_height)};
        }

        featstore::FeatureMap fm(id, static_cast<std::uint32_t>(spec.channels),
                                 static_cast<std::uint32_t>(spec.grid_height),
                                 static_cast<std::uint32_t>(spec.grid_width));
        for (int r = 0; r < spec.grid_height; ++r)
            for (int c = 0; c < spec.grid_width; ++c) {
                const bool fg = r >= r0 && r < r1 && c >= c0 && c < c1;
                if (fg)
                    write_patch(fm, r, c, fg_protos[static_cast<std::size_t>(cls)],
                                spec.fg_concentration, spec.fg_norm_mean, spec.norm_jitter, rng);
                else
                    write_patch(fm, r, c, bg_proto, spec.bg_concentration, spec.bg_norm_mean,
                                spec.norm_jitter, rng);
            }

        featstore::ManifestEntry e;
        e.image_id = id;
        e.feature_path = "features/" + id + ".rpsf";
        e.feature_file = out_dir / e.feature_path;
        e.image_width = spec.image_width;
        e.image_height = spec.image_height;
        e.class_id = cls;
        e.gt_boxes = {box};
        e.split = i >= n - n_test ? featstore::Split::test : featstore::Split::train;
        featstore::write_feature_map(fm, e.feature_file);

        if (spec.emit_masks) {
            featstore::GrayImage mask{spec.image_width, spec.image_height,
                                      std::vector<std::uint8_t>(
                                          static_cast<std::size_t>(spec.image_width) *
                                          spec.image_height, 0)};
            for (int y = box.y0; y < box.y1; ++y)
                for (int x = box.x0; x < box.x1; ++x)
                    mask.pixels[static_cast<std::size_t>(y) * spec.image_width + x] = 255;
            e.gt_mask_path = "masks/" + id + ".pgm";
            e.gt_mask_file = out_dir / *e.gt_mask_path;
            featstore::write_pgm(mask, *e.gt_mask_file);
        }
        m.entries[idx] = std::move(e);
    });

    const fs::path manifest_path = out_dir / "manifest.json";
    featstore::save_manifest(m, manifest_path);
    return featstore::load_manifest(manifest_path);
}

}  // namespace reprloc::synth
