#include "reprloc/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "reprloc/error.hpp"

namespace reprloc::localizer {

Normalized minmax_normalize(const Grid& g) {
    if (g.values.empty()) throw InvariantError("minmax_normalize: empty grid");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (double x : g.values) {
        if (!std::isfinite(x)) throw InvariantError("minmax_normalize: non-finite value");
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Normalized out{Grid(g.height, g.width, 0.0), hi == lo};
    if (out.degenerate) return out;
    const double range = hi - lo;
    for (std::size_t i = 0; i < g.values.size(); ++i) {
        // Pin the extremes so min is exactly 0 and max exactly 1.
        const double x = g.values[i];
        out.grid.values[i] = x == hi ? 1.0 : (x - lo) / range;
    }
    return out;
}

ActivationMap activation_map(const featstore::FeatureMap& fm,
                             const representer::ForegroundPredictor& predictor) {
    if (fm.channels != predictor.dim())
        throw DimensionError("feature map '" + fm.image_id + "' has C=" +
                             std::to_string(fm.channels) + ", predictor dim=" +
                             std::to_string(predictor.dim()));
    ActivationMap am;
    am.image_id = fm.image_id;
    am.raw = Grid(static_cast<int>(fm.height), static_cast<int>(fm.width), 0.0);
    for (std::size_t i = 0; i < fm.patch_count(); ++i) {
        auto unit = representer::normalize_feature(fm.patch(i));
        if (!unit) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < unit->size(); ++c) s += predictor.w[c] * (*unit)[c];
        am.raw.values[i] = s;
    }
    auto n = minmax_normalize(am.raw);
    am.normalized = std::move(n.grid);
    am.degenerate = n.degenerate;
    return am;
}

Grid upsample_bilinear(const Grid& g, int target_width, int target_height) {
    if (g.height < 1 || g.width < 1) throw InvariantError("upsample_bilinear: empty source grid");
    if (target_width < 1 || target_height < 1)
        throw InvariantError("upsample_bilinear: target size must be positive");
    if (target_width == g.width && target_height == g.height) return g;

    // Precompute per-axis source indices and weights.
    struct Tap {
        int lo, hi;
        double frac;
    };
    auto taps = [](int src, int dst) {
        std::vector<Tap> t(static_cast<std::size_t>(dst));
        const double scale = static_cast<double>(src) / dst;
        for (int x = 0; x < dst; ++x) {
            double s = (x + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(src - 1));
            int lo = static_cast<int>(std::floor(s));
            int hi = std::min(lo + 1, src - 1);
            t[static_cast<std::size_t>(x)] = {lo, hi, s - lo};
        }
        return t;
    };
    const auto tx = taps(g.width, target_width);
    const auto ty = taps(g.height, target_height);

    Grid out(target_height, target_width);
    for (int y = 0; y < target_height; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < target_width; ++x) {
            const Tap& b = tx[static_cast<std::size_t>(x)];
            const double top = g.at(a.lo, b.lo) + (g.at(a.lo, b.hi) - g.at(a.lo, b.lo)) * b.frac;
            const double bot = g.at(a.hi, b.lo) + (g.at(a.hi, b.hi) - g.at(a.hi, b.lo)) * b.frac;
            double v = top + (bot - top) * a.frac;
            // Convex combination; clamp away rounding excursions.
            const double lo = std::min({g.at(a.lo, b.lo), g.at(a.lo, b.hi), g.at(a.hi, b.lo),
                                        g.at(a.hi, b.hi)});
            const double hi = std::max({g.at(a.lo, b.lo), g.at(a.lo, b.hi), g.at(a.hi, b.lo),
                                        g.at(a.hi, b.hi)});
            out.at(y, x) = std::clamp(v, lo, hi);
        }
    }
    return out;
}

Mask threshold_mask(const Grid& g, double theta) {
    Mask m{g.height, g.width, std::vector<std::uint8_t>(g.values.size(), 0)};
    for (std::size_t i = 0; i < g.values.size(); ++i) m.bits[i] = g.values[i] >= theta ? 1 : 0;
    return m;
}

BoxPolicy parse_policy(const std::string& s) {
    if (s == "largest") return BoxPolicy::largest;
    if (s == "all") return BoxPolicy::all;
    throw UsageError("policy must be 'largest' or 'all', got '" + s + "'");
}

std::string to_string(BoxPolicy p) { return p == BoxPolicy::largest ? "largest" : "all"; }

std::vector<BBox> boxes_from_mask(const Mask& mask, int connectivity, BoxPolicy policy) {
    if (connectivity != 4 && connectivity != 8)
        throw UsageError("connectivity must be 4 or 8");
    const int h = mask.height, w = mask.width;
    std::vector<std::uint8_t> seen(mask.bits.size(), 0);
    std::vector<int> stack;

    struct Component {
        BBox box;
        long long pixels;
    };
    std::vector<Component> comps;

    static constexpr int kDr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
    static constexpr int kDc[8] = {0, 0, -1, 1, -1, 1, -1, 1};

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t start = static_cast<std::size_t>(r) * w + c;
            if (!mask.bits[start] || seen[start]) continue;
            Component comp{{c, r, c + 1, r + 1}, 0};
            seen[start] = 1;
            stack.assign(1, static_cast<int>(start));
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                const int pr = p / w, pc = p % w;
                ++comp.pixels;
                comp.box.x0 = std::min(comp.box.x0, pc);
                comp.box.y0 = std::min(comp.box.y0, pr);
                comp.box.x1 = std::max(comp.box.x1, pc + 1);
                comp.box.y1 = std::max(comp.box.y1, pr + 1);
                for (int d = 0; d < connectivity; ++d) {
                    const int nr = pr + kDr[d], nc = pc + kDc[d];
                    if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                    const std::size_t q = static_cast<std::size_t>(nr) * w + nc;
                    if (mask.bits[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(static_cast<int>(q));
                    }
                }
            }
            comps.push_back(comp);
        }
    }
    if (comps.empty()) return {};

    if (policy == BoxPolicy::largest) {
        const Component* best = &comps.front();
        for (const auto& c : comps) {
            if (c.pixels > best->pixels ||
                (c.pixels == best->pixels &&
                 std::tie(c.box.x0, c.box.y0) < std::tie(best->box.x0, best->box.y0)))
                best = &c;
        }
        return {best->box};
    }

    std::vector<BBox> boxes;
    boxes.reserve(comps.size());
    for (const auto& c : comps) boxes.push_back(c.box);
    std::sort(boxes.begin(), boxes.end(), [](const BBox& a, const BBox& b) {
        if (a.area() != b.area()) return a.area() > b.area();
        return a < b;
    });
    return boxes;
}

Grid score_map(const ActivationMap& am, int image_width, int image_height) {
    if (am.degenerate) return Grid(image_height, image_width, 0.0);
    return upsample_bilinear(am.normalized, image_width, image_height);
}

LocalizationResult localize(const featstore::FeatureMap& fm,
                            const representer::ForegroundPredictor& predictor,
                            int image_width, int image_height, const LocalizeParams& params) {
    if (!(params.threshold >= 0.0 && params.threshold <= 1.0))
        throw UsageError("threshold must lie in [0, 1]");
    LocalizationResult res;
    res.image_id = fm.image_id;
    res.threshold = params.threshold;
    res.activation = activation_map(fm, predictor);
    res.degenerate = res.activation.degenerate;
    res.score_map = score_map(res.activation, image_width, image_height);
    if (res.degenerate) {
        res.mask = Mask{image_height, image_width,
                        std::vector<std::uint8_t>(res.score_map.values.size(), 0)};
        return res;
    }
    res.mask = threshold_mask(res.score_map, params.threshold);
    res.boxes = boxes_from_mask(res.mask, params.connectivity, params.policy);
    if (!res.boxes.empty()) {
        // The chosen box is the largest component's box under either policy.
        res.chosen_box = params.policy == BoxPolicy::largest
                             ? res.boxes.front()
                             : boxes_from_mask(res.mask, params.connectivity, BoxPolicy::largest)
                                   .front();
    }
    return res;
}

}  // namespace reprloc::localizer

namespace reprloc::localizer {

nlohmann::json to_json(const LocalizationResult& r) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : r.boxes) boxes.push_back(featstore::to_json(b));
    return {{"image_id", r.image_id},
            {"threshold", r.threshold},
            {"degenerate", r.degenerate},
            {"height", r.activation.normalized.height},
            {"width", r.activation.normalized.width},
            {"normalized", r.activation.normalized.values},
            {"boxes", boxes},
            {"chosen_box", r.chosen_box ? featstore::to_json(*r.chosen_box) : nlohmann::json()}};
}

}  // namespace reprloc::localizer
