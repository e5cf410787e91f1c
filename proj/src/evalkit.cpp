#include "reprloc/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "reprloc/error.hpp"
#include "reprloc/fsutil.hpp"
#include "reprloc/parallel.hpp"

namespace reprloc::evalkit {

using nlohmann::json;
using representer::ForegroundPredictor;

double iou(const BBox& a, const BBox& b) {
    const long long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const long long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const long long inter = iw * ih;
    const long long uni = a.area() + b.area() - inter;
    if (uni <= 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

double best_iou(const std::optional<BBox>& box, const std::vector<BBox>& gts) {
    if (!box) return 0.0;
    double best = 0.0;
    for (const auto& g : gts) best = std::max(best, iou(*box, g));
    return best;
}

void check_pairing(std::span<const BoxResult> results, std::span<const GroundTruth> gts) {
    if (results.size() != gts.size())
        throw DataError("result/GT mismatch: " + std::to_string(results.size()) + " results, " +
                        std::to_string(gts.size()) + " ground truths");
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (results[i].image_id != gts[i].image_id)
            throw DataError("result/GT id mismatch at position " + std::to_string(i) + ": '" +
                            results[i].image_id + "' vs '" + gts[i].image_id + "'");
        if (gts[i].boxes.empty())
            throw DataError("image '" + gts[i].image_id + "' has no ground-truth box");
    }
}

void check_maps(std::span<const Grid> maps, std::span<const Mask> gts) {
    if (maps.size() != gts.size()) throw DataError("score map / GT mask count mismatch");
    for (std::size_t i = 0; i < maps.size(); ++i)
        if (maps[i].height != gts[i].height || maps[i].width != gts[i].width)
            throw DataError("score map " + std::to_string(i) + " is " +
                            std::to_string(maps[i].width) + "x" + std::to_string(maps[i].height) +
                            ", GT mask is " + std::to_string(gts[i].width) + "x" +
                            std::to_string(gts[i].height));
}

}  // namespace

ClassPredictions parse_class_predictions(const json& j) {
    if (!j.is_object()) throw FormatError("class predictions must be an object {image_id: [ids]}");
    ClassPredictions out;
    for (const auto& [id, list] : j.items()) {
        if (!list.is_array() || list.empty())
            throw FormatError("class predictions for '" + id + "' must be a non-empty array");
        std::vector<int> ids;
        std::set<int> seen;
        for (const auto& v : list) {
            if (!v.is_number_integer())
                throw FormatError("class predictions for '" + id + "' must be integers");
            int c = v.get<int>();
            if (!seen.insert(c).second)
                throw FormatError("class predictions for '" + id + "' repeat class " +
                                  std::to_string(c));
            ids.push_back(c);
        }
        out.emplace(id, std::move(ids));
    }
    return out;
}

ClassPredictions load_class_predictions(const std::filesystem::path& path) {
    try {
        return parse_class_predictions(json::parse(read_file_bytes(path)));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

LocSummary gt_known_loc(std::span<const BoxResult> results, std::span<const GroundTruth> gts,
                        double delta) {
    check_pairing(results, gts);
    LocSummary s;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const double b = best_iou(results[i].chosen, gts[i].boxes);
        const bool hit = results[i].chosen && b > delta;
        s.best_iou.push_back(b);
        s.hit.push_back(hit);
        hits += hit;
    }
    s.value = results.empty() ? 0.0 : static_cast<double>(hits) / results.size();
    return s;
}

LocSummary top_k_loc(std::span<const BoxResult> results, std::span<const GroundTruth> gts,
                     const ClassPredictions& preds, int k, double delta) {
    if (k < 1) throw UsageError("k must be at least 1");
    LocSummary s = gt_known_loc(results, gts, delta);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        auto it = preds.find(gts[i].image_id);
        if (it == preds.end())
            throw DataError("missing class prediction for image '" + gts[i].image_id + "'");
        if (!gts[i].class_id)
            throw DataError("image '" + gts[i].image_id + "' has no class_id for Top-k Loc");
        if (it->second.size() < static_cast<std::size_t>(k))
            throw DataError("image '" + gts[i].image_id + "' has fewer than " +
                            std::to_string(k) + " class predictions");
        const auto end = it->second.begin() + k;
        const bool cls_ok = std::find(it->second.begin(), end, *gts[i].class_id) != end;
        s.hit[i] = s.hit[i] && cls_ok;
        hits += s.hit[i];
    }
    s.value = results.empty() ? 0.0 : static_cast<double>(hits) / results.size();
    return s;
}

MaxBoxAccResult max_box_acc_v2(std::span<const Grid> maps, std::span<const std::vector<BBox>> gts,
                               std::span<const double> thetas, std::span<const double> deltas,
                               int connectivity) {
    if (thetas.empty()) throw UsageError("theta grid is empty");
    if (deltas.empty()) throw UsageError("delta set is empty");
    if (maps.size() != gts.size()) throw DataError("score map / GT box count mismatch");
    if (maps.empty()) throw DataError("no images to evaluate");

    // best[i][t]: best IoU of any component box of image i at thetas[t].
    std::vector<std::vector<double>> best(maps.size(), std::vector<double>(thetas.size(), 0.0));
    parallel_for(maps.size(), [&](std::size_t i) {
        for (std::size_t t = 0; t < thetas.size(); ++t) {
            auto boxes = localizer::boxes_from_mask(localizer::threshold_mask(maps[i], thetas[t]),
                                                    connectivity, localizer::BoxPolicy::all);
            double b = 0.0;
            for (const auto& box : boxes)
                for (const auto& g : gts[i]) b = std::max(b, iou(box, g));
            best[i][t] = b;
        }
    });

    MaxBoxAccResult r;
    double total = 0.0;
    for (double delta : deltas) {
        DeltaAccuracy da{delta, -1.0, thetas.front()};
        for (std::size_t t = 0; t < thetas.size(); ++t) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < maps.size(); ++i) hits += best[i][t] > delta;
            const double acc = static_cast<double>(hits) / maps.size();
            if (acc > da.accuracy) {
                da.accuracy = acc;
                da.best_theta = thetas[t];
            }
        }
        total += da.accuracy;
        r.per_delta.push_back(da);
    }
    r.value = total / static_cast<double>(deltas.size());
    return r;
}

double pxap(std::span<const Grid> maps, std::span<const Mask> gts) {
    check_maps(maps, gts);
    std::vector<std::pair<double, bool>> px;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        for (std::size_t p = 0; p < maps[i].values.size(); ++p) {
            const bool pos = gts[i].bits[p] != 0;
            px.emplace_back(maps[i].values[p], pos);
            positives += pos;
        }
    }
    if (positives == 0) throw DataError("PxAP: no positive ground-truth pixel in the dataset");
    std::sort(px.begin(), px.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < px.size();) {
        const double score = px[i].first;
        while (i < px.size() && px[i].first == score) {
            if (px[i].second) ++tp;
            else ++fp;
            ++i;
        }
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    return ap;
}

PiouResult piou(std::span<const Grid> maps, std::span<const Mask> gts,
                std::span<const double> thetas, PiouMode mode) {
    if (thetas.empty()) throw UsageError("theta grid is empty");
    check_maps(maps, gts);
    if (maps.empty()) throw DataError("no images to evaluate");

    PiouResult r;
    r.value = -1.0;
    for (double theta : thetas) {
        double score = 0.0;
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            std::size_t itp = 0, ifp = 0, ifn = 0;
            for (std::size_t p = 0; p < maps[i].values.size(); ++p) {
                const bool pred = maps[i].values[p] >= theta;
                const bool gt = gts[i].bits[p] != 0;
                itp += pred && gt;
                ifp += pred && !gt;
                ifn += !pred && gt;
            }
            tp += itp;
            fp += ifp;
            fn += ifn;
            if (mode == PiouMode::per_image_mean) {
                const std::size_t uni = itp + ifp + ifn;
                score += uni == 0 ? 1.0 : static_cast<double>(itp) / static_cast<double>(uni);
            }
        }
        if (mode == PiouMode::global) {
            const std::size_t uni = tp + fp + fn;
            score = uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
        } else {
            score /= static_cast<double>(maps.size());
        }
        r.per_theta.push_back(score);
        if (score > r.value) {
            r.value = score;
            r.best_theta = theta;
        }
    }
    return r;
}

std::vector<double> linspace(double lo, double hi, int n) {
    if (n < 1) throw UsageError("grid needs at least one point");
    if (n == 1) return {lo};
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
    out.back() = hi;
    return out;
}

std::vector<double> parse_grid(const std::string& spec) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.size() != 3) throw UsageError("grid must be lo:hi:n, got '" + spec + "'");
    try {
        std::size_t used = 0;
        const double lo = std::stod(parts[0]);
        const double hi = std::stod(parts[1]);
        const int n = std::stoi(parts[2], &used);
        if (used != parts[2].size()) throw std::invalid_argument("n");
        if (!(hi >= lo)) throw UsageError("grid must be ascending: '" + spec + "'");
        return linspace(lo, hi, n);
    } catch (const std::logic_error&) {
        throw UsageError("grid must be lo:hi:n, got '" + spec + "'");
    }
}

Mask mask_from_pgm(const featstore::GrayImage& img) {
    Mask m{img.height, img.width, std::vector<std::uint8_t>(img.pixels.size())};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) m.bits[i] = img.pixels[i] != 0;
    return m;
}

Metric parse_metric(const std::string& s) {
    if (s == "gtknown") return Metric::gtknown;
    if (s == "top1") return Metric::top1;
    if (s == "top5") return Metric::top5;
    if (s == "pxap") return Metric::pxap;
    if (s == "piou") return Metric::piou;
    if (s == "maxboxaccv2") return Metric::maxboxaccv2;
    throw UsageError("unknown metric '" + s + "'");
}

std::string to_string(Metric m) {
    switch (m) {
        case Metric::gtknown: return "gtknown";
        case Metric::top1: return "top1";
        case Metric::top5: return "top5";
        case Metric::pxap: return "pxap";
        case Metric::piou: return "piou";
        case Metric::maxboxaccv2: return "maxboxaccv2";
    }
    return "gtknown";
}

json to_json(const EvalReport& r) {
    return json{{"metric", r.metric},
                {"dataset_digest", r.dataset_digest},
                {"parameters", r.parameters},
                {"value", r.value},
                {"details", r.details}};
}

const ForegroundPredictor& select_predictor(std::span<const ForegroundPredictor> predictors,
                                            const featstore::ManifestEntry& entry) {
    if (predictors.empty()) throw DataError("no predictors supplied");
    if (predictors.size() == 1 && !predictors.front().class_id) return predictors.front();
    if (!entry.class_id)
        throw DataError("classwise predictors need a class_id on entry '" + entry.image_id + "'");
    for (const auto& p : predictors)
        if (p.class_id && *p.class_id == *entry.class_id) return p;
    throw DataError("no predictor for class " + std::to_string(*entry.class_id) + " (entry '" +
                    entry.image_id + "')");
}

namespace {

bool needs_boxes(Metric m) {
    return m == Metric::gtknown || m == Metric::top1 || m == Metric::top5 ||
           m == Metric::maxboxaccv2;
}

bool needs_masks(Metric m) { return m == Metric::pxap || m == Metric::piou; }

struct PerImage {
    std::optional<BBox> chosen;
    bool degenerate = false;
    Grid score;
    Mask gt_mask;
};

std::vector<const featstore::ManifestEntry*> eval_entries(const featstore::DatasetManifest& m,
                                                          const EvalSpec& spec) {
    std::vector<const featstore::ManifestEntry*> out;
    for (const auto& e : m.entries)
        if (!spec.split || e.split == *spec.split) out.push_back(&e);
    if (out.empty())
        throw DataError("no manifest entries in split '" +
                        (spec.split ? featstore::to_string(*spec.split) : std::string("all")) +
                        "'");
    return out;
}

void check_ground_truth(std::span<const featstore::ManifestEntry* const> entries,
                        const EvalSpec& spec) {
    for (const auto* e : entries) {
        if (needs_boxes(spec.metric) && e->gt_boxes.empty())
            throw DataError("metric " + to_string(spec.metric) +
                            " needs ground-truth boxes; entry '" + e->image_id + "' has none");
        if (needs_masks(spec.metric) && !e->gt_mask_file)
            throw DataError("metric " + to_string(spec.metric) +
                            " needs ground-truth masks; entry '" + e->image_id + "' has none");
    }
    if (spec.metric == Metric::top1 || spec.metric == Metric::top5) {
        if (!spec.predictions)
            throw DataError("metric " + to_string(spec.metric) + " needs class predictions");
    }
}

json box_json(const std::optional<BBox>& b) {
    return b ? featstore::to_json(*b) : json(nullptr);
}

}  // namespace

EvalReport evaluate(const featstore::DatasetManifest& manifest,
                    std::span<const ForegroundPredictor> predictors, const EvalSpec& spec) {
    const auto entries = eval_entries(manifest, spec);
    check_ground_truth(entries, spec);
    if (spec.theta_grid.empty()) throw UsageError("theta grid is empty");

    const bool keep_maps = spec.metric == Metric::maxboxaccv2 || needs_masks(spec.metric);
    std::vector<PerImage> per(entries.size());
    parallel_for(entries.size(), [&](std::size_t i) {
        const auto& e = *entries[i];
        const auto& pred = select_predictor(predictors, e);
        auto fm = featstore::read_feature_map(e.feature_file);
        fm.image_id = e.image_id;
        auto loc = localizer::localize(fm, pred, e.image_width, e.image_height, spec.localize);
        per[i].chosen = loc.chosen_box;
        per[i].degenerate = loc.degenerate;
        if (keep_maps) per[i].score = std::move(loc.score_map);
        if (needs_masks(spec.metric)) {
            per[i].gt_mask = mask_from_pgm(featstore::read_pgm(*e.gt_mask_file));
            if (per[i].gt_mask.width != e.image_width || per[i].gt_mask.height != e.image_height)
                throw DataError("GT mask of '" + e.image_id + "' does not match image size");
        }
    });

    EvalReport r;
    r.metric = to_string(spec.metric);
    r.dataset_digest = manifest.digest;
    json taus = json::array();
    for (const auto& p : predictors) taus.push_back(p.tau);
    r.parameters = {{"delta", spec.delta},
                    {"theta_grid", spec.theta_grid},
                    {"threshold", spec.localize.threshold},
                    {"connectivity", spec.localize.connectivity},
                    {"policy", localizer::to_string(spec.localize.policy)},
                    {"split", spec.split ? featstore::to_string(*spec.split) : "all"},
                    {"taus", taus},
                    {"constant_C", predictors.empty() ? 1.0 : predictors.front().constant_C},
                    {"image_count", entries.size()}};

    json rows = json::array();
    switch (spec.metric) {
        case Metric::gtknown:
        case Metric::top1:
        case Metric::top5: {
            std::vector<BoxResult> results;
            std::vector<GroundTruth> gts;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                results.push_back({entries[i]->image_id, per[i].chosen});
                gts.push_back({entries[i]->image_id, entries[i]->gt_boxes, entries[i]->class_id});
            }
            LocSummary s = spec.metric == Metric::gtknown
                               ? gt_known_loc(results, gts, spec.delta)
                               : top_k_loc(results, gts, *spec.predictions,
                                           spec.metric == Metric::top1 ? 1 : 5, spec.delta);
            r.value = s.value;
            for (std::size_t i = 0; i < entries.size(); ++i)
                rows.push_back({{"image_id", entries[i]->image_id},
                                {"chosen_box", box_json(per[i].chosen)},
                                {"best_iou", s.best_iou[i]},
                                {"hit", static_cast<bool>(s.hit[i])},
                                {"degenerate", per[i].degenerate}});
            break;
        }
        case Metric::maxboxaccv2: {
            std::vector<Grid> maps;
            std::vector<std::vector<BBox>> gts;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                maps.push_back(std::move(per[i].score));
                gts.push_back(entries[i]->gt_boxes);
            }
            auto res = max_box_acc_v2(maps, gts, spec.theta_grid, kDefaultDeltas,
                                      spec.localize.connectivity);
            r.value = res.value;
            json table = json::array();
            for (const auto& d : res.per_delta)
                table.push_back(
                    {{"delta", d.delta}, {"accuracy", d.accuracy}, {"best_theta", d.best_theta}});
            r.details["per_delta"] = table;
            r.parameters["deltas"] = kDefaultDeltas;
            for (std::size_t i = 0; i < entries.size(); ++i)
                rows.push_back({{"image_id", entries[i]->image_id},
                                {"degenerate", per[i].degenerate}});
            break;
        }
        case Metric::pxap:
        case Metric::piou: {
            std::vector<Grid> maps;
            std::vector<Mask> masks;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                maps.push_back(std::move(per[i].score));
                masks.push_back(std::move(per[i].gt_mask));
            }
            if (spec.metric == Metric::pxap) {
                r.value = pxap(maps, masks);
            } else {
                auto g = piou(maps, masks, spec.theta_grid, PiouMode::global);
                auto m = piou(maps, masks, spec.theta_grid, PiouMode::per_image_mean);
                const auto& chosen = spec.piou_mode == PiouMode::global ? g : m;
                r.value = chosen.value;
                r.parameters["piou_mode"] =
                    spec.piou_mode == PiouMode::global ? "global" : "per_image_mean";
                r.details["best_theta"] = chosen.best_theta;
                r.details["piou_global"] = g.value;
                r.details["piou_global_best_theta"] = g.best_theta;
                r.details["piou_per_image_mean"] = m.value;
                r.details["piou_per_image_mean_best_theta"] = m.best_theta;
            }
            for (std::size_t i = 0; i < entries.size(); ++i)
                rows.push_back({{"image_id", entries[i]->image_id},
                                {"degenerate", per[i].degenerate}});
            break;
        }
    }
    r.details["per_image"] = rows;
    return r;
}

EvalReport evaluate_tau_sweep(const featstore::DatasetManifest& manifest,
                              std::span<const ForegroundPredictor> predictors,
                              const EvalSpec& spec, std::span<const double> taus) {
    if (taus.empty()) throw UsageError("tau sweep is empty");
    EvalReport base = evaluate(manifest, predictors, spec);
    json sweep = json::array();
    double sweep_max = -1.0, sweep_min = 2.0;
    for (double tau : taus) {
        std::vector<ForegroundPredictor> swept;
        for (const auto& p : predictors) swept.push_back(representer::with_tau(p, tau));
        const double v = evaluate(manifest, swept, spec).value;
        sweep.push_back({{"tau", tau}, {"value", v}});
        sweep_max = std::max(sweep_max, v);
        sweep_min = std::min(sweep_min, v);
    }
    EvalReport r;
    r.metric = base.metric;
    r.dataset_digest = base.dataset_digest;
    r.parameters = base.parameters;
    r.parameters["tau_sweep"] = std::vector<double>(taus.begin(), taus.end());
    r.value = base.value;
    r.details = {{"tau_sweep", sweep},
                 {"default_value", base.value},
                 {"default_taus", base.parameters["taus"]},
                 {"sweep_max", sweep_max},
                 {"sweep_min", sweep_min},
                 {"gap_to_sweep_max", sweep_max - base.value}};
    return r;
}

void write_details_csv(const EvalReport& r, const std::filesystem::path& path) {
    std::ostringstream out;
    out << "image_id,degenerate,best_iou,hit,x0,y0,x1,y1\n";
    if (r.details.contains("per_image")) {
        for (const auto& row : r.details["per_image"]) {
            out << row["image_id"].get<std::string>() << ','
                << (row.value("degenerate", false) ? 1 : 0) << ',';
            if (row.contains("best_iou")) out << row["best_iou"].get<double>();
            out << ',';
            if (row.contains("hit")) out << (row["hit"].get<bool>() ? 1 : 0);
            const auto box = row.value("chosen_box", json(nullptr));
            if (box.is_array())
                out << ',' << box[0] << ',' << box[1] << ',' << box[2] << ',' << box[3] << '\n';
            else
                out << ",,,,\n";
        }
    }
    atomic_write(path, out.str());
}

}  // namespace reprloc::evalkit
