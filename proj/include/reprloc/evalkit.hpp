#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprloc/featstore.hpp"
#include "reprloc/localizer.hpp"
#include "reprloc/representer.hpp"

namespace reprloc::evalkit {

using featstore::BBox;
using localizer::Grid;
using localizer::Mask;

// Half-open integer areas; 0 for disjoint boxes.
double iou(const BBox& a, const BBox& b);

// Ranked class ids per image (rank 1 first).
using ClassPredictions = std::map<std::string, std::vector<int>>;
ClassPredictions parse_class_predictions(const nlohmann::json& j);
ClassPredictions load_class_predictions(const std::filesystem::path& path);

struct BoxResult {
    std::string image_id;
    std::optional<BBox> chosen;  // nullopt counts as a miss
};

struct GroundTruth {
    std::string image_id;
    std::vector<BBox> boxes;
    std::optional<int> class_id;
};

struct LocSummary {
    double value = 0.0;
    std::vector<double> best_iou;  // per image, 0 for misses
    std::vector<bool> hit;
};

// Fraction of images whose chosen box has IoU > delta with some GT box.
LocSummary gt_known_loc(std::span<const BoxResult> results, std::span<const GroundTruth> gts,
                        double delta = 0.5);

// GT-Known hit and true class within the first k predictions.
LocSummary top_k_loc(std::span<const BoxResult> results, std::span<const GroundTruth> gts,
                     const ClassPredictions& preds, int k, double delta = 0.5);

struct DeltaAccuracy {
    double delta = 0.0;
    double accuracy = 0.0;
    double best_theta = 0.0;
};

struct MaxBoxAccResult {
    double value = 0.0;
    std::vector<DeltaAccuracy> per_delta;
};

inline const std::vector<double> kDefaultDeltas = {0.3, 0.5, 0.7};

// Score maps are at image resolution in [0, 1]. For every θ the candidate
// boxes are all connected components of (map >= θ); an image is a hit at δ
// when some candidate has IoU > δ with some GT box.
MaxBoxAccResult max_box_acc_v2(std::span<const Grid> maps,
                               std::span<const std::vector<BBox>> gts,
                               std::span<const double> thetas,
                               std::span<const double> deltas = kDefaultDeltas,
                               int connectivity = 4);

// Area under the dataset-global pixel precision-recall curve, rectangle rule
// over distinct score values.
double pxap(std::span<const Grid> maps, std::span<const Mask> gts);

enum class PiouMode { global, per_image_mean };

struct PiouResult {
    double value = 0.0;
    double best_theta = 0.0;
    std::vector<double> per_theta;
};

PiouResult piou(std::span<const Grid> maps, std::span<const Mask> gts,
                std::span<const double> thetas, PiouMode mode = PiouMode::global);

// n evenly spaced points from lo to hi inclusive.
std::vector<double> linspace(double lo, double hi, int n);
// Parses "lo:hi:n".
std::vector<double> parse_grid(const std::string& spec);

Mask mask_from_pgm(const featstore::GrayImage& img);

enum class Metric { gtknown, top1, top5, pxap, piou, maxboxaccv2 };
Metric parse_metric(const std::string& s);
std::string to_string(Metric m);

struct EvalSpec {
    Metric metric = Metric::gtknown;
    double delta = 0.5;
    std::vector<double> theta_grid = linspace(0.0, 1.0, 101);
    localizer::LocalizeParams localize;
    std::optional<ClassPredictions> predictions;
    std::optional<featstore::Split> split = featstore::Split::test;  // nullopt = every entry
    PiouMode piou_mode = PiouMode::global;
};

struct EvalReport {
    std::string metric;
    std::string dataset_digest;
    nlohmann::json parameters;
    double value = 0.0;
    nlohmann::json details;  // metric-specific extras and per-image rows
};

nlohmann::json to_json(const EvalReport& r);

// Predictor for an entry: the class-agnostic one, or the entry's class.
const representer::ForegroundPredictor& select_predictor(
    std::span<const representer::ForegroundPredictor> predictors,
    const featstore::ManifestEntry& entry);

EvalReport evaluate(const featstore::DatasetManifest& manifest,
                    std::span<const representer::ForegroundPredictor> predictors,
                    const EvalSpec& spec);

// Re-finalizes every predictor at each τ and evaluates; the report lists the
// metric per τ and the value at the predictors' own τ.
EvalReport evaluate_tau_sweep(const featstore::DatasetManifest& manifest,
                              std::span<const representer::ForegroundPredictor> predictors,
                              const EvalSpec& spec, std::span<const double> taus);

// Per-image CSV of the report's "per_image" rows.
void write_details_csv(const EvalReport& r, const std::filesystem::path& path);

}  // namespace reprloc::evalkit
