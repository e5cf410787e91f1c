#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprloc/featstore.hpp"

namespace reprloc::representer {

using featstore::DatasetManifest;
using featstore::FeatureMap;
using featstore::ManifestEntry;

// f / ‖f‖, or nullopt when ‖f‖ == 0. Throws InvariantError on non-finite input.
std::optional<std::vector<double>> normalize_feature(std::span<const double> f);

// Sufficient statistics of a feature dataset: v = Σ f and u = Σ f̂ over all
// patches, accumulated in double. With compensation enabled, each component
// carries a Neumaier running error term.
class Accumulator {
public:
    explicit Accumulator(std::size_t dim, bool compensated = false);

    std::size_t dim() const { return v_.size(); }
    bool compensated() const { return !v_err_.empty(); }

    std::vector<double> v() const;
    std::vector<double> u() const;
    std::uint64_t patch_count() const { return patch_count_; }
    std::uint64_t image_count() const { return image_count_; }
    std::uint64_t skipped_zero_vectors() const { return skipped_zero_; }

    // Adds every patch of fm. Zero-norm patches count toward patch_count and
    // skipped_zero_vectors but add nothing to u.
    void accumulate(const FeatureMap& fm);
    void add_patch(std::span<const double> f);
    void merge(const Accumulator& other);

    // Rebuilds an accumulator from stored totals (predictor files).
    static Accumulator from_totals(std::vector<double> v, std::vector<double> u,
                                   std::uint64_t patch_count, std::uint64_t image_count,
                                   std::uint64_t skipped_zero_vectors);

private:
    void add(std::vector<double>& sum, std::vector<double>& err, std::size_t c, double x);

    std::vector<double> v_, u_;
    std::vector<double> v_err_, u_err_;
    std::uint64_t patch_count_ = 0;
    std::uint64_t image_count_ = 0;
    std::uint64_t skipped_zero_ = 0;
};

Accumulator accumulate(Accumulator acc, const FeatureMap& fm);
Accumulator merge(const Accumulator& a, const Accumulator& b);

// τ = ‖v‖ / ‖u‖. Throws DegenerateDatasetError when u is the zero vector.
double finalize_tau(const Accumulator& acc);

// τ² as the ratio of full Gram sums ΣᵢΣⱼ fᵢᵀfⱼ / ΣᵢΣⱼ f̂ᵢᵀf̂ⱼ, evaluated pairwise
// in O(N²). Verification route for finalize_tau; zero vectors are skipped in the
// denominator since f̂ is undefined for them.
double tau_gram_oracle(const std::vector<std::vector<double>>& features);

struct Provenance {
    std::string manifest_digest;
    double sample_rate = 1.0;
    std::uint64_t seed = 0;
    std::uint64_t image_count = 0;
    std::uint64_t skipped_zero_vectors = 0;
    std::string tau_mode = "global";  // global | per_class | override

    bool operator==(const Provenance&) const = default;
};

struct AccumulatorTotals {
    std::vector<double> v;
    std::vector<double> u;
    std::uint64_t patch_count = 0;

    bool operator==(const AccumulatorTotals&) const = default;
};

// w = (v − τ·u) / constant_C.
struct ForegroundPredictor {
    std::vector<double> w;
    double tau = 0.0;
    double constant_C = 1.0;
    std::optional<int> class_id;
    Provenance provenance;
    // v and u the predictor was finalized from; lets eval re-finalize at other τ.
    std::optional<AccumulatorTotals> totals;

    std::size_t dim() const { return w.size(); }
    bool operator==(const ForegroundPredictor&) const = default;
};

ForegroundPredictor finalize_predictor(const Accumulator& acc, double constant_C = 1.0,
                                       std::optional<double> tau_override = std::nullopt);

// Same predictor re-finalized at a different τ. Requires stored totals.
ForegroundPredictor with_tau(const ForegroundPredictor& p, double tau);

struct FitOptions {
    bool classwise = false;
    double sample_rate = 1.0;
    std::uint64_t seed = 0;
    double constant_C = 1.0;
    bool global_tau = false;  // classwise only: use the pooled τ for every class
    std::optional<double> tau_override;
    bool compensated = false;
};

// Deterministic subset of the train split: all entries when rate == 1,
// otherwise max(1, round(rate·N)) entries chosen by a seeded shuffle and
// returned in manifest order.
std::vector<const ManifestEntry*> sample_train_entries(const DatasetManifest& m, double rate,
                                                       std::uint64_t seed);

// Streams the listed feature files into one accumulator. Files are processed in
// fixed-size chunks (in parallel) and the chunk accumulators are folded in list
// order, so the result does not depend on the worker count.
Accumulator accumulate_entries(std::span<const ManifestEntry* const> entries,
                               bool compensated = false);

std::vector<ForegroundPredictor> fit(const DatasetManifest& m, const FitOptions& opts);

struct ImportanceMap {
    std::string image_id;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<double> alpha;  // row-major
    double tau = 0.0;
};

// α_i = (‖f_i‖ − τ) / constant_C per patch.
ImportanceMap importance_map(const FeatureMap& fm, double tau, double constant_C = 1.0);

enum class Polarity { excitatory, inhibitory, both };
Polarity parse_polarity(const std::string& s);
std::string to_string(Polarity p);

struct RepresenterEntry {
    std::string image_id;
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    double alpha = 0.0;
    double similarity = 0.0;
    double value = 0.0;  // alpha * similarity

    bool operator==(const RepresenterEntry&) const = default;
};

struct RepresenterResult {
    std::string query_image;
    std::uint32_t query_row = 0;
    std::uint32_t query_col = 0;
    Polarity polarity = Polarity::both;
    std::vector<RepresenterEntry> excitatory;  // descending by value
    std::vector<RepresenterEntry> inhibitory;  // ascending by value
    double full_sum = 0.0;                     // Σ over every scanned patch
    std::uint64_t scanned_patches = 0;
    std::uint64_t excluded_zero_patches = 0;
    double tau = 0.0;
    double constant_C = 1.0;
};

// Per-image training data prepared for representer scans: α and f̂ per patch.
struct TrainingPatches {
    std::string image_id;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t channels = 0;
    std::vector<double> alpha;
    std::vector<double> unit;  // patch-major: unit[i*C + c]
    std::vector<std::uint8_t> nonzero;
};

TrainingPatches prepare_training_patches(const FeatureMap& fm, double tau, double constant_C);

// Scan over in-memory training patches.
RepresenterResult representer_topk(std::span<const TrainingPatches> training,
                                   const FeatureMap& query, std::uint32_t row, std::uint32_t col,
                                   std::size_t k, Polarity polarity, double tau,
                                   double constant_C);

// Streaming scan: loads each training feature file once, in parallel.
RepresenterResult representer_topk(std::span<const ManifestEntry* const> training,
                                   const FeatureMap& query, std::uint32_t row, std::uint32_t col,
                                   std::size_t k, Polarity polarity, double tau,
                                   double constant_C);

nlohmann::json to_json(const RepresenterResult& r);
nlohmann::json to_json(const ImportanceMap& m);

nlohmann::json to_json(const ForegroundPredictor& p);
ForegroundPredictor predictor_from_json(const nlohmann::json& j);
// One predictor is written as an object, several as an array of objects.
void write_predictors(const std::vector<ForegroundPredictor>& ps, const std::filesystem::path& path);
std::vector<ForegroundPredictor> read_predictors(const std::filesystem::path& path);

}  // namespace reprloc::representer
