#include "reprloc/representer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

#include "reprloc/error.hpp"
#include "reprloc/fsutil.hpp"
#include "reprloc/parallel.hpp"

namespace reprloc::representer {

using nlohmann::json;

namespace {

constexpr std::size_t kChunkImages = 16;

double norm2(std::span<const double> x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Sort keys for representer lists. (image_id, row, col) is unique per patch, so
// both orders are total and the merged top-k is independent of partitioning.
bool key_less(const RepresenterEntry& a, const RepresenterEntry& b) {
    return std::tie(a.image_id, a.row, a.col) < std::tie(b.image_id, b.row, b.col);
}

bool excitatory_before(const RepresenterEntry& a, const RepresenterEntry& b) {
    if (a.value != b.value) return a.value > b.value;
    return key_less(a, b);
}

bool inhibitory_before(const RepresenterEntry& a, const RepresenterEntry& b) {
    if (a.value != b.value) return a.value < b.value;
    return key_less(a, b);
}

template <class Less>
void keep_best(std::vector<RepresenterEntry>& xs, std::size_t k, Less less) {
    if (xs.size() > k) {
        std::partial_sort(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(k), xs.end(), less);
        xs.resize(k);
    } else {
        std::sort(xs.begin(), xs.end(), less);
    }
}

struct Partial {
    std::vector<RepresenterEntry> top;
    std::vector<RepresenterEntry> bottom;
    double sum = 0.0;
    std::uint64_t scanned = 0;
    std::uint64_t excluded = 0;
};

Partial score_image(const TrainingPatches& tp, std::span<const double> query_unit,
                    std::size_t k) {
    if (tp.channels != query_unit.size())
        throw DimensionError("training image '" + tp.image_id + "' has C=" +
                             std::to_string(tp.channels) + ", query has C=" +
                             std::to_string(query_unit.size()));
    Partial p;
    std::vector<RepresenterEntry> all;
    const std::size_t n = std::size_t{tp.height} * tp.width;
    all.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!tp.nonzero[i]) {
            ++p.excluded;
            continue;
        }
        std::span<const double> unit(tp.unit.data() + i * tp.channels, tp.channels);
        RepresenterEntry e;
        e.image_id = tp.image_id;
        e.row = static_cast<std::uint32_t>(i / tp.width);
        e.col = static_cast<std::uint32_t>(i % tp.width);
        e.alpha = tp.alpha[i];
        e.similarity = dot(unit, query_unit);
        e.value = e.alpha * e.similarity;
        p.sum += e.value;
        ++p.scanned;
        all.push_back(std::move(e));
    }
    p.top = all;
    keep_best(p.top, k, excitatory_before);
    p.bottom = std::move(all);
    keep_best(p.bottom, k, inhibitory_before);
    return p;
}

std::vector<double> query_unit_vector(const FeatureMap& query, std::uint32_t row,
                                      std::uint32_t col) {
    if (row >= query.height || col >= query.width)
        throw InvariantError("query patch (" + std::to_string(row) + "," + std::to_string(col) +
                             ") outside " + std::to_string(query.height) + "x" +
                             std::to_string(query.width) + " grid");
    auto unit = normalize_feature(query.patch(std::size_t{row} * query.width + col));
    if (!unit)
        throw InvariantError("query patch (" + std::to_string(row) + "," + std::to_string(col) +
                             ") of '" + query.image_id + "' has zero norm");
    return *unit;
}

RepresenterResult merge_partials(std::vector<Partial>& parts, const FeatureMap& query,
                                 std::uint32_t row, std::uint32_t col, std::size_t k,
                                 Polarity polarity, double tau, double constant_C) {
    RepresenterResult r;
    r.query_image = query.image_id;
    r.query_row = row;
    r.query_col = col;
    r.polarity = polarity;
    r.tau = tau;
    r.constant_C = constant_C;

    std::vector<RepresenterEntry> top, bottom;
    for (auto& p : parts) {
        r.full_sum += p.sum;
        r.scanned_patches += p.scanned;
        r.excluded_zero_patches += p.excluded;
        std::move(p.top.begin(), p.top.end(), std::back_inserter(top));
        std::move(p.bottom.begin(), p.bottom.end(), std::back_inserter(bottom));
    }
    keep_best(top, k, excitatory_before);
    keep_best(bottom, k, inhibitory_before);

    if (polarity != Polarity::inhibitory) r.excitatory = top;
    if (polarity == Polarity::inhibitory) {
        r.inhibitory = std::move(bottom);
    } else if (polarity == Polarity::both) {
        // Fewer than 2k patches: the two lists would overlap; the inhibitory
        // side keeps only what the excitatory side did not take.
        for (auto& e : bottom) {
            bool taken = std::any_of(top.begin(), top.end(), [&](const RepresenterEntry& t) {
                return t.image_id == e.image_id && t.row == e.row && t.col == e.col;
            });
            if (!taken) r.inhibitory.push_back(std::move(e));
        }
    }
    return r;
}

}  // namespace

std::optional<std::vector<double>> normalize_feature(std::span<const double> f) {
    for (double x : f)
        if (!std::isfinite(x)) throw InvariantError("normalize_feature: non-finite component");
    const double n = norm2(f);
    if (n == 0.0) return std::nullopt;
    std::vector<double> out(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] / n;
    return out;
}

Accumulator::Accumulator(std::size_t dim, bool compensated) : v_(dim, 0.0), u_(dim, 0.0) {
    if (dim == 0) throw InvariantError("accumulator dimension must be positive");
    if (compensated) {
        v_err_.assign(dim, 0.0);
        u_err_.assign(dim, 0.0);
    }
}

void Accumulator::add(std::vector<double>& sum, std::vector<double>& err, std::size_t c,
                      double x) {
    if (err.empty()) {
        sum[c] += x;
        return;
    }
    // Neumaier summation.
    const double t = sum[c] + x;
    if (std::abs(sum[c]) >= std::abs(x)) err[c] += (sum[c] - t) + x;
    else err[c] += (x - t) + sum[c];
    sum[c] = t;
}

std::vector<double> Accumulator::v() const {
    if (v_err_.empty()) return v_;
    std::vector<double> out(v_.size());
    for (std::size_t c = 0; c < v_.size(); ++c) out[c] = v_[c] + v_err_[c];
    return out;
}

std::vector<double> Accumulator::u() const {
    if (u_err_.empty()) return u_;
    std::vector<double> out(u_.size());
    for (std::size_t c = 0; c < u_.size(); ++c) out[c] = u_[c] + u_err_[c];
    return out;
}

void Accumulator::add_patch(std::span<const double> f) {
    if (f.size() != dim())
        throw DimensionError("patch has C=" + std::to_string(f.size()) + ", accumulator C=" +
                             std::to_string(dim()));
    ++patch_count_;
    auto unit = normalize_feature(f);
    if (!unit) {
        ++skipped_zero_;
        return;
    }
    for (std::size_t c = 0; c < dim(); ++c) {
        add(v_, v_err_, c, f[c]);
        add(u_, u_err_, c, (*unit)[c]);
    }
}

void Accumulator::accumulate(const FeatureMap& fm) {
    if (fm.channels != dim())
        throw DimensionError("feature map '" + fm.image_id + "' has C=" +
                             std::to_string(fm.channels) + ", accumulator C=" +
                             std::to_string(dim()));
    for (std::size_t i = 0; i < fm.patch_count(); ++i) add_patch(fm.patch(i));
    ++image_count_;
}

void Accumulator::merge(const Accumulator& other) {
    if (other.dim() != dim())
        throw DimensionError("cannot merge accumulators of dimension " + std::to_string(dim()) +
                             " and " + std::to_string(other.dim()));
    for (std::size_t c = 0; c < dim(); ++c) {
        add(v_, v_err_, c, other.v_[c]);
        add(u_, u_err_, c, other.u_[c]);
        if (!v_err_.empty() && !other.v_err_.empty()) {
            v_err_[c] += other.v_err_[c];
            u_err_[c] += other.u_err_[c];
        } else if (v_err_.empty() && !other.v_err_.empty()) {
            v_[c] += other.v_err_[c];
            u_[c] += other.u_err_[c];
        }
    }
    patch_count_ += other.patch_count_;
    image_count_ += other.image_count_;
    skipped_zero_ += other.skipped_zero_;
}

Accumulator Accumulator::from_totals(std::vector<double> v, std::vector<double> u,
                                     std::uint64_t patch_count, std::uint64_t image_count,
                                     std::uint64_t skipped_zero_vectors) {
    if (v.size() != u.size()) throw DimensionError("v and u differ in length");
    Accumulator acc(v.size());
    acc.v_ = std::move(v);
    acc.u_ = std::move(u);
    acc.patch_count_ = patch_count;
    acc.image_count_ = image_count;
    acc.skipped_zero_ = skipped_zero_vectors;
    return acc;
}

Accumulator accumulate(Accumulator acc, const FeatureMap& fm) {
    acc.accumulate(fm);
    return acc;
}

Accumulator merge(const Accumulator& a, const Accumulator& b) {
    Accumulator out = a;
    out.merge(b);
    return out;
}

double finalize_tau(const Accumulator& acc) {
    const double nu = norm2(acc.u());
    if (nu == 0.0)
        throw DegenerateDatasetError(
            "degenerate dataset: sum of normalized features is the zero vector (" +
            std::to_string(acc.patch_count()) + " patches, " +
            std::to_string(acc.skipped_zero_vectors()) + " zero)");
    return norm2(acc.v()) / nu;
}

double tau_gram_oracle(const std::vector<std::vector<double>>& features) {
    std::vector<std::vector<double>> units;
    for (const auto& f : features)
        if (auto u = normalize_feature(f)) units.push_back(std::move(*u));
    double num = 0.0, den = 0.0;
    for (const auto& a : features)
        for (const auto& b : features) num += dot(a, b);
    for (const auto& a : units)
        for (const auto& b : units) den += dot(a, b);
    if (!(den > 0.0)) throw DegenerateDatasetError("Gram oracle: zero denominator");
    return std::sqrt(num / den);
}

ForegroundPredictor finalize_predictor(const Accumulator& acc, double constant_C,
                                       std::optional<double> tau_override) {
    if (!(constant_C > 0.0) || !std::isfinite(constant_C))
        throw InvariantError("constant_C must be positive and finite");
    ForegroundPredictor p;
    if (tau_override) {
        if (!std::isfinite(*tau_override) || *tau_override < 0.0)
            throw InvariantError("tau override must be finite and non-negative");
        p.tau = *tau_override;
        p.provenance.tau_mode = "override";
    } else {
        p.tau = finalize_tau(acc);
    }
    p.constant_C = constant_C;
    const auto v = acc.v();
    const auto u = acc.u();
    p.w.resize(acc.dim());
    for (std::size_t c = 0; c < acc.dim(); ++c) p.w[c] = (v[c] - p.tau * u[c]) / constant_C;
    p.provenance.image_count = acc.image_count();
    p.provenance.skipped_zero_vectors = acc.skipped_zero_vectors();
    p.totals = AccumulatorTotals{v, u, acc.patch_count()};
    return p;
}

ForegroundPredictor with_tau(const ForegroundPredictor& p, double tau) {
    if (!p.totals) throw DataError("predictor carries no accumulator totals; cannot re-finalize");
    if (!std::isfinite(tau) || tau < 0.0) throw InvariantError("tau must be finite and >= 0");
    ForegroundPredictor out = p;
    out.tau = tau;
    out.provenance.tau_mode = "override";
    for (std::size_t c = 0; c < p.dim(); ++c)
        out.w[c] = (p.totals->v[c] - tau * p.totals->u[c]) / p.constant_C;
    return out;
}

std::vector<const ManifestEntry*> sample_train_entries(const DatasetManifest& m, double rate,
                                                       std::uint64_t seed) {
    if (!(rate > 0.0 && rate <= 1.0)) throw UsageError("sample rate must lie in (0, 1]");
    auto train = m.with_split(featstore::Split::train);
    if (train.empty()) throw DataError("manifest has no train entries");
    if (rate == 1.0) return train;

    const std::size_t n = train.size();
    const std::size_t k =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(rate * static_cast<double>(n))));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates on raw 64-bit draws keeps the selection identical
    // across standard library implementations.
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::vector<const ManifestEntry*> out;
    out.reserve(k);
    for (auto i : idx) out.push_back(train[i]);
    return out;
}

Accumulator accumulate_entries(std::span<const ManifestEntry* const> entries, bool compensated) {
    if (entries.empty()) throw DataError("no entries to accumulate");
    const auto dim = featstore::read_feature_header(entries.front()->feature_file).channels;
    const std::size_t chunks = (entries.size() + kChunkImages - 1) / kChunkImages;
    std::vector<std::optional<Accumulator>> partial(chunks);
    parallel_for(chunks, [&](std::size_t ci) {
        Accumulator acc(dim, compensated);
        const std::size_t end = std::min(entries.size(), (ci + 1) * kChunkImages);
        for (std::size_t i = ci * kChunkImages; i < end; ++i) {
            FeatureMap fm = featstore::read_feature_map(entries[i]->feature_file);
            fm.image_id = entries[i]->image_id;
            acc.accumulate(fm);
        }
        partial[ci] = std::move(acc);
    });
    Accumulator total(dim, compensated);
    for (auto& p : partial) total.merge(*p);
    return total;
}

std::vector<ForegroundPredictor> fit(const DatasetManifest& m, const FitOptions& opts) {
    auto sampled = sample_train_entries(m, opts.sample_rate, opts.seed);
    auto stamp = [&](ForegroundPredictor& p, const std::string& mode) {
        p.provenance.manifest_digest = m.digest;
        p.provenance.sample_rate = opts.sample_rate;
        p.provenance.seed = opts.seed;
        if (!opts.tau_override) p.provenance.tau_mode = mode;
    };

    if (!opts.classwise) {
        Accumulator acc = accumulate_entries(sampled, opts.compensated);
        ForegroundPredictor p = finalize_predictor(acc, opts.constant_C, opts.tau_override);
        stamp(p, "global");
        return {std::move(p)};
    }

    std::map<int, std::vector<const ManifestEntry*>> by_class;
    for (const auto* e : sampled) {
        if (!e->class_id)
            throw DataError("classwise fit: entry '" + e->image_id + "' has no class_id");
        by_class[*e->class_id].push_back(e);
    }
    std::vector<std::pair<int, Accumulator>> accs;
    for (const auto& [cls, list] : by_class)
        accs.emplace_back(cls, accumulate_entries(list, opts.compensated));

    std::optional<double> shared_tau = opts.tau_override;
    if (!shared_tau && opts.global_tau) {
        Accumulator pooled(accs.front().second.dim(), opts.compensated);
        for (const auto& [cls, acc] : accs) pooled.merge(acc);
        shared_tau = finalize_tau(pooled);
    }

    std::vector<ForegroundPredictor> out;
    for (const auto& [cls, acc] : accs) {
        ForegroundPredictor p = finalize_predictor(acc, opts.constant_C, shared_tau);
        stamp(p, opts.global_tau ? "global" : "per_class");
        p.class_id = cls;
        out.push_back(std::move(p));
    }
    return out;
}

ImportanceMap importance_map(const FeatureMap& fm, double tau, double constant_C) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvariantError("tau must be positive");
    if (!(constant_C > 0.0)) throw InvariantError("constant_C must be positive");
    ImportanceMap im;
    im.image_id = fm.image_id;
    im.height = fm.height;
    im.width = fm.width;
    im.tau = tau;
    im.alpha.resize(fm.patch_count());
    for (std::size_t i = 0; i < fm.patch_count(); ++i)
        im.alpha[i] = (norm2(fm.patch(i)) - tau) / constant_C;
    return im;
}

Polarity parse_polarity(const std::string& s) {
    if (s == "excitatory") return Polarity::excitatory;
    if (s == "inhibitory") return Polarity::inhibitory;
    if (s == "both") return Polarity::both;
    throw UsageError("polarity must be excitatory, inhibitory or both, got '" + s + "'");
}

std::string to_string(Polarity p) {
    switch (p) {
        case Polarity::excitatory: return "excitatory";
        case Polarity::inhibitory: return "inhibitory";
        case Polarity::both: return "both";
    }
    return "both";
}

TrainingPatches prepare_training_patches(const FeatureMap& fm, double tau, double constant_C) {
    TrainingPatches tp;
    tp.image_id = fm.image_id;
    tp.height = fm.height;
    tp.width = fm.width;
    tp.channels = fm.channels;
    const std::size_t n = fm.patch_count();
    tp.alpha.resize(n);
    tp.unit.assign(n * fm.channels, 0.0);
    tp.nonzero.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        auto f = fm.patch(i);
        tp.alpha[i] = (norm2(f) - tau) / constant_C;
        if (auto unit = normalize_feature(f)) {
            std::copy(unit->begin(), unit->end(), tp.unit.begin() + i * fm.channels);
            tp.nonzero[i] = 1;
        }
    }
    return tp;
}

RepresenterResult representer_topk(std::span<const TrainingPatches> training,
                                   const FeatureMap& query, std::uint32_t row, std::uint32_t col,
                                   std::size_t k, Polarity polarity, double tau,
                                   double constant_C) {
    if (k == 0) throw InvariantError("k must be at least 1");
    const auto q = query_unit_vector(query, row, col);
    std::vector<Partial> parts(training.size());
    parallel_for(training.size(), [&](std::size_t i) { parts[i] = score_image(training[i], q, k); });
    return merge_partials(parts, query, row, col, k, polarity, tau, constant_C);
}

RepresenterResult representer_topk(std::span<const ManifestEntry* const> training,
                                   const FeatureMap& query, std::uint32_t row, std::uint32_t col,
                                   std::size_t k, Polarity polarity, double tau,
                                   double constant_C) {
    if (k == 0) throw InvariantError("k must be at least 1");
    const auto q = query_unit_vector(query, row, col);
    std::vector<Partial> parts(training.size());
    parallel_for(training.size(), [&](std::size_t i) {
        FeatureMap fm = featstore::read_feature_map(training[i]->feature_file);
        fm.image_id = training[i]->image_id;
        parts[i] = score_image(prepare_training_patches(fm, tau, constant_C), q, k);
    });
    return merge_partials(parts, query, row, col, k, polarity, tau, constant_C);
}

namespace {

json entries_json(const std::vector<RepresenterEntry>& xs) {
    json arr = json::array();
    for (const auto& e : xs)
        arr.push_back({{"image_id", e.image_id},
                       {"row", e.row},
                       {"col", e.col},
                       {"alpha", e.alpha},
                       {"similarity", e.similarity},
                       {"representer_value", e.value}});
    return arr;
}

}  // namespace

json to_json(const RepresenterResult& r) {
    json j{{"query", {{"image_id", r.query_image}, {"row", r.query_row}, {"col", r.query_col}}},
           {"polarity", to_string(r.polarity)},
           {"tau", r.tau},
           {"constant_C", r.constant_C},
           {"full_sum", r.full_sum},
           {"scanned_patches", r.scanned_patches},
           {"excluded_zero_patches", r.excluded_zero_patches}};
    if (r.polarity != Polarity::inhibitory) j["excitatory"] = entries_json(r.excitatory);
    if (r.polarity != Polarity::excitatory) j["inhibitory"] = entries_json(r.inhibitory);
    return j;
}

json to_json(const ImportanceMap& m) {
    return json{{"image_id", m.image_id},
                {"height", m.height},
                {"width", m.width},
                {"tau", m.tau},
                {"alpha", m.alpha}};
}

json to_json(const ForegroundPredictor& p) {
    json j{{"version", 1}, {"dim", p.dim()}, {"w", p.w}, {"tau", p.tau},
           {"constant_C", p.constant_C}};
    if (p.class_id) j["class_id"] = *p.class_id;
    j["provenance"] = {{"manifest_digest", p.provenance.manifest_digest},
                       {"sample_rate", p.provenance.sample_rate},
                       {"seed", p.provenance.seed},
                       {"image_count", p.provenance.image_count},
                       {"skipped_zero_vectors", p.provenance.skipped_zero_vectors},
                       {"tau_mode", p.provenance.tau_mode}};
    if (p.totals)
        j["accumulator"] = {
            {"v", p.totals->v}, {"u", p.totals->u}, {"patch_count", p.totals->patch_count}};
    return j;
}

ForegroundPredictor predictor_from_json(const json& j) {
    ForegroundPredictor p;
    try {
        if (j.at("version").get<int>() != 1) throw FormatError("predictor: unsupported version");
        const auto dim = j.at("dim").get<std::size_t>();
        p.w = j.at("w").get<std::vector<double>>();
        if (dim == 0 || p.w.size() != dim)
            throw FormatError("predictor: w has " + std::to_string(p.w.size()) +
                              " components, dim says " + std::to_string(dim));
        p.tau = j.at("tau").get<double>();
        p.constant_C = j.at("constant_C").get<double>();
        if (j.contains("class_id") && !j["class_id"].is_null()) p.class_id = j["class_id"].get<int>();
        const json& pr = j.at("provenance");
        p.provenance.manifest_digest = pr.at("manifest_digest").get<std::string>();
        p.provenance.sample_rate = pr.at("sample_rate").get<double>();
        p.provenance.seed = pr.at("seed").get<std::uint64_t>();
        p.provenance.image_count = pr.at("image_count").get<std::uint64_t>();
        p.provenance.skipped_zero_vectors = pr.at("skipped_zero_vectors").get<std::uint64_t>();
        p.provenance.tau_mode = pr.value("tau_mode", std::string("global"));
        if (j.contains("accumulator")) {
            const json& a = j["accumulator"];
            AccumulatorTotals t{a.at("v").get<std::vector<double>>(),
                                a.at("u").get<std::vector<double>>(),
                                a.at("patch_count").get<std::uint64_t>()};
            if (t.v.size() != dim || t.u.size() != dim)
                throw FormatError("predictor: accumulator dimension mismatch");
            p.totals = std::move(t);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("predictor: ") + e.what());
    }
    if (!std::isfinite(p.tau) || p.tau < 0.0) throw FormatError("predictor: invalid tau");
    if (!(p.constant_C > 0.0)) throw FormatError("predictor: constant_C must be positive");
    return p;
}

void write_predictors(const std::vector<ForegroundPredictor>& ps,
                      const std::filesystem::path& path) {
    if (ps.empty()) throw InvariantError("no predictors to write");
    json doc;
    if (ps.size() == 1) {
        doc = to_json(ps.front());
    } else {
        doc = json::array();
        for (const auto& p : ps) doc.push_back(to_json(p));
    }
    atomic_write(path, doc.dump(2) + "\n");
}

std::vector<ForegroundPredictor> read_predictors(const std::filesystem::path& path) {
    json doc;
    try {
        doc = json::parse(read_file_bytes(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    std::vector<ForegroundPredictor> out;
    if (doc.is_array()) {
        for (const auto& j : doc) out.push_back(predictor_from_json(j));
    } else {
        out.push_back(predictor_from_json(doc));
    }
    if (out.empty()) throw FormatError(path.string() + ": no predictors");
    const auto dim = out.front().dim();
    for (const auto& p : out)
        if (p.dim() != dim) throw FormatError(path.string() + ": predictors disagree on dim");
    return out;
}

}  // namespace reprloc::representer
