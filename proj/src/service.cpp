#include "reprloc/service.hpp"

#include <httplib.h>

#include <regex>
#include <thread>

#include "reprloc/error.hpp"
#include "reprloc/evalkit.hpp"
#include "reprloc/localizer.hpp"
#include "reprloc/parallel.hpp"

namespace reprloc::service {

using nlohmann::json;

namespace {

Response error(int status, const std::string& message, const std::string& field = "") {
    json body{{"error", message}};
    if (!field.empty()) body["field"] = field;
    return {status, body};
}

Response not_found(const std::string& id) { return error(404, "unknown image '" + id + "'"); }

struct BadParam {
    std::string field;
    std::string message;
};

std::optional<std::string> param(const Query& q, const std::string& key) {
    auto it = q.find(key);
    if (it == q.end()) return std::nullopt;
    return it->second;
}

double parse_double(const Query& q, const std::string& key, double fallback) {
    auto v = param(q, key);
    if (!v) return fallback;
    try {
        std::size_t used = 0;
        double d = std::stod(*v, &used);
        if (used != v->size() || !std::isfinite(d)) throw std::invalid_argument(key);
        return d;
    } catch (const std::logic_error&) {
        throw BadParam{key, key + " must be a number, got '" + *v + "'"};
    }
}

long long parse_int(const Query& q, const std::string& key, std::optional<long long> fallback) {
    auto v = param(q, key);
    if (!v) {
        if (fallback) return *fallback;
        throw BadParam{key, "missing required parameter " + key};
    }
    try {
        std::size_t used = 0;
        long long n = std::stoll(*v, &used);
        if (used != v->size()) throw std::invalid_argument(key);
        return n;
    } catch (const std::logic_error&) {
        throw BadParam{key, key + " must be an integer, got '" + *v + "'"};
    }
}

}  // namespace

ServiceState::ServiceState(featstore::DatasetManifest manifest,
                           std::vector<representer::ForegroundPredictor> predictors,
                           std::size_t max_k)
    : manifest_(std::move(manifest)), predictors_(std::move(predictors)), max_k_(max_k) {
    if (predictors_.empty()) throw DataError("service needs at least one predictor");
    const std::size_t n = manifest_.entries.size();
    for (std::size_t i = 0; i < n; ++i) index_[manifest_.entries[i].image_id] = i;

    features_.resize(n);
    importance_.resize(n);
    parallel_for(n, [&](std::size_t i) {
        const auto& e = manifest_.entries[i];
        features_[i] = featstore::read_feature_map(e.feature_file);
        features_[i].image_id = e.image_id;
        if (features_[i].channels != predictors_.front().dim())
            throw DimensionError("entry '" + e.image_id + "' has C=" +
                                 std::to_string(features_[i].channels) + ", predictor dim " +
                                 std::to_string(predictors_.front().dim()));
    });

    // α maps and unit vectors of the training patches, one set per predictor.
    training_.resize(predictors_.size());
    for (std::size_t p = 0; p < predictors_.size(); ++p) {
        const auto& pred = predictors_[p];
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& e = manifest_.entries[i];
            if (e.split != featstore::Split::train) continue;
            if (pred.class_id && (!e.class_id || *e.class_id != *pred.class_id)) continue;
            members.push_back(i);
        }
        training_[p].resize(members.size());
        parallel_for(members.size(), [&](std::size_t m) {
            training_[p][m] = representer::prepare_training_patches(features_[members[m]],
                                                                    pred.tau, pred.constant_C);
        });
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto* e = &manifest_.entries[i];
        std::size_t p = 0;
        try {
            p = predictor_index(*e);
        } catch (const DataError&) {
            continue;  // no predictor for this entry's class
        }
        if (predictors_[p].tau > 0)
            importance_[i] = representer::importance_map(features_[i], predictors_[p].tau,
                                                         predictors_[p].constant_C);
    }
}

const featstore::ManifestEntry* ServiceState::entry(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &manifest_.entries[it->second];
}

const featstore::FeatureMap& ServiceState::features(const std::string& id) const {
    return features_.at(index_.at(id));
}

const representer::ImportanceMap& ServiceState::importance(const std::string& id) const {
    return importance_.at(index_.at(id));
}

std::size_t ServiceState::predictor_index(const featstore::ManifestEntry& e) const {
    const auto& p = evalkit::select_predictor(predictors_, e);
    return static_cast<std::size_t>(&p - predictors_.data());
}

Response handle_images(const ServiceState& s) {
    json images = json::array();
    for (const auto& e : s.manifest().entries) {
        const auto& fm = s.features(e.image_id);
        json j{{"image_id", e.image_id},
               {"image_width", e.image_width},
               {"image_height", e.image_height},
               {"grid_height", fm.height},
               {"grid_width", fm.width},
               {"split", featstore::to_string(e.split)}};
        j["class_id"] = e.class_id ? json(*e.class_id) : json(nullptr);
        if (!e.gt_boxes.empty()) {
            json boxes = json::array();
            for (const auto& b : e.gt_boxes) boxes.push_back(featstore::to_json(b));
            j["gt_boxes"] = boxes;
        }
        images.push_back(std::move(j));
    }
    return {200, {{"images", images}}};
}

Response handle_meta(const ServiceState& s) {
    json preds = json::array();
    for (const auto& p : s.predictors()) {
        json j = representer::to_json(p);
        j.erase("w");
        j.erase("accumulator");
        preds.push_back(std::move(j));
    }
    return {200,
            {{"manifest_digest", s.manifest().digest},
             {"max_k", s.max_k()},
             {"predictors", preds}}};
}

Response handle_activation(const ServiceState& s, const std::string& image_id) {
    const auto* e = s.entry(image_id);
    if (!e) return not_found(image_id);
    try {
        const auto& pred = s.predictors()[s.predictor_index(*e)];
        auto am = localizer::activation_map(s.features(image_id), pred);
        return {200,
                {{"image_id", image_id},
                 {"height", am.normalized.height},
                 {"width", am.normalized.width},
                 {"normalized", am.normalized.values},
                 {"raw", am.raw.values},
                 {"degenerate", am.degenerate}}};
    } catch (const DataError& err) {
        return error(422, err.what());
    }
}

Response handle_localize(const ServiceState& s, const std::string& image_id, const Query& q) {
    const auto* e = s.entry(image_id);
    if (!e) return not_found(image_id);
    localizer::LocalizeParams params;
    try {
        params.threshold = parse_double(q, "theta", 0.5);
        if (!(params.threshold >= 0.0 && params.threshold <= 1.0))
            throw BadParam{"theta", "theta must lie in [0, 1], got " + *param(q, "theta")};
        params.connectivity = static_cast<int>(parse_int(q, "conn", 4));
        if (params.connectivity != 4 && params.connectivity != 8)
            throw BadParam{"conn", "conn must be 4 or 8"};
        if (auto p = param(q, "policy")) {
            if (*p == "largest") params.policy = localizer::BoxPolicy::largest;
            else if (*p == "all") params.policy = localizer::BoxPolicy::all;
            else throw BadParam{"policy", "policy must be 'largest' or 'all'"};
        }
    } catch (const BadParam& bp) {
        return error(400, bp.message, bp.field);
    }
    try {
        const auto& pred = s.predictors()[s.predictor_index(*e)];
        auto res = localizer::localize(s.features(image_id), pred, e->image_width,
                                       e->image_height, params);
        json body = localizer::to_json(res);
        body["connectivity"] = params.connectivity;
        body["policy"] = localizer::to_string(params.policy);
        return {200, body};
    } catch (const DataError& err) {
        return error(422, err.what());
    }
}

Response handle_representer(const ServiceState& s, const std::string& image_id, const Query& q) {
    const auto* e = s.entry(image_id);
    if (!e) return not_found(image_id);
    const auto& fm = s.features(image_id);
    long long row = 0, col = 0, k = 0;
    representer::Polarity polarity = representer::Polarity::both;
    try {
        row = parse_int(q, "row", std::nullopt);
        col = parse_int(q, "col", std::nullopt);
        if (row < 0 || row >= fm.height)
            throw BadParam{"row", "row must lie in [0, " + std::to_string(fm.height) + ")"};
        if (col < 0 || col >= fm.width)
            throw BadParam{"col", "col must lie in [0, " + std::to_string(fm.width) + ")"};
        k = parse_int(q, "k", 10);
        if (k < 1) throw BadParam{"k", "k must be at least 1"};
        if (auto p = param(q, "polarity")) {
            try {
                polarity = representer::parse_polarity(*p);
            } catch (const UsageError& err) {
                throw BadParam{"polarity", err.what()};
            }
        }
    } catch (const BadParam& bp) {
        return error(400, bp.message, bp.field);
    }
    if (static_cast<std::size_t>(k) > s.max_k())
        return error(413, "k=" + std::to_string(k) + " exceeds the limit " +
                              std::to_string(s.max_k()), "k");
    try {
        const std::size_t p = s.predictor_index(*e);
        const auto& pred = s.predictors()[p];
        auto result = representer::representer_topk(
            std::span<const representer::TrainingPatches>(s.training(p)), fm,
            static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(col),
            static_cast<std::size_t>(k), polarity, pred.tau, pred.constant_C);
        json body = representer::to_json(result);
        auto am = localizer::activation_map(fm, pred);
        body["activation"] = am.raw.at(static_cast<int>(row), static_cast<int>(col));
        body["k"] = k;
        return {200, body};
    } catch (const InvariantError& err) {
        return error(400, err.what());
    } catch (const DataError& err) {
        return error(422, err.what());
    }
}

Response handle_importance(const ServiceState& s, const std::string& image_id) {
    const auto* e = s.entry(image_id);
    if (!e) return not_found(image_id);
    const auto& im = s.importance(image_id);
    if (im.alpha.empty())
        return error(422, "no importance map: predictor tau is zero or missing for this image");
    return {200, representer::to_json(im)};
}

Response dispatch(const ServiceState& s, const std::string& path, const Query& q) {
    static const std::regex kRoute(R"(^/v1/(images|meta|activation|localize|representer|importance)(?:/([^/]+))?/?$)");
    std::smatch m;
    if (!std::regex_match(path, m, kRoute)) return error(404, "no route for " + path);
    const std::string what = m[1];
    const std::string id = m[2];
    if (what == "images" && id.empty()) return handle_images(s);
    if (what == "meta" && id.empty()) return handle_meta(s);
    if (id.empty()) return error(404, "missing image id in " + path);
    if (what == "activation") return handle_activation(s, id);
    if (what == "localize") return handle_localize(s, id, q);
    if (what == "representer") return handle_representer(s, id, q);
    if (what == "importance") return handle_importance(s, id);
    return error(404, "no route for " + path);
}

namespace {

void install_routes(httplib::Server& server, const ServiceState& s) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Get(R"(/v1/.*)", [&s](const httplib::Request& req, httplib::Response& res) {
        Query q;
        for (const auto& [k, v] : req.params) q[k] = v;  // last value wins
        Response r = dispatch(s, req.path, q);
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.status = 204;
    });
}

}  // namespace

void serve(const ServiceState& s, const std::string& host, int port) {
    httplib::Server server;
    install_routes(server, s);
    if (!server.listen(host, port))
        throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

struct BackgroundServer::Impl {
    httplib::Server server;
    std::thread thread;
    int port = 0;
};

BackgroundServer::BackgroundServer(const ServiceState& s, const std::string& host)
    : impl_(std::make_unique<Impl>()) {
    install_routes(impl_->server, s);
    impl_->port = impl_->server.bind_to_any_port(host);
    if (impl_->port <= 0) throw IoError("cannot bind a port on " + host);
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

BackgroundServer::~BackgroundServer() {
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

int BackgroundServer::port() const { return impl_->port; }

}  // namespace reprloc::service
