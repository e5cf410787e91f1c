#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprloc/featstore.hpp"
#include "reprloc/representer.hpp"

namespace reprloc::service {

struct Response {
    int status = 200;
    nlohmann::json body;
};

// Everything the endpoints read. Built once; never mutated afterwards.
class ServiceState {
public:
    ServiceState(featstore::DatasetManifest manifest,
                 std::vector<representer::ForegroundPredictor> predictors,
                 std::size_t max_k = 256);

    const featstore::DatasetManifest& manifest() const { return manifest_; }
    const std::vector<representer::ForegroundPredictor>& predictors() const { return predictors_; }
    std::size_t max_k() const { return max_k_; }

    const featstore::ManifestEntry* entry(const std::string& id) const;
    const featstore::FeatureMap& features(const std::string& id) const;
    const representer::ImportanceMap& importance(const std::string& id) const;
    std::size_t predictor_index(const featstore::ManifestEntry& e) const;
    const std::vector<representer::TrainingPatches>& training(std::size_t predictor) const {
        return training_[predictor];
    }

private:
    featstore::DatasetManifest manifest_;
    std::vector<representer::ForegroundPredictor> predictors_;
    std::size_t max_k_;
    std::map<std::string, std::size_t> index_;
    std::vector<featstore::FeatureMap> features_;
    std::vector<representer::ImportanceMap> importance_;
    std::vector<std::vector<representer::TrainingPatches>> training_;  // per predictor
};

using Query = std::map<std::string, std::string>;

Response handle_images(const ServiceState& s);
Response handle_meta(const ServiceState& s);
Response handle_activation(const ServiceState& s, const std::string& image_id);
Response handle_localize(const ServiceState& s, const std::string& image_id, const Query& q);
Response handle_representer(const ServiceState& s, const std::string& image_id, const Query& q);
Response handle_importance(const ServiceState& s, const std::string& image_id);

// Routes a GET path (e.g. "/v1/localize/img_00001") to its handler.
Response dispatch(const ServiceState& s, const std::string& path, const Query& q);

// Blocks serving HTTP until the process is stopped.
void serve(const ServiceState& s, const std::string& host, int port);

// Serves on an ephemeral port in a background thread; stops on destruction.
class BackgroundServer {
public:
    explicit BackgroundServer(const ServiceState& s, const std::string& host = "127.0.0.1");
    ~BackgroundServer();
    BackgroundServer(const BackgroundServer&) = delete;
    BackgroundServer& operator=(const BackgroundServer&) = delete;

    int port() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace reprloc::service
