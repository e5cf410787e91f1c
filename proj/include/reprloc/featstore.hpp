#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace reprloc::featstore {

// One image's dense feature tensor, stored [channel][row][column].
struct FeatureMap {
    std::string image_id;
    std::uint32_t channels = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(std::string id, std::uint32_t c, std::uint32_t h, std::uint32_t w);

    std::size_t patch_count() const { return std::size_t{height} * width; }
    float at(std::uint32_t c, std::uint32_t row, std::uint32_t col) const {
        return data[(std::size_t{c} * height + row) * width + col];
    }
    float& at(std::uint32_t c, std::uint32_t row, std::uint32_t col) {
        return data[(std::size_t{c} * height + row) * width + col];
    }
    // Copies the C-vector of patch index i (row-major over the H×W grid).
    std::vector<double> patch(std::size_t i) const;

    // Throws InvariantError on zero dimensions, size mismatch or non-finite data.
    void validate() const;

    bool operator==(const FeatureMap&) const = default;
};

struct FeatureHeader {
    std::uint16_t version = 0;
    std::uint8_t dtype = 0;
    std::uint32_t channels = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
};

inline constexpr std::size_t kHeaderBytes = 25;
inline constexpr std::uint16_t kFormatVersion = 1;

void write_feature_map(const FeatureMap& fm, const std::filesystem::path& path);
FeatureMap read_feature_map(const std::filesystem::path& path);
// Reads and checks the header only; payload length is checked against file size.
FeatureHeader read_feature_header(const std::filesystem::path& path);

// Half-open pixel box [x0,x1) × [y0,y1).
struct BBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    long long area() const { return static_cast<long long>(x1 - x0) * (y1 - y0); }
    bool valid() const { return x0 >= 0 && y0 >= 0 && x0 < x1 && y0 < y1; }
    bool operator==(const BBox&) const = default;
    auto operator<=>(const BBox&) const = default;
};

nlohmann::json to_json(const BBox& b);
BBox box_from_json(const nlohmann::json& j);

enum class Split { train, test };

struct ManifestEntry {
    std::string image_id;
    std::string feature_path;                 // as written, relative to root
    std::filesystem::path feature_file;       // resolved
    int image_width = 0;
    int image_height = 0;
    std::optional<int> class_id;
    std::vector<BBox> gt_boxes;
    std::optional<std::string> gt_mask_path;  // as written
    std::optional<std::filesystem::path> gt_mask_file;
    Split split = Split::train;
};

struct DatasetManifest {
    int version = 1;
    std::string root = ".";              // as written
    std::filesystem::path root_dir;      // resolved
    std::vector<ManifestEntry> entries;
    nlohmann::json metadata = nlohmann::json::object();
    std::string digest;                  // SHA-256 of the manifest file bytes

    const ManifestEntry* find(const std::string& image_id) const;
    std::vector<const ManifestEntry*> with_split(Split split) const;
};

std::string to_string(Split s);

DatasetManifest load_manifest(const std::filesystem::path& path);
// Parses manifest JSON text; relative root is resolved against base_dir.
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
nlohmann::json manifest_to_json(const DatasetManifest& m);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct ValidationFailure {
    std::string image_id;
    std::string path;
    std::string message;
};

struct ValidationReport {
    std::size_t checked = 0;
    std::optional<std::uint32_t> channels;  // the dataset's majority channel count
    std::vector<ValidationFailure> failures;

    bool ok() const { return failures.empty(); }
};

ValidationReport validate_dataset(const DatasetManifest& m);

// 8-bit grayscale image, row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    bool operator==(const GrayImage&) const = default;
};

void write_pgm(const GrayImage& img, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace reprloc::featstore
