#include "reprloc/featstore.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "reprloc/error.hpp"
#include "reprloc/fsutil.hpp"

namespace reprloc::featstore {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'R', 'P', 'S', 'F'};

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
           std::uint32_t{p[3]} << 24;
}

FeatureHeader parse_header(const unsigned char* p, const fs::path& path) {
    if (std::memcmp(p, kMagic, 4) != 0) {
        std::string magic(reinterpret_cast<const char*>(p), 4);
        throw FormatError(path.string() + ": bad magic \"" + magic + "\", expected \"RPSF\"");
    }
    FeatureHeader h;
    h.version = static_cast<std::uint16_t>(p[4] | (p[5] << 8));
    h.dtype = p[6];
    h.channels = get_u32(p + 8);
    h.height = get_u32(p + 12);
    h.width = get_u32(p + 16);
    if (h.version != kFormatVersion)
        throw FormatError(path.string() + ": unsupported version " + std::to_string(h.version));
    if (h.dtype != 0)
        throw FormatError(path.string() + ": unsupported dtype " + std::to_string(h.dtype) +
                          " (only 0 = f32le)");
    if (h.channels == 0 || h.height == 0 || h.width == 0)
        throw FormatError(path.string() + ": zero dimension in header");
    return h;
}

// Header offsets: 0 magic, 4 version, 6 dtype, 7 reserved, 8 C, 12 H, 16 W,
// 20..24 zero padding. Payload starts at byte 25.
std::uint64_t payload_bytes(const FeatureHeader& h) {
    return std::uint64_t{h.channels} * h.height * h.width * 4;
}

const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

std::string entry_ctx(std::size_t i, const std::string& id) {
    return "entries[" + std::to_string(i) + "]" + (id.empty() ? "" : " (" + id + ")");
}

}  // namespace

FeatureMap::FeatureMap(std::string id, std::uint32_t c, std::uint32_t h, std::uint32_t w)
    : image_id(std::move(id)), channels(c), height(h), width(w),
      data(std::size_t{c} * h * w, 0.0f) {}

std::vector<double> FeatureMap::patch(std::size_t i) const {
    std::vector<double> f(channels);
    const std::size_t plane = patch_count();
    for (std::size_t c = 0; c < channels; ++c) f[c] = data[c * plane + i];
    return f;
}

void FeatureMap::validate() const {
    if (channels == 0 || height == 0 || width == 0)
        throw InvariantError("feature map '" + image_id + "': dimensions must be >= 1");
    if (data.size() != std::size_t{channels} * height * width)
        throw InvariantError("feature map '" + image_id + "': data length " +
                             std::to_string(data.size()) + " != C*H*W");
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i]))
            throw InvariantError("feature map '" + image_id + "': non-finite value at index " +
                                 std::to_string(i));
    }
}

void write_feature_map(const FeatureMap& fm, const fs::path& path) {
    fm.validate();
    std::string out;
    out.reserve(kHeaderBytes + fm.data.size() * 4);
    out.append(kMagic, 4);
    put_u16(out, kFormatVersion);
    out.push_back(0);  // dtype f32le
    out.push_back(0);  // reserved
    put_u32(out, fm.channels);
    put_u32(out, fm.height);
    put_u32(out, fm.width);
    while (out.size() < kHeaderBytes) out.push_back(0);
    for (float v : fm.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    atomic_write(path, out);
}

FeatureHeader read_feature_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open feature file: " + path.string());
    unsigned char buf[kHeaderBytes];
    in.read(reinterpret_cast<char*>(buf), kHeaderBytes);
    if (in.gcount() != static_cast<std::streamsize>(kHeaderBytes))
        throw FormatError(path.string() + ": truncated header");
    FeatureHeader h = parse_header(buf, path);
    std::error_code ec;
    auto size = fs::file_size(path, ec);
    if (ec) throw IoError("cannot stat: " + path.string());
    if (size - kHeaderBytes < payload_bytes(h))
        throw FormatError(path.string() + ": truncated payload (" +
                          std::to_string(size - kHeaderBytes) + " bytes, expected " +
                          std::to_string(payload_bytes(h)) + ")");
    if (size - kHeaderBytes > payload_bytes(h))
        throw FormatError(path.string() + ": trailing bytes after payload");
    return h;
}

FeatureMap read_feature_map(const fs::path& path) {
    std::string bytes = read_file_bytes(path);
    if (bytes.size() < kHeaderBytes) throw FormatError(path.string() + ": truncated header");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    FeatureHeader h = parse_header(p, path);
    const std::uint64_t need = payload_bytes(h);
    const std::uint64_t have = bytes.size() - kHeaderBytes;
    if (have < need)
        throw FormatError(path.string() + ": truncated payload (" + std::to_string(have) +
                          " bytes, expected " + std::to_string(need) + ")");
    if (have > need) throw FormatError(path.string() + ": trailing bytes after payload");

    FeatureMap fm(path.stem().string(), h.channels, h.height, h.width);
    const unsigned char* payload = p + kHeaderBytes;
    for (std::size_t i = 0; i < fm.data.size(); ++i) {
        float v = std::bit_cast<float>(get_u32(payload + 4 * i));
        if (!std::isfinite(v))
            throw FormatError(path.string() + ": non-finite value at index " + std::to_string(i));
        fm.data[i] = v;
    }
    return fm;
}

json to_json(const BBox& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

BBox box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4)
        throw FormatError("box must be an array [x0, y0, x1, y1]");
    for (const auto& v : j)
        if (!v.is_number_integer()) throw FormatError("box coordinates must be integers");
    return BBox{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

std::string to_string(Split s) { return split_name(s); }

const ManifestEntry* DatasetManifest::find(const std::string& image_id) const {
    for (const auto& e : entries)
        if (e.image_id == image_id) return &e;
    return nullptr;
}

std::vector<const ManifestEntry*> DatasetManifest::with_split(Split split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(&e);
    return out;
}

DatasetManifest parse_manifest(const std::string& text, const fs::path& base_dir) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("manifest parse error: ") + e.what());
    }
    if (!doc.is_object()) throw FormatError("manifest: top level must be an object");

    DatasetManifest m;
    auto field = [](const json& obj, const char* key, const std::string& ctx) -> const json& {
        auto it = obj.find(key);
        if (it == obj.end()) throw FormatError(ctx + ": missing field '" + key + "'");
        return *it;
    };

    try {
        m.version = field(doc, "version", "manifest").get<int>();
        if (m.version != 1)
            throw FormatError("manifest: unsupported version " + std::to_string(m.version));
        if (doc.contains("root")) m.root = doc["root"].get<std::string>();
        if (doc.contains("metadata")) {
            if (!doc["metadata"].is_object())
                throw FormatError("manifest: 'metadata' must be an object");
            m.metadata = doc["metadata"];
        }
    } catch (const json::type_error& e) {
        throw FormatError(std::string("manifest: ") + e.what());
    }
    fs::path root(m.root);
    m.root_dir = root.is_absolute() ? root : (base_dir / root).lexically_normal();

    const json& entries = field(doc, "entries", "manifest");
    if (!entries.is_array()) throw FormatError("manifest: 'entries' must be an array");

    std::set<std::string> seen;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const json& j = entries[i];
        std::string ctx = entry_ctx(i, "");
        if (!j.is_object()) throw FormatError(ctx + ": must be an object");
        ManifestEntry e;
        try {
            e.image_id = field(j, "image_id", ctx).get<std::string>();
            ctx = entry_ctx(i, e.image_id);
            e.feature_path = field(j, "feature_path", ctx).get<std::string>();
            e.image_width = field(j, "image_width", ctx).get<int>();
            e.image_height = field(j, "image_height", ctx).get<int>();
            if (j.contains("class_id") && !j["class_id"].is_null()) {
                int c = j["class_id"].get<int>();
                if (c < 0) throw FormatError(ctx + ": class_id must be non-negative");
                e.class_id = c;
            }
            if (j.contains("gt_mask_path") && !j["gt_mask_path"].is_null())
                e.gt_mask_path = j["gt_mask_path"].get<std::string>();
            std::string split = j.value("split", std::string("train"));
            if (split == "train") e.split = Split::train;
            else if (split == "test") e.split = Split::test;
            else throw FormatError(ctx + ": split must be 'train' or 'test', got '" + split + "'");
        } catch (const json::type_error& err) {
            throw FormatError(ctx + ": " + err.what());
        }
        if (e.image_id.empty()) throw FormatError(ctx + ": empty image_id");
        if (e.image_width <= 0 || e.image_height <= 0)
            throw FormatError(ctx + ": image_width/image_height must be positive");
        if (!seen.insert(e.image_id).second)
            throw FormatError("manifest: duplicate image_id '" + e.image_id + "'");

        if (j.contains("gt_boxes") && !j["gt_boxes"].is_null()) {
            const json& boxes = j["gt_boxes"];
            if (!boxes.is_array()) throw FormatError(ctx + ": gt_boxes must be an array");
            for (std::size_t b = 0; b < boxes.size(); ++b) {
                std::string bctx = ctx + ".gt_boxes[" + std::to_string(b) + "]";
                BBox box;
                try {
                    box = box_from_json(boxes[b]);
                } catch (const FormatError& err) {
                    throw FormatError(bctx + ": " + err.what());
                }
                if (!(0 <= box.x0 && box.x0 < box.x1 && box.x1 <= e.image_width && 0 <= box.y0 &&
                      box.y0 < box.y1 && box.y1 <= e.image_height)) {
                    throw FormatError(bctx + ": malformed box " + to_json(box).dump() +
                                      " for image " + std::to_string(e.image_width) + "x" +
                                      std::to_string(e.image_height));
                }
                e.gt_boxes.push_back(box);
            }
        }
        e.feature_file = (m.root_dir / e.feature_path).lexically_normal();
        if (e.gt_mask_path) e.gt_mask_file = (m.root_dir / *e.gt_mask_path).lexically_normal();
        m.entries.push_back(std::move(e));
    }
    return m;
}

DatasetManifest load_manifest(const fs::path& path) {
    std::string text = read_file_bytes(path);
    DatasetManifest m = parse_manifest(text, path.parent_path());
    m.digest = sha256_hex(text);
    return m;
}

json manifest_to_json(const DatasetManifest& m) {
    json entries = json::array();
    for (const auto& e : m.entries) {
        json j;
        j["image_id"] = e.image_id;
        j["feature_path"] = e.feature_path;
        j["image_width"] = e.image_width;
        j["image_height"] = e.image_height;
        if (e.class_id) j["class_id"] = *e.class_id;
        if (!e.gt_boxes.empty()) {
            json boxes = json::array();
            for (const auto& b : e.gt_boxes) boxes.push_back(to_json(b));
            j["gt_boxes"] = boxes;
        }
        if (e.gt_mask_path) j["gt_mask_path"] = *e.gt_mask_path;
        j["split"] = split_name(e.split);
        entries.push_back(std::move(j));
    }
    return json{{"version", m.version}, {"root", m.root}, {"metadata", m.metadata},
                {"entries", entries}};
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
    atomic_write(path, manifest_to_json(m).dump(2) + "\n");
}

ValidationReport validate_dataset(const DatasetManifest& m) {
    ValidationReport report;
    std::vector<std::optional<FeatureHeader>> headers(m.entries.size());
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const auto& e = m.entries[i];
        ++report.checked;
        try {
            headers[i] = read_feature_header(e.feature_file);
        } catch (const DataError& err) {
            report.failures.push_back({e.image_id, e.feature_file.string(), err.what()});
        }
        if (e.gt_mask_file) {
            if (!fs::exists(*e.gt_mask_file)) {
                report.failures.push_back(
                    {e.image_id, e.gt_mask_file->string(), "ground-truth mask file missing"});
            } else {
                try {
                    GrayImage mask = read_pgm(*e.gt_mask_file);
                    if (mask.width != e.image_width || mask.height != e.image_height)
                        report.failures.push_back(
                            {e.image_id, e.gt_mask_file->string(),
                             "mask is " + std::to_string(mask.width) + "x" +
                                 std::to_string(mask.height) + ", image is " +
                                 std::to_string(e.image_width) + "x" +
                                 std::to_string(e.image_height)});
                } catch (const DataError& err) {
                    report.failures.push_back({e.image_id, e.gt_mask_file->string(), err.what()});
                }
            }
        }
    }

    // Reference channel count: the most common one, earliest seen on ties.
    std::map<std::uint32_t, std::size_t> counts;
    std::vector<std::uint32_t> order;
    for (const auto& h : headers) {
        if (!h) continue;
        if (counts[h->channels]++ == 0) order.push_back(h->channels);
    }
    for (std::uint32_t c : order)
        if (!report.channels || counts[c] > counts[*report.channels]) report.channels = c;

    for (std::size_t i = 0; i < headers.size(); ++i) {
        if (headers[i] && headers[i]->channels != *report.channels) {
            const auto& e = m.entries[i];
            report.failures.push_back({e.image_id, e.feature_file.string(),
                                       "channel mismatch: C=" +
                                           std::to_string(headers[i]->channels) +
                                           ", dataset C=" + std::to_string(*report.channels)});
        }
    }
    return report;
}

void write_pgm(const GrayImage& img, const fs::path& path) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.width) * img.height)
        throw InvariantError("PGM image dimensions do not match pixel buffer");
    std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                      "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    atomic_write(path, out);
}

GrayImage read_pgm(const fs::path& path) {
    std::string bytes = read_file_bytes(path);
    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> int {
        skip_ws();
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw FormatError(path.string() + ": malformed PGM header");
        return std::stoi(bytes.substr(start, pos - start));
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
        throw FormatError(path.string() + ": not a binary PGM (P5)");
    pos = 2;
    GrayImage img;
    img.width = read_int();
    img.height = read_int();
    int maxval = read_int();
    if (maxval != 255) throw FormatError(path.string() + ": only 8-bit PGM supported");
    ++pos;  // single whitespace before raster
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    if (img.width <= 0 || img.height <= 0 || bytes.size() < pos + n)
        throw FormatError(path.string() + ": truncated PGM raster");
    img.pixels.assign(bytes.begin() + pos, bytes.begin() + pos + n);
    return img;
}

}  // namespace reprloc::featstore
