#include "cdfsod/detcore.hpp"

#include "cdfsod/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace cdfsod {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

bool BBox::valid() const noexcept {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) && w > 0.0 &&
           h > 0.0;
}

BBox BBox::checked(double x, double y, double w, double h) {
    BBox b{x, y, w, h};
    if (!b.valid()) {
        std::ostringstream os;
        os << "box [" << x << ", " << y << ", " << w << ", " << h << "] must be finite with w, h > 0";
        throw Error(Errc::NonPositiveBox, os.str());
    }
    return b;
}

double iou(const BBox& a, const BBox& b) noexcept {
    const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
    const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

const ImageInfo* DatasetSplit::find_image(ImageId id) const noexcept {
    auto it = std::find_if(images.begin(), images.end(), [id](const ImageInfo& im) { return im.id == id; });
    return it == images.end() ? nullptr : &*it;
}

const Category* DatasetSplit::find_category(CategoryId id) const noexcept {
    auto it = std::find_if(categories.begin(), categories.end(), [id](const Category& c) { return c.id == id; });
    return it == categories.end() ? nullptr : &*it;
}

std::map<CategoryId, std::size_t> DatasetSplit::annotations_per_category() const {
    std::map<CategoryId, std::size_t> counts;
    for (const auto& c : categories) counts[c.id] = 0;
    for (const auto& a : annotations) ++counts[a.category_id];
    return counts;
}

void link_split(DatasetSplit& split) {
    std::set<ImageId> image_ids;
    for (const auto& im : split.images) {
        if (!image_ids.insert(im.id).second)
            throw Error(Errc::DuplicateId, "image id " + std::to_string(im.id) + " appears twice");
    }
    std::set<CategoryId> cat_ids;
    for (const auto& c : split.categories) {
        if (!cat_ids.insert(c.id).second)
            throw Error(Errc::DuplicateId, "category id " + std::to_string(c.id) + " appears twice");
    }
    std::set<AnnotationId> ann_ids;
    for (const auto& a : split.annotations) {
        if (!ann_ids.insert(a.id).second)
            throw Error(Errc::DuplicateId, "annotation id " + std::to_string(a.id) + " appears twice");
        if (!image_ids.contains(a.image_id))
            throw Error(Errc::DanglingReference, "annotation " + std::to_string(a.id) + " references missing image " +
                                                     std::to_string(a.image_id));
        if (!cat_ids.contains(a.category_id))
            throw Error(Errc::DanglingReference, "annotation " + std::to_string(a.id) +
                                                     " references missing category " + std::to_string(a.category_id));
        if (!a.box.valid())
            throw Error(Errc::NonPositiveBox, "annotation " + std::to_string(a.id) + " has a non-positive box");
    }

    split.shot.reset();
    const auto counts = split.annotations_per_category();
    if (!counts.empty()) {
        const std::size_t k = counts.begin()->second;
        const bool uniform = std::all_of(counts.begin(), counts.end(), [k](const auto& kv) { return kv.second == k; });
        if (uniform && (k == 1 || k == 5 || k == 10)) split.shot = static_cast<int>(k);
    }
}

namespace {

json parse_json(std::string_view text) {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        throw Error(Errc::MalformedJson, e.what());
    }
}

BBox box_from_json(const json& arr) {
    if (!arr.is_array() || arr.size() != 4)
        throw Error(Errc::MalformedJson, "bbox must be an array [x, y, w, h]");
    for (const auto& v : arr)
        if (!v.is_number()) throw Error(Errc::MalformedJson, "bbox entries must be numbers");
    return BBox::checked(arr[0].get<double>(), arr[1].get<double>(), arr[2].get<double>(), arr[3].get<double>());
}

const json& require_array(const json& root, const char* key) {
    auto it = root.find(key);
    if (it == root.end() || !it->is_array())
        throw Error(Errc::MalformedJson, std::string("missing array '") + key + "'");
    return *it;
}

template <typename T>
T required(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) throw Error(Errc::MalformedJson, std::string("missing field '") + key + "'");
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw Error(Errc::MalformedJson, std::string("field '") + key + "': " + e.what());
    }
}

ordered_json box_to_json(const BBox& b) { return ordered_json::array({b.x, b.y, b.w, b.h}); }

}  // namespace

DatasetSplit load_coco(std::string_view text) {
    const json root = parse_json(text);
    if (!root.is_object()) throw Error(Errc::MalformedJson, "COCO root must be an object");

    DatasetSplit split;
    for (const auto& im : require_array(root, "images")) {
        ImageInfo info;
        info.id = required<ImageId>(im, "id");
        info.width = im.value("width", 0.0);
        info.height = im.value("height", 0.0);
        info.file_name = im.value("file_name", std::string{});
        split.images.push_back(std::move(info));
    }
    for (const auto& c : require_array(root, "categories")) {
        split.categories.push_back({required<CategoryId>(c, "id"), c.value("name", std::string{})});
    }
    for (const auto& a : require_array(root, "annotations")) {
        Annotation ann;
        ann.id = required<AnnotationId>(a, "id");
        ann.image_id = required<ImageId>(a, "image_id");
        ann.category_id = required<CategoryId>(a, "category_id");
        auto bb = a.find("bbox");
        if (bb == a.end()) throw Error(Errc::MalformedJson, "annotation without bbox");
        ann.box = box_from_json(*bb);
        ann.is_ground_truth = !a.value("pseudo", false);
        if (auto se = a.find("source_entry"); se != a.end() && !se->is_null()) ann.source_entry = se->get<EntryId>();
        split.annotations.push_back(ann);
    }
    link_split(split);
    return split;
}

DatasetSplit load_coco_file(const std::filesystem::path& path) { return load_coco(read_text_file(path)); }

std::string emit_split(const DatasetSplit& split) {
    ordered_json root;
    root["images"] = ordered_json::array();
    for (const auto& im : split.images) {
        ordered_json j;
        j["id"] = im.id;
        j["width"] = im.width;
        j["height"] = im.height;
        j["file_name"] = im.file_name;
        root["images"].push_back(std::move(j));
    }
    root["annotations"] = ordered_json::array();
    for (const auto& a : split.annotations) {
        ordered_json j;
        j["id"] = a.id;
        j["image_id"] = a.image_id;
        j["category_id"] = a.category_id;
        j["bbox"] = box_to_json(a.box);
        j["area"] = a.box.w * a.box.h;
        j["iscrowd"] = 0;
        if (!a.is_ground_truth) j["pseudo"] = true;
        if (a.source_entry) j["source_entry"] = *a.source_entry;
        root["annotations"].push_back(std::move(j));
    }
    root["categories"] = ordered_json::array();
    for (const auto& c : split.categories) {
        ordered_json j;
        j["id"] = c.id;
        j["name"] = c.name;
        root["categories"].push_back(std::move(j));
    }
    return root.dump(1);
}

std::string emit_results(std::span<const Detection> dets, const DatasetSplit* target) {
    if (target) {
        for (const auto& d : dets)
            if (!target->find_image(d.image_id))
                throw Error(Errc::UnknownImageId, "detection references image " + std::to_string(d.image_id));
    }
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].image_id != dets[b].image_id) return dets[a].image_id < dets[b].image_id;
        return dets[a].score > dets[b].score;
    });
    ordered_json out = ordered_json::array();
    for (std::size_t i : order) {
        const auto& d = dets[i];
        ordered_json j;
        j["image_id"] = d.image_id;
        j["category_id"] = d.category_id;
        j["bbox"] = box_to_json(d.box);
        j["score"] = d.score;
        if (d.embedding_id) j["id"] = *d.embedding_id;
        out.push_back(std::move(j));
    }
    return out.dump();
}

std::vector<Detection> load_results(std::string_view text) {
    const json root = parse_json(text);
    if (!root.is_array()) throw Error(Errc::MalformedJson, "results must be a JSON array");
    std::vector<Detection> dets;
    dets.reserve(root.size());
    for (const auto& r : root) {
        Detection d;
        d.image_id = required<ImageId>(r, "image_id");
        d.category_id = r.value("category_id", CategoryId{0});
        auto bb = r.find("bbox");
        if (bb == r.end()) throw Error(Errc::MalformedJson, "result without bbox");
        d.box = box_from_json(*bb);
        d.score = required<double>(r, "score");
        if (!(d.score >= 0.0 && d.score <= 1.0))
            throw Error(Errc::MalformedJson, "score outside [0, 1]");
        if (auto id = r.find("id"); id != r.end() && !id->is_null()) d.embedding_id = id->get<EntryId>();
        dets.push_back(d);
    }
    return dets;
}

std::vector<Detection> load_results_file(const std::filesystem::path& path) {
    return load_results(read_text_file(path));
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(Errc::Io, "cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw Error(Errc::Io, "short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error(Errc::Io, "cannot rename onto " + path.string() + ": " + ec.message());
    }
}

}  // namespace cdfsod
