#pragma once

// Box geometry, detection records and COCO JSON ingestion/emission.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cdfsod {

using ImageId = std::int64_t;
using CategoryId = std::int64_t;
using AnnotationId = std::int64_t;
using EntryId = std::int64_t;

/// Axis-aligned box in COCO convention (left, top, width, height), pixels.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double right() const noexcept { return x + w; }
    double bottom() const noexcept { return y + h; }
    /// Area measured from corner coordinates so that it agrees bit-for-bit
    /// with the intersection computed in iou().
    double area() const noexcept { return (right() - x) * (bottom() - y); }
    bool valid() const noexcept;

    /// Throws NonPositiveBox when w/h are not strictly positive or any
    /// coordinate is non-finite.
    static BBox checked(double x, double y, double w, double h);

    friend bool operator==(const BBox&, const BBox&) = default;
};

/// Intersection over union with open intersection: touching boxes give 0.
double iou(const BBox& a, const BBox& b) noexcept;

struct Detection {
    ImageId image_id = 0;
    BBox box;
    CategoryId category_id = 0;
    double score = 0.0;
    // Entry in the proposal embedding store this detection was classified from.
    std::optional<EntryId> embedding_id;

    friend bool operator==(const Detection&, const Detection&) = default;
};

struct Annotation {
    ImageId image_id = 0;
    BBox box;
    CategoryId category_id = 0;
    AnnotationId id = 0;
    bool is_ground_truth = true;
    // For pseudo annotations: the proposal embedding the label was promoted from.
    std::optional<EntryId> source_entry;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct ImageInfo {
    ImageId id = 0;
    double width = 0.0;
    double height = 0.0;
    std::string file_name;

    friend bool operator==(const ImageInfo&, const ImageInfo&) = default;
};

struct Category {
    CategoryId id = 0;
    std::string name;

    friend bool operator==(const Category&, const Category&) = default;
};

struct DatasetSplit {
    std::vector<ImageInfo> images;
    std::vector<Annotation> annotations;
    std::vector<Category> categories;
    // K when every category carries exactly K annotations, K in {1, 5, 10}.
    std::optional<int> shot;

    const ImageInfo* find_image(ImageId id) const noexcept;
    const Category* find_category(CategoryId id) const noexcept;
    std::map<CategoryId, std::size_t> annotations_per_category() const;
};

/// Parses COCO JSON with images/annotations/categories arrays.
/// Errors: MalformedJson, DanglingReference, DuplicateId, NonPositiveBox.
DatasetSplit load_coco(std::string_view json);
DatasetSplit load_coco_file(const std::filesystem::path& path);

/// Checks cross references and infers `shot`. Used by load_coco and by
/// code that assembles splits in memory.
void link_split(DatasetSplit& split);

/// Serializes a split back to COCO JSON. Pseudo annotations carry
/// `"pseudo": true` and their `source_entry`.
std::string emit_split(const DatasetSplit& split);

/// COCO results array ordered by (image_id ascending, score descending),
/// stable for ties. When `target` is given, every image_id must exist in it
/// (UnknownImageId otherwise).
std::string emit_results(std::span<const Detection> dets, const DatasetSplit* target = nullptr);

/// Parses a COCO results array. The optional integer `id` field becomes the
/// detection's embedding_id; `category_id` defaults to 0 for proposals.
std::vector<Detection> load_results(std::string_view json);
std::vector<Detection> load_results_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace cdfsod
