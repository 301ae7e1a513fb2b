#pragma once

// Detection post-processing: suppression, fusion, filtering and label
// remapping rules.

#include "cdfsod/detcore.hpp"
#include "cdfsod/embed.hpp"
#include "cdfsod/proto.hpp"

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace cdfsod {

/// Greedy NMS per (image, class), or per image when class_agnostic. A box is
/// suppressed when its IoU with a kept box exceeds iou_thresh. Equal scores
/// keep the earlier input. Output preserves input order.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh = 0.5, bool class_agnostic = false);

/// Gaussian Soft-NMS per (image, class): each selected box decays the rest by
/// exp(-iou^2 / sigma); boxes whose score falls below score_floor are dropped.
/// Output is in selection order.
std::vector<Detection> soft_nms(std::span<const Detection> dets, double sigma, double score_floor);

/// Weighted Boxes Fusion over several detection sets (one per model or
/// resolution). Boxes of one (image, class) are visited in descending
/// weighted score; a box joins the same-class fused box it overlaps most when
/// that IoU is >= iou_thresh, otherwise it starts a new cluster.
/// Fused coordinates are the confidence-weighted mean, and the fused score is
/// mean(conf) * min(n_sets, cluster size) / sum(weights). Empty `weights`
/// means all ones. Zero-score boxes are skipped.
std::vector<Detection> wbf(std::span<const std::vector<Detection>> det_sets, double iou_thresh = 0.55,
                           std::span<const double> weights = {});

enum class MergeStrategy { Nms, Wbf };

/// Merges detections from several test-time resolutions, already mapped back
/// to original image coordinates.
std::vector<Detection> multiscale_tta_merge(std::span<const std::vector<Detection>> per_resolution,
                                            MergeStrategy strategy, double iou_thresh = 0.5);

/// Keeps score >= box_threshold.
std::vector<Detection> threshold_filter(std::span<const Detection> dets, double box_threshold);

struct ImageSize {
    double width = 0.0;
    double height = 0.0;
};

std::map<ImageId, ImageSize> image_sizes(const DatasetSplit& split);

/// Drops detections covering more than max_area_frac of their image.
/// Throws UnknownImageId when an image size is missing.
std::vector<Detection> size_filter(std::span<const Detection> dets, const std::map<ImageId, ImageSize>& sizes,
                                   double max_area_frac);

/// k best per image; ties by (category_id, box) ascending. Output preserves
/// input order.
std::vector<Detection> topk_per_image(std::span<const Detection> dets, std::size_t k);

/// Reclassification target: a fixed class, or the allowed class whose
/// prototype is nearest (cosine) to the detection's embedding.
struct FixedClass {
    CategoryId category_id = 0;
};
struct NearestPrototype {
    const PrototypeSet* protos = nullptr;
    const EmbeddingStore* store = nullptr;
};
using RemapTarget = std::variant<FixedClass, NearestPrototype>;

enum class RestrictMode { Filter, Reclassify };

/// Filter drops detections outside `allowed`; Reclassify relabels every
/// detection into `allowed` using `target` (required, else InvalidArgument).
std::vector<Detection> restrict_classes(std::span<const Detection> dets, const std::set<CategoryId>& allowed,
                                        RestrictMode mode, const std::optional<RemapTarget>& target = std::nullopt);

struct PhraseDetection {
    Detection det;
    std::string phrase;
};

enum class UnknownPhrasePolicy { Drop, Error };

/// Assigns category ids from grounding phrases, e.g. "sea cucumber" to the
/// holothurian id. Unknown phrases are dropped or raise UnknownPhrase.
std::vector<Detection> phrase_map(std::span<const PhraseDetection> dets,
                                  const std::map<std::string, CategoryId>& mapping,
                                  UnknownPhrasePolicy policy = UnknownPhrasePolicy::Drop);

}  // namespace cdfsod
