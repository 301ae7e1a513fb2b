#pragma once

// Pseudo-label selection, class-wise threshold optimization, merging with
// ground truth and pseudo-label quality scoring.

#include "cdfsod/detcore.hpp"
#include "cdfsod/evalmod.hpp"

#include <map>
#include <span>
#include <vector>

namespace cdfsod {

/// Returned by optimize_thresholds when no cut beats selecting nothing.
inline constexpr double kSelectNothingTau = 1.0 + 1e-9;

enum class DedupRule {
    None,
    SameClassGt,  // drop pseudo with IoU > dedup_iou_gt against a same-class GT box
    AnySupport,   // drop pseudo with IoU >= dedup_iou_support against any support box
    Both,
};

enum class MergeMode { ClassAgnosticNms, Append };

struct PseudoLabelPolicy {
    double tau = 0.5;
    double beta = 0.5;
    double dedup_iou_gt = 0.8;
    double dedup_iou_support = 0.70;
    DedupRule dedup = DedupRule::SameClassGt;
    MergeMode merge_mode = MergeMode::ClassAgnosticNms;
    double nms_iou = 0.5;

    /// Throws InvalidArgument when a field is out of range.
    void validate() const;
};

/// Strict selection: score > tau.
std::vector<Detection> select_pseudo(std::span<const Detection> dets, double tau);

/// Greedy per-image matching of `dets` (one class) against same-class GT in
/// descending score order: each detection takes the unmatched GT with the
/// highest IoU >= iou_match. Returns per-detection match flags aligned with
/// the input.
std::vector<bool> greedy_match(std::span<const Detection> dets, std::span<const Annotation> gt, double iou_match);

/// Per class, the tau maximizing F_beta of selecting {score > tau}. The
/// candidate cuts are the observed scores plus a cut above 1; ties prefer
/// the higher tau. For a cut at observed score c, the returned tau is the
/// largest double below c, so select_pseudo keeps exactly {score >= c}.
/// Classes without detections, or where nothing beats F = 0, get
/// kSelectNothingTau.
std::map<CategoryId, double> optimize_thresholds(std::span<const Detection> dets, const DatasetSplit& gt, double beta,
                                                 double iou_match = 0.5);

/// F_beta achieved by select_pseudo(dets of `cat`, tau) against the GT of `cat`.
double fbeta_at(std::span<const Detection> dets, const DatasetSplit& gt, CategoryId cat, double tau, double beta,
                double iou_match = 0.5);

/// Merges pseudo labels into the GT annotations. GT always survives. Pseudo
/// entries violating the active dedup rule are removed; in ClassAgnosticNms
/// mode the rest are suppressed against a GT-first pool (GT score 1.0, GT
/// wins ties) at policy.nms_iou. New annotations get ids above the GT
/// maximum and is_ground_truth = false.
std::vector<Annotation> merge_with_gt(std::span<const Detection> pseudo, std::span<const Annotation> gt,
                                      const PseudoLabelPolicy& policy);

/// Pseudo-label quality proxy: keep predictions with IoU > iou_floor against
/// some same-class GT box of the same image, then COCO mAP of the kept set.
/// Throws EmptyGroundTruth.
double fsod_map(std::span<const Detection> pseudo, const DatasetSplit& few_shot_gt, double iou_floor = 0.3,
                const EvalSettings& settings = {});

/// Keeps score >= floor.
std::vector<Detection> confidence_floor(std::span<const Detection> dets, double floor = 0.8);

}  // namespace cdfsod
