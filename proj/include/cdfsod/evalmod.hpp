#pragma once

// COCO-style AP/mAP and the challenge's weighted Score.

#include "cdfsod/detcore.hpp"

#include <json.hpp>

#include <array>
#include <map>
#include <span>
#include <vector>

namespace cdfsod {

/// 0.50:0.05:0.95, generated the way pycocotools does (start + i * step).
std::vector<double> coco_iou_thresholds();

/// 101 recall sample points i * 0.01, as in pycocotools.
std::vector<double> coco_recall_thresholds();

struct EvalSettings {
    std::vector<double> iou_thresholds = coco_iou_thresholds();
    std::size_t max_dets = 100;  // per image and category
};

struct EvalReport {
    std::map<CategoryId, double> per_class_ap;  // mean over IoU thresholds
    double map = 0.0;
    std::vector<double> iou_thresholds;
    std::vector<double> map_per_threshold;  // aligned with iou_thresholds
};

/// COCO bbox AP without area ranges or crowd handling: per image and class,
/// detections (top max_dets by score) are greedily matched in score order to
/// the unmatched GT of highest IoU >= t; precision is made monotone and read
/// at the 101 recall points. Classes with no GT are excluded from the mean.
/// Detections of categories absent from `gt` are ignored.
/// Errors: EmptyGroundTruth, UnknownImageId.
EvalReport coco_map(std::span<const Detection> dets, const DatasetSplit& gt, const EvalSettings& settings = {});

nlohmann::json report_to_json(const EvalReport& report);

/// cells[dataset][shot], shot order 1, 5, 10; values are mAP percentages.
using ScoreCells = std::array<std::array<double, 3>, 3>;

/// 2 * avg(1-shot) + avg(5-shot) + avg(10-shot) across the three datasets.
double challenge_score(const ScoreCells& cells);

/// Round-half-even to `decimals` places.
double round_half_even(double value, int decimals);

struct ScoreCard {
    ScoreCells cells{};
    double score = 0.0;          // exact weighted total
    double score_rounded = 0.0;  // two decimals, half-even
};

/// Validates cells in [0, 100] (InvalidArgument otherwise) and scores them.
ScoreCard make_scorecard(const ScoreCells& cells);

nlohmann::json scorecard_to_json(const ScoreCard& card);

/// (1 + b^2) P R / (b^2 P + R); 0 when undefined.
double fbeta(std::size_t tp, std::size_t fp, std::size_t fn, double beta);

}  // namespace cdfsod
