#include "cdfsod/evalmod.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <numeric>

namespace cdfsod {

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t(10);
    const double step = (0.95 - 0.5) / 9.0;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.5 + static_cast<double>(i) * step;
    t.back() = 0.95;
    return t;
}

std::vector<double> coco_recall_thresholds() {
    std::vector<double> r(101);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<double>(i) * 0.01;
    r.back() = 1.0;
    return r;
}

namespace {

struct ScoredMatch {
    double score;
    bool matched;
};

// Detections of one image and class, sorted by score and capped at max_dets.
std::vector<const Detection*> ranked(std::vector<const Detection*> dets, std::size_t max_dets) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
    if (dets.size() > max_dets) dets.resize(max_dets);
    return dets;
}

double average_precision(std::vector<ScoredMatch>& evals, std::size_t num_gt, const std::vector<double>& rec_thr) {
    std::stable_sort(evals.begin(), evals.end(),
                     [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
    std::vector<double> precision;
    std::vector<double> recall;
    precision.reserve(evals.size());
    recall.reserve(evals.size());
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (const auto& e : evals) {
        if (e.matched)
            ++tp;
        else
            ++fp;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    for (std::size_t i = precision.size(); i-- > 1;)
        if (precision[i] > precision[i - 1]) precision[i - 1] = precision[i];

    double sum = 0.0;
    for (double r : rec_thr) {
        auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / static_cast<double>(rec_thr.size());
}

}  // namespace

EvalReport coco_map(std::span<const Detection> dets, const DatasetSplit& gt, const EvalSettings& settings) {
    if (gt.annotations.empty()) throw Error(Errc::EmptyGroundTruth, "ground truth has no annotations");
    if (settings.iou_thresholds.empty()) throw Error(Errc::InvalidArgument, "no IoU thresholds");

    std::map<ImageId, std::size_t> image_index;
    for (std::size_t i = 0; i < gt.images.size(); ++i) image_index.emplace(gt.images[i].id, i);

    using Key = std::pair<std::size_t, CategoryId>;
    std::map<Key, std::vector<const Annotation*>> gts;
    std::map<Key, std::vector<const Detection*>> dts;
    std::map<CategoryId, std::size_t> gt_count;
    for (const auto& c : gt.categories) gt_count[c.id] = 0;
    for (const auto& a : gt.annotations) {
        gts[{image_index.at(a.image_id), a.category_id}].push_back(&a);
        ++gt_count[a.category_id];
    }
    for (const auto& d : dets) {
        auto it = image_index.find(d.image_id);
        if (it == image_index.end())
            throw Error(Errc::UnknownImageId, "detection references image " + std::to_string(d.image_id));
        if (!gt_count.contains(d.category_id)) continue;
        dts[{it->second, d.category_id}].push_back(&d);
    }

    const auto rec_thr = coco_recall_thresholds();
    const std::size_t n_thr = settings.iou_thresholds.size();
    EvalReport report;
    report.iou_thresholds = settings.iou_thresholds;
    report.map_per_threshold.assign(n_thr, 0.0);

    std::size_t n_classes = 0;
    for (const auto& [cat, count] : gt_count) {
        if (count == 0) continue;
        ++n_classes;
        // per threshold: evaluated detections pooled over images in image order
        std::vector<std::vector<ScoredMatch>> pooled(n_thr);
        for (std::size_t img = 0; img < gt.images.size(); ++img) {
            auto dit = dts.find({img, cat});
            if (dit == dts.end()) continue;
            const auto dlist = ranked(dit->second, settings.max_dets);
            static const std::vector<const Annotation*> kNone;
            auto git = gts.find({img, cat});
            const auto& glist = git == gts.end() ? kNone : git->second;

            for (std::size_t t = 0; t < n_thr; ++t) {
                std::vector<char> gt_taken(glist.size(), 0);
                for (const Detection* d : dlist) {
                    double best = std::min(settings.iou_thresholds[t], 1.0 - 1e-10);
                    std::ptrdiff_t m = -1;
                    for (std::size_t g = 0; g < glist.size(); ++g) {
                        if (gt_taken[g]) continue;
                        const double o = iou(d->box, glist[g]->box);
                        if (o < best) continue;
                        best = o;
                        m = static_cast<std::ptrdiff_t>(g);
                    }
                    if (m >= 0) gt_taken[static_cast<std::size_t>(m)] = 1;
                    pooled[t].push_back({d->score, m >= 0});
                }
            }
        }
        double class_sum = 0.0;
        for (std::size_t t = 0; t < n_thr; ++t) {
            const double ap = average_precision(pooled[t], count, rec_thr);
            report.map_per_threshold[t] += ap;
            class_sum += ap;
        }
        report.per_class_ap[cat] = class_sum / static_cast<double>(n_thr);
    }

    for (double& m : report.map_per_threshold) m /= static_cast<double>(n_classes);
    double total = 0.0;
    for (const auto& [cat, ap] : report.per_class_ap) total += ap;
    report.map = total / static_cast<double>(n_classes);
    return report;
}

nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
    for (const auto& [cat, ap] : report.per_class_ap) per_class[std::to_string(cat)] = ap;
    j["per_class_ap"] = per_class;
    j["map"] = report.map;
    j["iou_thresholds"] = report.iou_thresholds;
    j["map_per_threshold"] = report.map_per_threshold;
    return nlohmann::json::parse(j.dump());
}

double challenge_score(const ScoreCells& cells) {
    std::array<double, 3> shot_avg{};
    for (std::size_t s = 0; s < 3; ++s) shot_avg[s] = (cells[0][s] + cells[1][s] + cells[2][s]) / 3.0;
    return 2.0 * shot_avg[0] + shot_avg[1] + shot_avg[2];
}

double round_half_even(double value, int decimals) {
    const double scale = std::pow(10.0, decimals);
    const int saved = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const double r = std::nearbyint(value * scale) / scale;
    std::fesetround(saved);
    return r;
}

ScoreCard make_scorecard(const ScoreCells& cells) {
    for (const auto& row : cells)
        for (double v : row)
            if (!(v >= 0.0 && v <= 100.0)) throw Error(Errc::InvalidArgument, "mAP cells must lie in [0, 100]");
    ScoreCard card;
    card.cells = cells;
    card.score = challenge_score(cells);
    card.score_rounded = round_half_even(card.score, 2);
    return card;
}

nlohmann::json scorecard_to_json(const ScoreCard& card) {
    static const char* kDatasets[] = {"D1", "D2", "D3"};
    static const char* kShots[] = {"1shot", "5shot", "10shot"};
    nlohmann::ordered_json j;
    nlohmann::ordered_json cells = nlohmann::ordered_json::object();
    for (std::size_t d = 0; d < 3; ++d)
        for (std::size_t s = 0; s < 3; ++s) cells[std::string(kDatasets[d]) + "_" + kShots[s]] = card.cells[d][s];
    j["cells"] = cells;
    j["score"] = card.score_rounded;
    j["score_exact"] = card.score;
    return nlohmann::json::parse(j.dump());
}

double fbeta(std::size_t tp, std::size_t fp, std::size_t fn, double beta) {
    if (tp == 0) return 0.0;
    const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double b2 = beta * beta;
    const double denom = b2 * p + r;
    if (!(denom > 0.0)) return 0.0;
    return (1.0 + b2) * p * r / denom;
}

}  // namespace cdfsod
