#include "cdfsod/pseudo.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace cdfsod {

void PseudoLabelPolicy::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw Error(Errc::InvalidArgument, "tau must be in [0, 1]");
    if (!(beta > 0.0)) throw Error(Errc::InvalidArgument, "beta must be > 0");
    if (!(dedup_iou_gt > 0.0 && dedup_iou_gt <= 1.0)) throw Error(Errc::InvalidArgument, "dedup_iou_gt must be in (0, 1]");
    if (!(dedup_iou_support > 0.0 && dedup_iou_support <= 1.0))
        throw Error(Errc::InvalidArgument, "dedup_iou_support must be in (0, 1]");
    if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw Error(Errc::InvalidArgument, "nms_iou must be in [0, 1]");
}

std::vector<Detection> select_pseudo(std::span<const Detection> dets, double tau) {
    if (std::isnan(tau)) throw Error(Errc::InvalidArgument, "tau is NaN");
    std::vector<Detection> out;
    std::copy_if(dets.begin(), dets.end(), std::back_inserter(out), [tau](const Detection& d) { return d.score > tau; });
    return out;
}

std::vector<bool> greedy_match(std::span<const Detection> dets, std::span<const Annotation> gt, double iou_match) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<bool> matched(dets.size(), false);
    std::vector<char> taken(gt.size(), 0);
    for (std::size_t i : order) {
        const auto& d = dets[i];
        double best = iou_match;
        std::ptrdiff_t m = -1;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            if (taken[g] || gt[g].image_id != d.image_id || gt[g].category_id != d.category_id) continue;
            const double o = iou(d.box, gt[g].box);
            if (o >= best && (m < 0 || o > best)) {
                best = o;
                m = static_cast<std::ptrdiff_t>(g);
            }
        }
        if (m >= 0) {
            taken[static_cast<std::size_t>(m)] = 1;
            matched[i] = true;
        }
    }
    return matched;
}

namespace {

std::vector<Detection> of_class(std::span<const Detection> dets, CategoryId cat) {
    std::vector<Detection> out;
    std::copy_if(dets.begin(), dets.end(), std::back_inserter(out), [cat](const Detection& d) { return d.category_id == cat; });
    return out;
}

std::vector<Annotation> gt_of_class(const DatasetSplit& gt, CategoryId cat) {
    std::vector<Annotation> out;
    std::copy_if(gt.annotations.begin(), gt.annotations.end(), std::back_inserter(out),
                 [cat](const Annotation& a) { return a.category_id == cat; });
    return out;
}

}  // namespace

double fbeta_at(std::span<const Detection> dets, const DatasetSplit& gt, CategoryId cat, double tau, double beta,
                double iou_match) {
    const auto kept = select_pseudo(of_class(dets, cat), tau);
    const auto g = gt_of_class(gt, cat);
    const auto m = greedy_match(kept, g, iou_match);
    const auto tp = static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    return fbeta(tp, kept.size() - tp, g.size() - tp, beta);
}

std::map<CategoryId, double> optimize_thresholds(std::span<const Detection> dets, const DatasetSplit& gt, double beta,
                                                 double iou_match) {
    if (!(beta > 0.0)) throw Error(Errc::InvalidArgument, "beta must be > 0");
    for (const auto& d : dets)
        if (!gt.find_image(d.image_id))
            throw Error(Errc::UnknownImageId, "detection references image " + std::to_string(d.image_id));

    std::set<CategoryId> classes;
    for (const auto& c : gt.categories) classes.insert(c.id);
    for (const auto& d : dets) classes.insert(d.category_id);

    std::map<CategoryId, double> taus;
    for (CategoryId cat : classes) {
        const auto cd = of_class(dets, cat);
        const auto g = gt_of_class(gt, cat);
        taus[cat] = kSelectNothingTau;
        if (cd.empty()) continue;

        // Score-ordered greedy matching restricted to {s >= c} is a prefix of
        // the full matching, so one pass yields every cut.
        const auto matched = greedy_match(cd, g, iou_match);
        std::vector<std::size_t> order(cd.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cd[a].score > cd[b].score; });

        double best_f = 0.0;
        std::size_t tp = 0;
        std::size_t n = 0;
        for (std::size_t r = 0; r < order.size(); ++r) {
            ++n;
            if (matched[order[r]]) ++tp;
            const double c = cd[order[r]].score;
            if (r + 1 < order.size() && cd[order[r + 1]].score == c) continue;  // finish the tie group
            const double f = fbeta(tp, n - tp, g.size() - tp, beta);
            if (f > best_f) {
                best_f = f;
                taus[cat] = std::nextafter(c, -std::numeric_limits<double>::infinity());
            }
        }
    }
    return taus;
}

std::vector<Annotation> merge_with_gt(std::span<const Detection> pseudo, std::span<const Annotation> gt,
                                      const PseudoLabelPolicy& policy) {
    policy.validate();
    std::vector<Annotation> out(gt.begin(), gt.end());

    auto violates = [&](const Detection& d) {
        for (const auto& g : gt) {
            if (g.image_id != d.image_id) continue;
            const double o = iou(d.box, g.box);
            const bool same_class_rule = policy.dedup == DedupRule::SameClassGt || policy.dedup == DedupRule::Both;
            const bool support_rule = policy.dedup == DedupRule::AnySupport || policy.dedup == DedupRule::Both;
            if (same_class_rule && g.category_id == d.category_id && o > policy.dedup_iou_gt) return true;
            if (support_rule && o >= policy.dedup_iou_support) return true;
        }
        return false;
    };

    std::vector<Detection> survivors;
    for (const auto& d : pseudo)
        if (!violates(d)) survivors.push_back(d);

    if (policy.merge_mode == MergeMode::ClassAgnosticNms) {
        std::stable_sort(survivors.begin(), survivors.end(),
                         [](const Detection& a, const Detection& b) { return a.score > b.score; });
        std::vector<std::pair<ImageId, BBox>> kept;
        for (const auto& g : gt) kept.emplace_back(g.image_id, g.box);
        std::vector<Detection> nms_kept;
        for (const auto& d : survivors) {
            const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const auto& k) {
                return k.first == d.image_id && iou(k.second, d.box) > policy.nms_iou;
            });
            if (suppressed) continue;
            kept.emplace_back(d.image_id, d.box);
            nms_kept.push_back(d);
        }
        survivors = std::move(nms_kept);
    }

    AnnotationId next_id = 1;
    for (const auto& g : gt) next_id = std::max(next_id, g.id + 1);
    for (const auto& d : survivors) {
        Annotation a;
        a.image_id = d.image_id;
        a.box = d.box;
        a.category_id = d.category_id;
        a.id = next_id++;
        a.is_ground_truth = false;
        a.source_entry = d.embedding_id;
        out.push_back(a);
    }
    return out;
}

double fsod_map(std::span<const Detection> pseudo, const DatasetSplit& few_shot_gt, double iou_floor,
                const EvalSettings& settings) {
    if (few_shot_gt.annotations.empty()) throw Error(Errc::EmptyGroundTruth, "few-shot ground truth is empty");
    std::vector<Detection> kept;
    for (const auto& d : pseudo) {
        const bool overlaps = std::any_of(few_shot_gt.annotations.begin(), few_shot_gt.annotations.end(),
                                          [&](const Annotation& g) {
                                              return g.image_id == d.image_id && g.category_id == d.category_id &&
                                                     iou(g.box, d.box) > iou_floor;
                                          });
        if (overlaps) kept.push_back(d);
    }
    return coco_map(kept, few_shot_gt, settings).map;
}

std::vector<Detection> confidence_floor(std::span<const Detection> dets, double floor) {
    std::vector<Detection> out;
    std::copy_if(dets.begin(), dets.end(), std::back_inserter(out), [floor](const Detection& d) { return d.score >= floor; });
    return out;
}

}  // namespace cdfsod
