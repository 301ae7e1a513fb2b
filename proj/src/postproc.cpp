#include "cdfsod/postproc.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

namespace cdfsod {

namespace {

using GroupKey = std::pair<ImageId, CategoryId>;

std::map<GroupKey, std::vector<std::size_t>> group(std::span<const Detection> dets, bool by_class) {
    std::map<GroupKey, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < dets.size(); ++i)
        groups[{dets[i].image_id, by_class ? dets[i].category_id : 0}].push_back(i);
    return groups;
}

void sort_by_score_desc(std::vector<std::size_t>& idx, std::span<const Detection> dets) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
}

std::vector<Detection> gather(std::span<const Detection> dets, const std::vector<char>& keep) {
    std::vector<Detection> out;
    for (std::size_t i = 0; i < dets.size(); ++i)
        if (keep[i]) out.push_back(dets[i]);
    return out;
}

}  // namespace

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh, bool class_agnostic) {
    std::vector<char> keep(dets.size(), 0);
    for (auto& [key, idx] : group(dets, !class_agnostic)) {
        sort_by_score_desc(idx, dets);
        std::vector<std::size_t> kept;
        for (std::size_t i : idx) {
            const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
                return iou(dets[i].box, dets[k].box) > iou_thresh;
            });
            if (!suppressed) {
                kept.push_back(i);
                keep[i] = 1;
            }
        }
    }
    return gather(dets, keep);
}

std::vector<Detection> soft_nms(std::span<const Detection> dets, double sigma, double score_floor) {
    if (!(sigma > 0.0)) throw Error(Errc::InvalidArgument, "soft-NMS sigma must be > 0");
    std::vector<Detection> out;
    for (auto& [key, idx] : group(dets, true)) {
        std::vector<Detection> pool;
        for (std::size_t i : idx) pool.push_back(dets[i]);
        while (!pool.empty()) {
            // first maximum wins ties
            auto best = std::max_element(pool.begin(), pool.end(),
                                         [](const Detection& a, const Detection& b) { return a.score < b.score; });
            if (best->score < score_floor) break;
            const Detection sel = *best;
            pool.erase(best);
            out.push_back(sel);
            for (auto& d : pool) {
                const double o = iou(sel.box, d.box);
                d.score *= std::exp(-(o * o) / sigma);
            }
        }
    }
    return out;
}

std::vector<Detection> wbf(std::span<const std::vector<Detection>> det_sets, double iou_thresh,
                           std::span<const double> weights) {
    if (det_sets.empty()) throw Error(Errc::EmptyInput, "WBF needs at least one detection set");
    std::vector<double> w(weights.begin(), weights.end());
    if (w.empty()) w.assign(det_sets.size(), 1.0);
    if (w.size() != det_sets.size()) throw Error(Errc::InvalidArgument, "one weight per detection set required");
    for (double x : w)
        if (!(x > 0.0)) throw Error(Errc::InvalidArgument, "WBF weights must be positive");
    const double weight_sum = std::accumulate(w.begin(), w.end(), 0.0);

    struct Member {
        ImageId image;
        CategoryId cat;
        double conf;  // score * set weight
        double x1, y1, x2, y2;
    };
    std::map<GroupKey, std::vector<Member>> groups;
    for (std::size_t s = 0; s < det_sets.size(); ++s) {
        for (const auto& d : det_sets[s]) {
            if (!(d.score > 0.0)) continue;
            groups[{d.image_id, d.category_id}].push_back(
                {d.image_id, d.category_id, d.score * w[s], d.box.x, d.box.y, d.box.right(), d.box.bottom()});
        }
    }

    std::vector<Detection> out;
    for (auto& [key, members] : groups) {
        std::stable_sort(members.begin(), members.end(),
                         [](const Member& a, const Member& b) { return a.conf > b.conf; });
        std::vector<std::vector<const Member*>> clusters;
        std::vector<BBox> fused;
        auto refuse = [](const std::vector<const Member*>& c) {
            double cs = 0.0, x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
            for (const Member* m : c) {
                cs += m->conf;
                x1 += m->conf * m->x1;
                y1 += m->conf * m->y1;
                x2 += m->conf * m->x2;
                y2 += m->conf * m->y2;
            }
            x1 /= cs;
            y1 /= cs;
            x2 /= cs;
            y2 /= cs;
            return BBox{x1, y1, x2 - x1, y2 - y1};
        };
        for (const auto& m : members) {
            const BBox mb{m.x1, m.y1, m.x2 - m.x1, m.y2 - m.y1};
            std::ptrdiff_t best = -1;
            double best_iou = -1.0;
            for (std::size_t c = 0; c < fused.size(); ++c) {
                const double o = iou(mb, fused[c]);
                if (o >= iou_thresh && o > best_iou) {
                    best_iou = o;
                    best = static_cast<std::ptrdiff_t>(c);
                }
            }
            if (best < 0) {
                clusters.push_back({&m});
                fused.push_back(mb);
            } else {
                clusters[static_cast<std::size_t>(best)].push_back(&m);
                fused[static_cast<std::size_t>(best)] = refuse(clusters[static_cast<std::size_t>(best)]);
            }
        }
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            double cs = 0.0;
            for (const Member* m : clusters[c]) cs += m->conf;
            const double n = static_cast<double>(clusters[c].size());
            const double contributing = std::min(static_cast<double>(w.size()), n);
            const double score = (cs / n) * contributing / weight_sum;
            out.push_back({key.first, fused[c], key.second, std::clamp(score, 0.0, 1.0), std::nullopt});
        }
    }
    return out;
}

std::vector<Detection> multiscale_tta_merge(std::span<const std::vector<Detection>> per_resolution,
                                            MergeStrategy strategy, double iou_thresh) {
    if (strategy == MergeStrategy::Wbf) return wbf(per_resolution, iou_thresh);
    std::vector<Detection> all;
    for (const auto& set : per_resolution) all.insert(all.end(), set.begin(), set.end());
    return nms(all, iou_thresh, false);
}

std::vector<Detection> threshold_filter(std::span<const Detection> dets, double box_threshold) {
    if (!(box_threshold >= 0.0 && box_threshold <= 1.0))
        throw Error(Errc::InvalidArgument, "box_threshold must be in [0, 1]");
    std::vector<Detection> out;
    std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
                 [&](const Detection& d) { return d.score >= box_threshold; });
    return out;
}

std::map<ImageId, ImageSize> image_sizes(const DatasetSplit& split) {
    std::map<ImageId, ImageSize> sizes;
    for (const auto& im : split.images) sizes[im.id] = {im.width, im.height};
    return sizes;
}

std::vector<Detection> size_filter(std::span<const Detection> dets, const std::map<ImageId, ImageSize>& sizes,
                                   double max_area_frac) {
    std::vector<Detection> out;
    for (const auto& d : dets) {
        auto it = sizes.find(d.image_id);
        if (it == sizes.end() || !(it->second.width > 0.0) || !(it->second.height > 0.0))
            throw Error(Errc::UnknownImageId, "no size for image " + std::to_string(d.image_id));
        const double frac = (d.box.w * d.box.h) / (it->second.width * it->second.height);
        if (frac <= max_area_frac) out.push_back(d);
    }
    return out;
}

std::vector<Detection> topk_per_image(std::span<const Detection> dets, std::size_t k) {
    std::map<ImageId, std::vector<std::size_t>> by_image;
    for (std::size_t i = 0; i < dets.size(); ++i) by_image[dets[i].image_id].push_back(i);
    std::vector<char> keep(dets.size(), 0);
    for (auto& [image, idx] : by_image) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            const auto& da = dets[a];
            const auto& db = dets[b];
            if (da.score != db.score) return da.score > db.score;
            return std::tie(da.category_id, da.box.x, da.box.y, da.box.w, da.box.h) <
                   std::tie(db.category_id, db.box.x, db.box.y, db.box.w, db.box.h);
        });
        for (std::size_t r = 0; r < std::min(k, idx.size()); ++r) keep[idx[r]] = 1;
    }
    return gather(dets, keep);
}

std::vector<Detection> restrict_classes(std::span<const Detection> dets, const std::set<CategoryId>& allowed,
                                        RestrictMode mode, const std::optional<RemapTarget>& target) {
    std::vector<Detection> out;
    if (mode == RestrictMode::Filter) {
        std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
                     [&](const Detection& d) { return allowed.contains(d.category_id); });
        return out;
    }
    if (!target) throw Error(Errc::InvalidArgument, "reclassify mode needs a remap target");
    if (allowed.empty()) throw Error(Errc::InvalidArgument, "reclassify mode needs a nonempty allowed set");

    if (const auto* fixed = std::get_if<FixedClass>(&*target)) {
        if (!allowed.contains(fixed->category_id))
            throw Error(Errc::InvalidArgument, "fixed remap class is not in the allowed set");
        for (auto d : dets) {
            d.category_id = fixed->category_id;
            out.push_back(d);
        }
        return out;
    }

    const auto& nearest = std::get<NearestPrototype>(*target);
    if (!nearest.protos || !nearest.store) throw Error(Errc::InvalidArgument, "nearest-prototype remap needs prototypes");
    for (auto d : dets) {
        if (allowed.contains(d.category_id)) {
            out.push_back(d);
            continue;
        }
        if (!d.embedding_id)
            throw Error(Errc::MissingEmbedding, "detection has no embedding for nearest-prototype remap");
        const Embedding q = nearest.store->embedding(*d.embedding_id);
        double best = -std::numeric_limits<double>::infinity();
        std::optional<CategoryId> best_cat;
        for (CategoryId c : allowed) {
            auto it = nearest.protos->class_protos.find(c);
            if (it == nearest.protos->class_protos.end()) continue;
            const double s = cosine(q, it->second);
            if (s > best) {
                best = s;
                best_cat = c;
            }
        }
        if (!best_cat) throw Error(Errc::InvalidArgument, "no allowed class has a prototype");
        d.category_id = *best_cat;
        out.push_back(d);
    }
    return out;
}

std::vector<Detection> phrase_map(std::span<const PhraseDetection> dets,
                                  const std::map<std::string, CategoryId>& mapping, UnknownPhrasePolicy policy) {
    std::vector<Detection> out;
    for (const auto& pd : dets) {
        auto it = mapping.find(pd.phrase);
        if (it == mapping.end()) {
            if (policy == UnknownPhrasePolicy::Error) throw Error(Errc::UnknownPhrase, "'" + pd.phrase + "'");
            continue;
        }
        Detection d = pd.det;
        d.category_id = it->second;
        out.push_back(d);
    }
    return out;
}

}  // namespace cdfsod
