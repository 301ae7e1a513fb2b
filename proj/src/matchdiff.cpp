#include "cdfsod/matchdiff.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace cdfsod {

std::vector<Proposal> proposals_from_results(std::span<const Detection> results) {
    std::vector<Proposal> out;
    out.reserve(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        out.push_back({r.image_id, r.box, r.score, r.embedding_id.value_or(static_cast<EntryId>(i))});
    }
    return out;
}

std::vector<Detection> classify(std::span<const Proposal> proposals, const PrototypeSet& protos,
                                const EmbeddingStore& store, bool fuse_objectness) {
    if (protos.class_protos.empty()) throw Error(Errc::EmptyClass, "prototype set has no classes");
    std::vector<Detection> out;
    out.reserve(proposals.size());
    for (const auto& p : proposals) {
        if (!(p.objectness >= 0.0 && p.objectness <= 1.0))
            throw Error(Errc::InvalidArgument, "objectness outside [0, 1]");
        const Embedding q = store.embedding(p.embedding_id);

        CategoryId best_cat = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& [cat, proto] : protos.class_protos) {
            const double c = cosine(q, proto);
            if (c > best) {
                best = c;
                best_cat = cat;
            }
        }
        double best_bg = -std::numeric_limits<double>::infinity();
        for (const auto& bg : protos.bg_protos) best_bg = std::max(best_bg, cosine(q, bg));
        if (best_bg > best) continue;

        double score = std::clamp(0.5 * (best + 1.0), 0.0, 1.0);
        if (fuse_objectness) score = std::sqrt(score * p.objectness);
        out.push_back({p.image_id, p.box, best_cat, score, p.embedding_id});
    }
    return out;
}

std::vector<Detection> diffuse(std::span<const Detection> dets, const DiffusionConfig& cfg) {
    if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0)) throw Error(Errc::InvalidArgument, "diffusion alpha must be in [0, 1)");
    if (cfg.steps < 0) throw Error(Errc::InvalidArgument, "diffusion steps must be >= 0");

    std::vector<Detection> out(dets.begin(), dets.end());
    std::map<ImageId, std::vector<std::size_t>> by_image;
    for (std::size_t i = 0; i < out.size(); ++i) by_image[out[i].image_id].push_back(i);

    for (const auto& [image, members] : by_image) {
        const std::size_t n = members.size();
        // Sparse row-stochastic transition matrix as adjacency lists.
        std::vector<std::vector<std::pair<std::size_t, double>>> rows(n);
        for (std::size_t a = 0; a < n; ++a) {
            double total = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                if (a == b) continue;
                const double w = iou(out[members[a]].box, out[members[b]].box);
                if (w > cfg.edge_iou_min && w > 0.0) {
                    rows[a].emplace_back(b, w);
                    total += w;
                }
            }
            if (rows[a].empty()) {
                rows[a].emplace_back(a, 1.0);
            } else {
                for (auto& [b, w] : rows[a]) w /= total;
            }
        }

        std::vector<double> s0(n);
        for (std::size_t a = 0; a < n; ++a) s0[a] = out[members[a]].score;
        std::vector<double> s = s0;
        std::vector<double> next(n);
        for (int t = 0; t < cfg.steps; ++t) {
            for (std::size_t a = 0; a < n; ++a) {
                double ws = 0.0;
                for (const auto& [b, w] : rows[a]) ws += w * s[b];
                next[a] = (1.0 - cfg.alpha) * s0[a] + cfg.alpha * ws;
            }
            s.swap(next);
        }
        for (std::size_t a = 0; a < n; ++a) out[members[a]].score = std::clamp(s[a], 0.0, 1.0);
    }
    return out;
}

BBox identity_refiner(const Detection& d) { return d.box; }

std::vector<Detection> refine_boxes(std::span<const Detection> dets, const BoxRefiner& refiner) {
    std::vector<Detection> out;
    out.reserve(dets.size());
    for (const auto& d : dets) {
        Detection r = d;
        r.box = refiner(d);
        if (!r.box.valid()) throw Error(Errc::RefinerFailure, "refiner produced a non-positive box");
        out.push_back(r);
    }
    return out;
}

}  // namespace cdfsod
