#pragma once

// Prototype matching of category-agnostic proposals and graph diffusion of
// their confidences over the proposal-overlap graph.

#include "cdfsod/detcore.hpp"
#include "cdfsod/embed.hpp"
#include "cdfsod/proto.hpp"

#include <functional>
#include <span>
#include <vector>

namespace cdfsod {

struct Proposal {
    ImageId image_id = 0;
    BBox box;
    double objectness = 1.0;
    EntryId embedding_id = 0;
};

/// Proposals ingested from a COCO results array: objectness in `score`,
/// embedding entry in `id` (array position when absent).
std::vector<Proposal> proposals_from_results(std::span<const Detection> results);

struct DiffusionConfig {
    int steps = 30;
    double alpha = 0.3;
    double edge_iou_min = 0.0;  // edges need iou > edge_iou_min
    bool fuse_objectness = false;
};

/// Labels every proposal with its argmax-cosine class. Score is (cos + 1) / 2,
/// or sqrt(mapped * objectness) when `fuse_objectness`. A proposal whose best
/// background cosine beats its best class cosine is dropped. Ties between
/// classes go to the smaller category id. Throws MissingEmbedding.
std::vector<Detection> classify(std::span<const Proposal> proposals, const PrototypeSet& protos,
                                const EmbeddingStore& store, bool fuse_objectness = false);

/// Per image: W is the row-normalized IoU adjacency over pairs with
/// iou > edge_iou_min (isolated nodes get a self-loop), and
/// s <- (1 - alpha) s0 + alpha W s runs for cfg.steps iterations.
/// Output keeps input order; only scores change.
std::vector<Detection> diffuse(std::span<const Detection> dets, const DiffusionConfig& cfg);

/// Box refinement hook (mask-based refiners plug in here). A refiner throws
/// Error(RefinerFailure) to abort.
using BoxRefiner = std::function<BBox(const Detection&)>;

BBox identity_refiner(const Detection& d);

std::vector<Detection> refine_boxes(std::span<const Detection> dets, const BoxRefiner& refiner);

}  // namespace cdfsod
