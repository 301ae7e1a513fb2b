#pragma once

// Task configuration and the end-to-end pipelines driven by the CLI.

#include "cdfsod/detcore.hpp"
#include "cdfsod/embed.hpp"
#include "cdfsod/evalmod.hpp"
#include "cdfsod/matchdiff.hpp"
#include "cdfsod/postproc.hpp"
#include "cdfsod/proto.hpp"
#include "cdfsod/pseudo.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <variant>
#include <vector>

namespace cdfsod {

// --- post-processing chain -------------------------------------------------

struct NmsStep {
    double iou = 0.5;
    bool class_agnostic = false;
};
struct SoftNmsStep {
    double sigma = 0.5;
    double score_floor = 0.001;
};
struct ThresholdStep {
    double box_threshold = 0.1;
};
struct SizeFilterStep {
    double max_area_frac = 0.9;
};
struct TopkStep {
    std::size_t k = 100;
};
struct RestrictStep {
    std::set<CategoryId> allowed;
    RestrictMode mode = RestrictMode::Filter;
    std::optional<CategoryId> fixed_target;  // reclassify: fixed class, else nearest prototype
};
struct ConfidenceFloorStep {
    double floor = 0.8;
};

using PostStep =
    std::variant<NmsStep, SoftNmsStep, ThresholdStep, SizeFilterStep, TopkStep, RestrictStep, ConfidenceFloorStep>;

/// Parses `[{"op": "nms", "iou": 0.5}, ...]`. Throws Config on unknown ops.
std::vector<PostStep> parse_chain(const nlohmann::json& j);

struct ChainContext {
    const std::map<ImageId, ImageSize>* sizes = nullptr;
    const PrototypeSet* protos = nullptr;
    const EmbeddingStore* store = nullptr;
};

std::vector<Detection> apply_chain(std::vector<Detection> dets, std::span<const PostStep> chain,
                                   const ChainContext& ctx);

// --- configuration ---------------------------------------------------------

struct PipelineConfig {
    std::filesystem::path support_json;
    std::filesystem::path support_store;
    std::vector<std::filesystem::path> scale_stores;  // extra support stores, one per pyramid scale
    std::optional<std::filesystem::path> negatives_store;
    std::optional<std::filesystem::path> prototypes;  // prebuilt prototype file
    std::optional<std::filesystem::path> quality_weights;
    std::filesystem::path query_proposals;
    std::filesystem::path query_store;
    std::optional<std::filesystem::path> query_images;  // COCO file providing image sizes
    std::optional<std::filesystem::path> query_gt;
    std::optional<std::filesystem::path> threshold_gt;  // labeled split for F-beta threshold search
    std::filesystem::path out_dir = ".";

    PrototypeOptions proto;
    DiffusionConfig diffusion;
    bool diffusion_enabled = true;
    double min_score = 0.01;  // applied after diffusion, before post-processing
    std::vector<PostStep> chain{NmsStep{}};
    EvalSettings eval;
    PseudoLabelPolicy pseudo;
    int rounds = 0;
    std::vector<double> beta_schedule;
    std::uint64_t seed = 0;
};

/// Reads a JSON config; relative paths resolve against the config's
/// directory. Throws Config on missing or ill-typed fields.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);

// --- pipelines ---------------------------------------------------------------

/// Support annotations resolved to embeddings: ground truth by annotation id
/// in the support store, pseudo labels by source entry in the query store.
std::map<CategoryId, ClassInstances> gather_support_instances(const DatasetSplit& support,
                                                              std::span<const EmbeddingStore> support_scales,
                                                              const EmbeddingStore* query_store,
                                                              const std::map<AnnotationId, double>* quality,
                                                              double fuse_temperature);

struct MatchOutput {
    std::vector<Detection> detections;
    std::optional<EvalReport> report;
};

/// classify -> diffuse -> min-score -> refine -> post-processing chain.
std::vector<Detection> match_detections(const PipelineConfig& cfg, const PrototypeSet& protos,
                                        std::span<const Proposal> proposals, const EmbeddingStore& query_store,
                                        const std::map<ImageId, ImageSize>* sizes,
                                        const BoxRefiner& refiner = identity_refiner);

/// Loads everything named in `cfg`, runs the matcher, writes
/// out_dir/results.json and (with query_gt) out_dir/report.json.
MatchOutput run_match(const PipelineConfig& cfg);

/// Builds the prototype set described by `cfg` and writes it to `out`.
PrototypeSet run_proto_build(const PipelineConfig& cfg, const std::optional<std::filesystem::path>& out);

/// Iterative select -> merge -> re-match rounds. Writes
/// out_dir/round_<r>.json for r = 0..rounds (round 0 is the input support)
/// and returns the splits.
std::vector<DatasetSplit> run_pseudo_rounds(const PipelineConfig& cfg, int rounds, std::span<const double> beta_schedule);

/// Evaluates nine (results, gt) pairs ordered D1_1shot, D1_5shot, D1_10shot,
/// D2_1shot, ... and fills the score card with mAP percentages.
ScoreCard score_submission(std::span<const std::filesystem::path, 9> results,
                           std::span<const std::filesystem::path, 9> gts, const EvalSettings& settings = {});

struct SyntheticTaskOptions {
    std::size_t n_classes = 4;
    std::size_t per_class = 5;
    std::uint32_t dim = 16;
    double spread = 0.0;
    std::uint64_t seed = 0;
};

/// Writes a self-contained synthetic task (support/query COCO files,
/// embedding stores, proposals and config.json) into `dir`.
std::filesystem::path write_synthetic_task(const std::filesystem::path& dir, const SyntheticTaskOptions& opts);

/// In-memory synthetic task: support split, query GT, proposals and stores.
struct SyntheticTask {
    DatasetSplit support;
    DatasetSplit query_gt;
    std::vector<Detection> proposals;
    SyntheticClusters clusters;
};

SyntheticTask make_synthetic_task(const SyntheticTaskOptions& opts);

}  // namespace cdfsod
