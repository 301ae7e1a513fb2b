#include "cdfsod/pipeline.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <set>

namespace cdfsod {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return fallback;
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw Error(Errc::Config, std::string("field '") + key + "': " + e.what());
    }
}

// Rethrows module errors with the offending file attached.
template <typename F>
auto with_file(const fs::path& path, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// chain

std::vector<PostStep> parse_chain(const json& j) {
    if (!j.is_array()) throw Error(Errc::Config, "post-processing chain must be an array");
    std::vector<PostStep> chain;
    for (const auto& s : j) {
        const auto op = get_or<std::string>(s, "op", "");
        if (op == "nms") {
            chain.push_back(NmsStep{get_or(s, "iou", 0.5), get_or(s, "class_agnostic", false)});
        } else if (op == "soft_nms") {
            chain.push_back(SoftNmsStep{get_or(s, "sigma", 0.5), get_or(s, "score_floor", 0.001)});
        } else if (op == "threshold") {
            chain.push_back(ThresholdStep{get_or(s, "box_threshold", 0.1)});
        } else if (op == "size_filter") {
            chain.push_back(SizeFilterStep{get_or(s, "max_area_frac", 0.9)});
        } else if (op == "topk") {
            chain.push_back(TopkStep{get_or<std::size_t>(s, "k", 100)});
        } else if (op == "restrict") {
            RestrictStep r;
            for (CategoryId c : get_or<std::vector<CategoryId>>(s, "allowed", {})) r.allowed.insert(c);
            const auto mode = get_or<std::string>(s, "mode", "filter");
            if (mode == "filter") {
                r.mode = RestrictMode::Filter;
            } else if (mode == "reclassify") {
                r.mode = RestrictMode::Reclassify;
            } else {
                throw Error(Errc::Config, "restrict mode must be 'filter' or 'reclassify'");
            }
            if (auto t = s.find("target"); t != s.end() && t->is_number_integer()) r.fixed_target = t->get<CategoryId>();
            chain.push_back(std::move(r));
        } else if (op == "confidence_floor") {
            chain.push_back(ConfidenceFloorStep{get_or(s, "floor", 0.8)});
        } else {
            throw Error(Errc::Config, "unknown post-processing op '" + op + "'");
        }
    }
    return chain;
}

std::vector<Detection> apply_chain(std::vector<Detection> dets, std::span<const PostStep> chain,
                                   const ChainContext& ctx) {
    for (const auto& step : chain) {
        dets = std::visit(
            [&](const auto& s) -> std::vector<Detection> {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, NmsStep>) {
                    return nms(dets, s.iou, s.class_agnostic);
                } else if constexpr (std::is_same_v<S, SoftNmsStep>) {
                    return soft_nms(dets, s.sigma, s.score_floor);
                } else if constexpr (std::is_same_v<S, ThresholdStep>) {
                    return threshold_filter(dets, s.box_threshold);
                } else if constexpr (std::is_same_v<S, SizeFilterStep>) {
                    if (!ctx.sizes) throw Error(Errc::Config, "size_filter needs image sizes (query_images)");
                    return size_filter(dets, *ctx.sizes, s.max_area_frac);
                } else if constexpr (std::is_same_v<S, TopkStep>) {
                    return topk_per_image(dets, s.k);
                } else if constexpr (std::is_same_v<S, RestrictStep>) {
                    std::optional<RemapTarget> target;
                    if (s.fixed_target)
                        target = FixedClass{*s.fixed_target};
                    else if (ctx.protos && ctx.store)
                        target = NearestPrototype{ctx.protos, ctx.store};
                    return restrict_classes(dets, s.allowed, s.mode, target);
                } else {
                    return confidence_floor(dets, s.floor);
                }
            },
            step);
    }
    return dets;
}

// ---------------------------------------------------------------------------
// config

PipelineConfig parse_config(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw Error(Errc::Config, "config root must be an object");
    auto path_of = [&](const char* key) -> std::optional<fs::path> {
        auto s = get_or<std::string>(j, key, "");
        if (s.empty()) return std::nullopt;
        fs::path p(s);
        return p.is_absolute() ? p : base_dir / p;
    };
    auto required_path = [&](const char* key) {
        auto p = path_of(key);
        if (!p) throw Error(Errc::Config, std::string("missing path '") + key + "'");
        return *p;
    };

    PipelineConfig cfg;
    cfg.support_json = required_path("support_json");
    cfg.support_store = required_path("support_store");
    cfg.query_proposals = required_path("query_proposals");
    cfg.query_store = required_path("query_store");
    for (const auto& s : get_or<std::vector<std::string>>(j, "scale_stores", {})) {
        fs::path p(s);
        cfg.scale_stores.push_back(p.is_absolute() ? p : base_dir / p);
    }
    cfg.negatives_store = path_of("negatives_store");
    cfg.prototypes = path_of("prototypes");
    cfg.quality_weights = path_of("quality_weights");
    cfg.query_images = path_of("query_images");
    cfg.query_gt = path_of("query_gt");
    cfg.threshold_gt = path_of("threshold_gt");
    cfg.out_dir = path_of("out_dir").value_or(base_dir);

    if (auto p = j.find("proto"); p != j.end()) {
        cfg.proto.alpha = get_or(*p, "alpha", cfg.proto.alpha);
        cfg.proto.temperature_fuse = get_or(*p, "temperature_fuse", cfg.proto.temperature_fuse);
        cfg.proto.n_bg = get_or(*p, "n_bg", cfg.proto.n_bg);
    }
    if (auto d = j.find("diffusion"); d != j.end()) {
        cfg.diffusion.steps = get_or(*d, "steps", cfg.diffusion.steps);
        cfg.diffusion.alpha = get_or(*d, "alpha", cfg.diffusion.alpha);
        cfg.diffusion.edge_iou_min = get_or(*d, "edge_iou_min", cfg.diffusion.edge_iou_min);
        cfg.diffusion.fuse_objectness = get_or(*d, "fuse_objectness", cfg.diffusion.fuse_objectness);
        cfg.diffusion_enabled = get_or(*d, "enabled", true);
    }
    cfg.min_score = get_or(j, "min_score", cfg.min_score);
    if (auto c = j.find("postproc"); c != j.end()) cfg.chain = parse_chain(*c);
    if (auto e = j.find("eval"); e != j.end()) {
        cfg.eval.max_dets = get_or(*e, "max_dets", cfg.eval.max_dets);
        if (e->contains("iou_thresholds"))
            cfg.eval.iou_thresholds = get_or<std::vector<double>>(*e, "iou_thresholds", {});
    }
    if (auto p = j.find("pseudo"); p != j.end()) {
        auto& pol = cfg.pseudo;
        pol.tau = get_or(*p, "tau", pol.tau);
        pol.beta = get_or(*p, "beta", pol.beta);
        pol.dedup_iou_gt = get_or(*p, "dedup_iou_gt", pol.dedup_iou_gt);
        pol.dedup_iou_support = get_or(*p, "dedup_iou_support", pol.dedup_iou_support);
        pol.nms_iou = get_or(*p, "nms_iou", pol.nms_iou);
        const auto dedup = get_or<std::string>(*p, "dedup", "same_class_gt");
        if (dedup == "none")
            pol.dedup = DedupRule::None;
        else if (dedup == "same_class_gt")
            pol.dedup = DedupRule::SameClassGt;
        else if (dedup == "any_support")
            pol.dedup = DedupRule::AnySupport;
        else if (dedup == "both")
            pol.dedup = DedupRule::Both;
        else
            throw Error(Errc::Config, "unknown dedup rule '" + dedup + "'");
        const auto merge = get_or<std::string>(*p, "merge_mode", "class_agnostic_nms");
        if (merge == "class_agnostic_nms")
            pol.merge_mode = MergeMode::ClassAgnosticNms;
        else if (merge == "append")
            pol.merge_mode = MergeMode::Append;
        else
            throw Error(Errc::Config, "unknown merge mode '" + merge + "'");
        cfg.rounds = get_or(*p, "rounds", cfg.rounds);
        cfg.beta_schedule = get_or<std::vector<double>>(*p, "beta_schedule", {});
        try {
            pol.validate();
        } catch (const Error& e) {
            throw Error(Errc::Config, e.what());
        }
    }
    cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
    return cfg;
}

PipelineConfig load_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw Error(Errc::Config, path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw Error(Errc::Config, e.what());
    }
    return parse_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// pipelines

std::map<CategoryId, ClassInstances> gather_support_instances(const DatasetSplit& support,
                                                              std::span<const EmbeddingStore> support_scales,
                                                              const EmbeddingStore* query_store,
                                                              const std::map<AnnotationId, double>* quality,
                                                              double fuse_temperature) {
    std::map<CategoryId, ClassInstances> per_class;
    for (const auto& c : support.categories) per_class[c.id];
    for (const auto& a : support.annotations) {
        Embedding e;
        if (!a.is_ground_truth) {
            if (!a.source_entry || !query_store)
                throw Error(Errc::MissingEmbedding, "pseudo annotation " + std::to_string(a.id) + " has no source entry");
            e = query_store->embedding(*a.source_entry);
        } else {
            std::vector<ScaledEmbedding> scaled;
            for (const auto& store : support_scales) {
                if (auto ord = store.find(a.id))
                    scaled.push_back({store.meta(*ord).scale.value_or(1.0), store.embedding_at(*ord)});
            }
            if (scaled.empty())
                throw Error(Errc::MissingEmbedding, "no support embedding for annotation " + std::to_string(a.id));
            e = scaled.size() == 1 ? scaled.front().embedding : multiscale_fuse(scaled, fuse_temperature);
        }
        auto& ci = per_class[a.category_id];
        ci.instances.push_back(std::move(e));
        if (quality) {
            auto it = quality->find(a.id);
            ci.weights.push_back(it == quality->end() ? 0.0 : it->second);
        }
    }
    // Categories without support cannot be matched.
    for (auto it = per_class.begin(); it != per_class.end();) {
        if (it->second.instances.empty())
            it = per_class.erase(it);
        else
            ++it;
    }
    return per_class;
}

std::vector<Detection> match_detections(const PipelineConfig& cfg, const PrototypeSet& protos,
                                        std::span<const Proposal> proposals, const EmbeddingStore& query_store,
                                        const std::map<ImageId, ImageSize>* sizes, const BoxRefiner& refiner) {
    auto dets = classify(proposals, protos, query_store, cfg.diffusion.fuse_objectness);
    if (cfg.diffusion_enabled) dets = diffuse(dets, cfg.diffusion);
    dets = threshold_filter(dets, cfg.min_score);
    dets = refine_boxes(dets, refiner);
    return apply_chain(std::move(dets), cfg.chain, ChainContext{sizes, &protos, &query_store});
}

namespace {

struct LoadedTask {
    DatasetSplit support;
    std::vector<EmbeddingStore> support_scales;
    EmbeddingStore query_store;
    std::vector<Proposal> proposals;
    std::optional<DatasetSplit> query_images;
    std::optional<DatasetSplit> query_gt;
    std::vector<Embedding> negatives;
    std::optional<std::map<AnnotationId, double>> quality;
};

LoadedTask load_task(const PipelineConfig& cfg) {
    LoadedTask t;
    t.support = with_file(cfg.support_json, [&] { return load_coco_file(cfg.support_json); });
    t.support_scales.push_back(with_file(cfg.support_store, [&] { return read_store(cfg.support_store); }));
    for (const auto& p : cfg.scale_stores) t.support_scales.push_back(with_file(p, [&] { return read_store(p); }));
    t.query_store = with_file(cfg.query_store, [&] { return read_store(cfg.query_store); });
    const auto results = with_file(cfg.query_proposals, [&] { return load_results_file(cfg.query_proposals); });
    t.proposals = proposals_from_results(results);
    if (cfg.query_gt) t.query_gt = with_file(*cfg.query_gt, [&] { return load_coco_file(*cfg.query_gt); });
    if (cfg.query_images)
        t.query_images = with_file(*cfg.query_images, [&] { return load_coco_file(*cfg.query_images); });
    else if (t.query_gt)
        t.query_images = t.query_gt;
    if (cfg.negatives_store) {
        const auto neg = with_file(*cfg.negatives_store, [&] { return read_store(*cfg.negatives_store); });
        for (std::size_t i = 0; i < neg.size(); ++i) t.negatives.push_back(neg.embedding_at(i));
    }
    if (cfg.quality_weights) {
        const json q = with_file(*cfg.quality_weights, [&] {
            try {
                return json::parse(read_text_file(*cfg.quality_weights));
            } catch (const json::parse_error& e) {
                throw Error(Errc::MalformedJson, e.what());
            }
        });
        std::map<AnnotationId, double> w;
        for (const auto& [k, v] : q.items()) w[std::stoll(k)] = v.get<double>();
        t.quality = std::move(w);
    }
    return t;
}

PrototypeSet prototypes_for(const PipelineConfig& cfg, const LoadedTask& t, const DatasetSplit& support) {
    if (cfg.prototypes && support.annotations.size() == t.support.annotations.size()) {
        return with_file(*cfg.prototypes, [&] {
            try {
                return prototypes_from_json(json::parse(read_text_file(*cfg.prototypes)));
            } catch (const json::parse_error& e) {
                throw Error(Errc::MalformedJson, e.what());
            }
        });
    }
    const auto per_class = gather_support_instances(support, t.support_scales, &t.query_store,
                                                    t.quality ? &*t.quality : nullptr, cfg.proto.temperature_fuse);
    return build_prototypes(per_class, t.negatives, cfg.proto);
}

std::optional<std::map<ImageId, ImageSize>> sizes_of(const LoadedTask& t) {
    if (!t.query_images) return std::nullopt;
    return image_sizes(*t.query_images);
}

}  // namespace

PrototypeSet run_proto_build(const PipelineConfig& cfg, const std::optional<fs::path>& out) {
    PipelineConfig c = cfg;
    c.prototypes.reset();
    const auto t = load_task(c);
    auto protos = prototypes_for(c, t, t.support);
    if (out) write_file_atomic(*out, prototypes_to_json(protos).dump(1));
    return protos;
}

MatchOutput run_match(const PipelineConfig& cfg) {
    const auto t = load_task(cfg);
    const auto protos = prototypes_for(cfg, t, t.support);
    const auto sizes = sizes_of(t);
    MatchOutput out;
    out.detections = match_detections(cfg, protos, t.proposals, t.query_store, sizes ? &*sizes : nullptr);
    if (t.query_gt) out.report = coco_map(out.detections, *t.query_gt, cfg.eval);

    fs::create_directories(cfg.out_dir);
    const std::string results = emit_results(out.detections, t.query_images ? &*t.query_images : nullptr);
    write_file_atomic(cfg.out_dir / "results.json", results);
    if (out.report) write_file_atomic(cfg.out_dir / "report.json", report_to_json(*out.report).dump(1));
    return out;
}

std::vector<DatasetSplit> run_pseudo_rounds(const PipelineConfig& cfg, int rounds, std::span<const double> beta_schedule) {
    if (rounds < 0) throw Error(Errc::Config, "rounds must be >= 0");
    const auto t = load_task(cfg);
    const auto sizes = sizes_of(t);
    std::optional<DatasetSplit> threshold_gt;
    if (cfg.threshold_gt) threshold_gt = with_file(*cfg.threshold_gt, [&] { return load_coco_file(*cfg.threshold_gt); });
    if (!beta_schedule.empty() && !threshold_gt)
        throw Error(Errc::Config, "a beta schedule needs threshold_gt to optimize against");

    std::vector<DatasetSplit> splits{t.support};
    fs::create_directories(cfg.out_dir);
    write_file_atomic(cfg.out_dir / "round_0.json", emit_split(t.support));

    for (int r = 0; r < rounds; ++r) {
        const DatasetSplit& current = splits.back();
        const auto protos = prototypes_for(cfg, t, current);
        const auto dets = match_detections(cfg, protos, t.proposals, t.query_store, sizes ? &*sizes : nullptr);

        std::vector<Detection> selected;
        if (!beta_schedule.empty()) {
            const double beta = beta_schedule[std::min<std::size_t>(static_cast<std::size_t>(r), beta_schedule.size() - 1)];
            const auto taus = optimize_thresholds(dets, *threshold_gt, beta);
            for (const auto& d : dets) {
                auto it = taus.find(d.category_id);
                if (it != taus.end() && d.score > it->second) selected.push_back(d);
            }
        } else {
            selected = select_pseudo(dets, cfg.pseudo.tau);
        }

        DatasetSplit next = current;
        next.annotations = merge_with_gt(selected, current.annotations, cfg.pseudo);
        for (const auto& a : next.annotations) {
            if (next.find_image(a.image_id)) continue;
            const ImageInfo* info = t.query_images ? t.query_images->find_image(a.image_id) : nullptr;
            next.images.push_back(info ? *info : ImageInfo{a.image_id, 0.0, 0.0, ""});
        }
        link_split(next);
        write_file_atomic(cfg.out_dir / ("round_" + std::to_string(r + 1) + ".json"), emit_split(next));
        splits.push_back(std::move(next));
    }
    return splits;
}

ScoreCard score_submission(std::span<const fs::path, 9> results, std::span<const fs::path, 9> gts,
                           const EvalSettings& settings) {
    ScoreCells cells{};
    for (std::size_t i = 0; i < 9; ++i) {
        const auto gt = with_file(gts[i], [&] { return load_coco_file(gts[i]); });
        const auto dets = with_file(results[i], [&] { return load_results_file(results[i]); });
        cells[i / 3][i % 3] = 100.0 * coco_map(dets, gt, settings).map;
    }
    return make_scorecard(cells);
}

// ---------------------------------------------------------------------------
// synthetic task

SyntheticTask make_synthetic_task(const SyntheticTaskOptions& opts) {
    SyntheticTask task;
    task.clusters = synth_clusters(opts.n_classes, opts.per_class, opts.dim, opts.spread, opts.seed);
    const auto& sc = task.clusters;

    for (std::size_t c = 0; c < opts.n_classes; ++c) {
        const auto id = static_cast<CategoryId>(c + 1);
        const Category cat{id, "class_" + std::to_string(id)};
        task.support.categories.push_back(cat);
        task.query_gt.categories.push_back(cat);
    }
    for (std::size_t i = 0; i < sc.support.size(); ++i) {
        const auto& m = sc.support.meta(i);
        task.support.images.push_back({m.image_id, 96.0, 96.0, "support_" + std::to_string(m.image_id) + ".png"});
        task.support.annotations.push_back({m.image_id, *m.bbox, *m.category_id, m.entry_id, true, std::nullopt});
    }
    std::set<ImageId> query_images;
    for (std::size_t i = 0; i < sc.queries.size(); ++i) {
        const auto& m = sc.queries.meta(i);
        if (query_images.insert(m.image_id).second)
            task.query_gt.images.push_back({m.image_id, 128.0, 128.0, "query_" + std::to_string(m.image_id) + ".png"});
        task.query_gt.annotations.push_back({m.image_id, *m.bbox, sc.query_labels[i], m.entry_id, true, std::nullopt});
        task.proposals.push_back({m.image_id, *m.bbox, 0, 1.0, m.entry_id});
    }
    link_split(task.support);
    link_split(task.query_gt);
    return task;
}

fs::path write_synthetic_task(const fs::path& dir, const SyntheticTaskOptions& opts) {
    const auto task = make_synthetic_task(opts);
    fs::create_directories(dir);
    write_file_atomic(dir / "support.json", emit_split(task.support));
    write_file_atomic(dir / "query_gt.json", emit_split(task.query_gt));
    write_file_atomic(dir / "proposals.json", emit_results(task.proposals, &task.query_gt));
    write_store(task.clusters.support, dir / "support.cdfe");
    write_store(task.clusters.queries, dir / "queries.cdfe");

    nlohmann::ordered_json cfg;
    cfg["support_json"] = "support.json";
    cfg["support_store"] = "support.cdfe";
    cfg["query_proposals"] = "proposals.json";
    cfg["query_store"] = "queries.cdfe";
    cfg["query_gt"] = "query_gt.json";
    cfg["out_dir"] = "out";
    cfg["seed"] = opts.seed;
    cfg["proto"] = {{"alpha", kDefaultBlendAlpha}, {"n_bg", kDefaultBackgroundCount}};
    cfg["diffusion"] = {{"steps", 30}, {"alpha", 0.3}, {"edge_iou_min", 0.0}, {"fuse_objectness", false}};
    cfg["min_score"] = 0.01;
    cfg["postproc"] = nlohmann::ordered_json::array({{{"op", "nms"}, {"iou", 0.5}}});
    cfg["pseudo"] = {{"tau", 0.5}, {"dedup", "same_class_gt"}, {"merge_mode", "class_agnostic_nms"}};
    const auto path = dir / "config.json";
    write_file_atomic(path, cfg.dump(1));
    return path;
}

}  // namespace cdfsod
