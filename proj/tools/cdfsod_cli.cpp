// cdfsod: command-line driver for the few-shot detection toolkit.

#include "cdfsod/error.hpp"
#include "cdfsod/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cdfsod;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitInternal = 4;

int exit_code_for(Errc code) {
    switch (code) {
        case Errc::Config:
        case Errc::InvalidArgument:
        case Errc::NegativeWeight:
        case Errc::NonPositiveTemperature:
            return kExitConfig;
        case Errc::RefinerFailure:
            return kExitInternal;
        default:
            return kExitData;
    }
}

json parse_json_file(const fs::path& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw Error(Errc::MalformedJson, path.string() + ": " + e.what());
    }
}

void emit(const std::optional<fs::path>& out, const std::string& text) {
    if (out)
        write_file_atomic(*out, text);
    else
        std::cout << text << '\n';
}

std::vector<double> parse_numbers(const std::string& list) {
    std::vector<double> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw Error(Errc::Config, "not a number: '" + item + "'");
        }
    }
    return out;
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
};

PipelineConfig load_with(const fs::path& config, const Overrides& o) {
    auto cfg = load_config(config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.out) cfg.out_dir = *o.out;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-domain few-shot detection toolkit"};
    app.require_subcommand(1);

    fs::path config;
    Overrides ov;
    std::string out_str;
    std::uint64_t seed = 0;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", config, "Task config file");
        if (needs_config) c->required();
        sub->add_option("--out", out_str, "Output path");
        sub->add_option("--seed", seed, "Seed override");
    };

    // proto build
    auto* proto = app.add_subcommand("proto", "Prototype construction");
    proto->require_subcommand(1);
    auto* proto_build = proto->add_subcommand("build", "Build prototypes from support embeddings");
    add_common(proto_build, true);

    // match run
    auto* match = app.add_subcommand("match", "Training-free prototype matching");
    match->require_subcommand(1);
    auto* match_run = match->add_subcommand("run", "Classify, diffuse, post-process and evaluate");
    add_common(match_run, true);
    bool no_diffusion = false;
    match_run->add_flag("--no-diffusion", no_diffusion, "Skip graph diffusion");

    // diffuse
    auto* diff = app.add_subcommand("diffuse", "Graph confidence diffusion over a results file");
    fs::path diff_in;
    DiffusionConfig dcfg;
    diff->add_option("--in", diff_in, "COCO results file")->required()->check(CLI::ExistingFile);
    diff->add_option("--steps", dcfg.steps, "Iterations");
    diff->add_option("--alpha", dcfg.alpha, "Propagation weight");
    diff->add_option("--edge-iou-min", dcfg.edge_iou_min, "Minimum IoU for an edge");
    diff->add_option("--out", out_str, "Output results file");

    // post apply
    auto* post = app.add_subcommand("post", "Post-processing");
    post->require_subcommand(1);
    auto* post_apply = post->add_subcommand("apply", "Apply a post-processing chain to a results file");
    fs::path post_in;
    fs::path chain_path;
    fs::path images_path;
    fs::path phrase_path;
    bool phrase_strict = false;
    post_apply->add_option("--in", post_in, "COCO results file")->required()->check(CLI::ExistingFile);
    post_apply->add_option("--chain", chain_path, "JSON chain file (array of op specs)");
    post_apply->add_option("--config", config, "Task config whose postproc chain is used");
    post_apply->add_option("--images", images_path, "COCO file with image sizes");
    post_apply->add_option("--phrase-map", phrase_path, "JSON object phrase -> category id");
    post_apply->add_flag("--strict-phrases", phrase_strict, "Fail on unknown phrases instead of dropping");
    post_apply->add_option("--out", out_str, "Output results file");

    // pseudo round
    auto* pseudo = app.add_subcommand("pseudo", "Pseudo-label rounds");
    pseudo->require_subcommand(1);
    auto* pseudo_round = pseudo->add_subcommand("round", "Select, merge and re-match for N rounds");
    add_common(pseudo_round, true);
    int rounds = -1;
    std::string beta_list;
    std::optional<double> tau;
    pseudo_round->add_option("--rounds", rounds, "Number of rounds (default from config)");
    pseudo_round->add_option("--beta", beta_list, "Comma-separated per-round beta schedule");
    pseudo_round->add_option("--tau", tau, "Global selection threshold");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluation");
    eval->require_subcommand(1);
    auto* eval_map = eval->add_subcommand("map", "COCO mAP of a results file");
    fs::path results_path;
    fs::path gt_path;
    std::size_t max_dets = 100;
    eval_map->add_option("--results", results_path, "COCO results file")->required()->check(CLI::ExistingFile);
    eval_map->add_option("--gt", gt_path, "COCO ground truth")->required()->check(CLI::ExistingFile);
    eval_map->add_option("--max-dets", max_dets, "Detections kept per image and class");
    eval_map->add_option("--out", out_str, "Report file");

    auto* eval_score = eval->add_subcommand("score", "Challenge score from nine mAP cells");
    std::string cells_list;
    std::vector<fs::path> score_results;
    std::vector<fs::path> score_gts;
    eval_score->add_option("--cells", cells_list,
                           "Nine comma-separated mAP percentages: D1 1/5/10-shot, D2 1/5/10-shot, D3 1/5/10-shot");
    eval_score->add_option("--results", score_results, "Nine results files in cell order")->expected(9);
    eval_score->add_option("--gt", score_gts, "Nine ground-truth files in cell order")->expected(9);
    eval_score->add_option("--out", out_str, "Score card file");

    // synth gen
    auto* synth = app.add_subcommand("synth", "Synthetic data");
    synth->require_subcommand(1);
    auto* synth_gen = synth->add_subcommand("gen", "Write a synthetic task directory");
    SyntheticTaskOptions sopts;
    synth_gen->add_option("--out", out_str, "Output directory")->required();
    synth_gen->add_option("--classes", sopts.n_classes, "Number of classes");
    synth_gen->add_option("--per-class", sopts.per_class, "Instances per class");
    synth_gen->add_option("--dim", sopts.dim, "Embedding dimension");
    synth_gen->add_option("--spread", sopts.spread, "Cluster spread");
    synth_gen->add_option("--seed", seed, "Seed");

    // embed inspect
    auto* embed = app.add_subcommand("embed", "Embedding stores");
    embed->require_subcommand(1);
    auto* embed_inspect = embed->add_subcommand("inspect", "Summarize a CDFE store");
    fs::path store_path;
    embed_inspect->add_option("store", store_path, "Store file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    if (!out_str.empty()) ov.out = fs::path(out_str);
    for (auto* sub : {proto_build, match_run, pseudo_round, synth_gen})
        if (sub->parsed() && sub->count("--seed")) ov.seed = seed;

    try {
        if (proto_build->parsed()) {
            auto cfg = load_with(config, {ov.seed, std::nullopt});
            const fs::path out = ov.out.value_or(cfg.out_dir / "prototypes.json");
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            const auto protos = run_proto_build(cfg, out);
            std::cout << json{{"classes", protos.class_protos.size()}, {"background", protos.bg_protos.size()},
                              {"out", out.string()}}
                             .dump()
                      << '\n';
        } else if (match_run->parsed()) {
            auto cfg = load_with(config, ov);
            if (no_diffusion) cfg.diffusion_enabled = false;
            const auto res = run_match(cfg);
            json summary{{"detections", res.detections.size()}, {"out_dir", cfg.out_dir.string()}};
            if (res.report) summary["map"] = res.report->map;
            std::cout << summary.dump() << '\n';
        } else if (diff->parsed()) {
            const auto dets = load_results_file(diff_in);
            emit(ov.out, emit_results(diffuse(dets, dcfg)));
        } else if (post_apply->parsed()) {
            std::vector<PostStep> chain;
            if (!chain_path.empty())
                chain = parse_chain(parse_json_file(chain_path));
            else if (!config.empty())
                chain = load_config(config).chain;
            else
                throw Error(Errc::Config, "post apply needs --chain or --config");

            auto dets = load_results_file(post_in);
            if (!phrase_path.empty()) {
                const json raw = parse_json_file(post_in);
                std::map<std::string, CategoryId> mapping;
                const json phrases = parse_json_file(phrase_path);
                for (const auto& [k, v] : phrases.items()) mapping[k] = v.get<CategoryId>();
                std::vector<PhraseDetection> pd;
                for (std::size_t i = 0; i < dets.size(); ++i)
                    pd.push_back({dets[i], raw[i].value("phrase", std::string{})});
                dets = phrase_map(pd, mapping, phrase_strict ? UnknownPhrasePolicy::Error : UnknownPhrasePolicy::Drop);
            }
            std::optional<std::map<ImageId, ImageSize>> sizes;
            if (!images_path.empty()) sizes = image_sizes(load_coco_file(images_path));
            ChainContext ctx;
            if (sizes) ctx.sizes = &*sizes;
            emit(ov.out, emit_results(apply_chain(std::move(dets), chain, ctx)));
        } else if (pseudo_round->parsed()) {
            auto cfg = load_with(config, ov);
            if (tau) {
                cfg.pseudo.tau = *tau;
                try {
                    cfg.pseudo.validate();
                } catch (const Error& e) {
                    throw Error(Errc::Config, e.what());
                }
            }
            const int r = rounds >= 0 ? rounds : cfg.rounds;
            const auto schedule = beta_list.empty() ? cfg.beta_schedule : parse_numbers(beta_list);
            const auto splits = run_pseudo_rounds(cfg, r, schedule);
            json counts = json::array();
            for (const auto& s : splits) counts.push_back(s.annotations.size());
            std::cout << json{{"rounds", r}, {"annotations", counts}, {"out_dir", cfg.out_dir.string()}}.dump() << '\n';
        } else if (eval_map->parsed()) {
            EvalSettings settings;
            settings.max_dets = max_dets;
            const auto report = coco_map(load_results_file(results_path), load_coco_file(gt_path), settings);
            emit(ov.out, report_to_json(report).dump(1));
        } else if (eval_score->parsed()) {
            ScoreCard card;
            if (!cells_list.empty()) {
                const auto v = parse_numbers(cells_list);
                if (v.size() != 9) throw Error(Errc::Config, "--cells needs exactly nine values");
                ScoreCells cells{};
                for (std::size_t i = 0; i < 9; ++i) cells[i / 3][i % 3] = v[i];
                card = make_scorecard(cells);
            } else if (score_results.size() == 9 && score_gts.size() == 9) {
                card = score_submission(std::span<const fs::path, 9>(score_results.data(), 9),
                                        std::span<const fs::path, 9>(score_gts.data(), 9));
            } else {
                throw Error(Errc::Config, "eval score needs --cells or nine --results and --gt files");
            }
            emit(ov.out, scorecard_to_json(card).dump(1));
        } else if (synth_gen->parsed()) {
            sopts.seed = seed;
            const auto path = write_synthetic_task(*ov.out, sopts);
            std::cout << json{{"config", path.string()}}.dump() << '\n';
        } else if (embed_inspect->parsed()) {
            const auto store = read_store(store_path);
            std::set<ImageId> images;
            std::set<CategoryId> cats;
            for (std::size_t i = 0; i < store.size(); ++i) {
                images.insert(store.meta(i).image_id);
                if (store.meta(i).category_id) cats.insert(*store.meta(i).category_id);
            }
            json j{{"kind", store.kind() == StoreKind::Support ? "support" : "proposal"},
                   {"count", store.size()},
                   {"dim", store.dim()},
                   {"images", images.size()},
                   {"categories", cats.size()},
                   {"manifest", store.manifest}};
            std::cout << j.dump(1) << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
        return exit_code_for(e.code());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error [Io]: " << e.what() << '\n';
        return kExitData;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error [MalformedJson]: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitOk;
}
