#include "cdfsod/proto.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cdfsod {

namespace {

void require_same_dim(std::span<const Embedding> xs) {
    for (const auto& e : xs)
        if (e.size() != xs.front().size()) throw Error(Errc::DimMismatch, "instances have different dimensions");
}

std::vector<double> softmax(std::span<const double> logits) {
    const double hi = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - hi);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

Embedding raw_mean(std::span<const Embedding> instances) {
    std::vector<double> acc(instances.front().size(), 0.0);
    for (const auto& e : instances)
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e[i];
    for (double& v : acc) v /= static_cast<double>(instances.size());
    return Embedding(std::move(acc));
}

}  // namespace

Embedding mean_prototype(std::span<const Embedding> instances) {
    if (instances.empty()) throw Error(Errc::EmptyClass, "no instances to average");
    require_same_dim(instances);
    return l2_normalize(raw_mean(instances));
}

Embedding reweighted_prototype(std::span<const Embedding> instances, std::span<const double> weights, double alpha) {
    if (instances.empty()) throw Error(Errc::EmptyClass, "no instances to reweight");
    if (weights.size() != instances.size())
        throw Error(Errc::InvalidArgument, "weight count does not match instance count");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(Errc::InvalidArgument, "alpha must lie in [0, 1]");
    for (double w : weights) {
        if (!std::isfinite(w)) throw Error(Errc::InvalidArgument, "non-finite quality weight");
        if (w < 0.0) throw Error(Errc::NegativeWeight, "quality weights must be nonnegative");
    }
    require_same_dim(instances);

    const auto p = softmax(weights);
    const Embedding mean = raw_mean(instances);
    std::vector<double> blend(mean.size(), 0.0);
    for (std::size_t k = 0; k < instances.size(); ++k)
        for (std::size_t i = 0; i < blend.size(); ++i) blend[i] += alpha * p[k] * instances[k][i];
    for (std::size_t i = 0; i < blend.size(); ++i) blend[i] += (1.0 - alpha) * mean[i];
    return l2_normalize(Embedding(std::move(blend)));
}

Embedding multiscale_fuse(std::span<const ScaledEmbedding> per_scale, std::span<const double> quality,
                          double temperature) {
    if (per_scale.empty()) throw Error(Errc::EmptyInput, "no scales to fuse");
    if (!(temperature > 0.0)) throw Error(Errc::NonPositiveTemperature, "temperature must be > 0");
    if (quality.size() != per_scale.size())
        throw Error(Errc::InvalidArgument, "quality count does not match scale count");
    const std::size_t dim = per_scale.front().embedding.size();
    for (const auto& s : per_scale) {
        if (s.embedding.size() != dim) throw Error(Errc::DimMismatch, "scales have different dimensions");
        if (!(s.scale > 0.0)) throw Error(Errc::InvalidArgument, "scale factors must be positive");
    }

    std::vector<double> logits(quality.begin(), quality.end());
    for (double& l : logits) l /= temperature;
    const auto p = softmax(logits);
    std::vector<double> acc(dim, 0.0);
    for (std::size_t s = 0; s < per_scale.size(); ++s)
        for (std::size_t i = 0; i < dim; ++i) acc[i] += p[s] * per_scale[s].embedding[i];
    return l2_normalize(Embedding(std::move(acc)));
}

Embedding multiscale_fuse(std::span<const ScaledEmbedding> per_scale, double temperature) {
    const std::vector<double> uniform(per_scale.size(), 0.0);
    return multiscale_fuse(per_scale, uniform, temperature);
}

std::vector<BBox> jitter_negatives(std::span<const PositiveBox> positives, const JitterOptions& opts) {
    if (!(opts.shift_frac >= 0.0)) throw Error(Errc::InvalidArgument, "shift_frac must be >= 0");
    if (!(opts.scale_min > 0.0) || !(opts.scale_max >= opts.scale_min))
        throw Error(Errc::InvalidArgument, "scale range must be a positive interval");

    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> shift(-opts.shift_frac, opts.shift_frac);
    std::uniform_real_distribution<double> scale(opts.scale_min, opts.scale_max);

    std::vector<BBox> out;
    out.reserve(positives.size() * opts.n_per_box);
    for (const auto& pos : positives) {
        const BBox& b = pos.box;
        if (!b.valid() || b.x < 0.0 || b.y < 0.0 || b.right() > pos.image_width || b.bottom() > pos.image_height)
            throw Error(Errc::InvalidArgument, "positive box must lie inside its image");
        const double cx = b.x + 0.5 * b.w;
        const double cy = b.y + 0.5 * b.h;
        for (std::size_t n = 0; n < opts.n_per_box; ++n) {
            bool placed = false;
            for (std::size_t attempt = 0; attempt < opts.max_retries && !placed; ++attempt) {
                const double ncx = cx + shift(rng) * b.w;
                const double ncy = cy + shift(rng) * b.h;
                const double nw = scale(rng) * b.w;
                const double nh = scale(rng) * b.h;
                const double x0 = std::clamp(ncx - 0.5 * nw, 0.0, pos.image_width);
                const double y0 = std::clamp(ncy - 0.5 * nh, 0.0, pos.image_height);
                const double x1 = std::clamp(ncx + 0.5 * nw, 0.0, pos.image_width);
                const double y1 = std::clamp(ncy + 0.5 * nh, 0.0, pos.image_height);
                const BBox cand{x0, y0, x1 - x0, y1 - y0};
                if (!cand.valid()) continue;
                if (iou(cand, b) >= opts.max_iou) continue;
                out.push_back(cand);
                placed = true;
            }
            if (!placed)
                throw Error(Errc::RetryExhausted, "no negative with IoU < " + std::to_string(opts.max_iou) +
                                                      " found within " + std::to_string(opts.max_retries) + " draws");
        }
    }
    return out;
}

std::vector<Embedding> background_prototypes(std::span<const Embedding> negatives, std::size_t n_bg) {
    if (negatives.empty() || n_bg == 0) return {};
    const std::size_t groups = std::min(n_bg, negatives.size());
    std::vector<std::vector<Embedding>> buckets(groups);
    for (std::size_t i = 0; i < negatives.size(); ++i) buckets[i % groups].push_back(negatives[i]);
    std::vector<Embedding> out;
    out.reserve(groups);
    for (const auto& bucket : buckets) out.push_back(mean_prototype(bucket));
    return out;
}

PrototypeSet build_prototypes(const std::map<CategoryId, ClassInstances>& per_class,
                              std::span<const Embedding> negatives, const PrototypeOptions& opts) {
    PrototypeSet set;
    set.alpha = opts.alpha;
    set.temperature_fuse = opts.temperature_fuse;
    for (const auto& [cat, inst] : per_class) {
        if (inst.instances.empty())
            throw Error(Errc::EmptyClass, "category " + std::to_string(cat) + " has no support instances");
        set.class_protos.emplace(cat, inst.weights.empty()
                                          ? mean_prototype(inst.instances)
                                          : reweighted_prototype(inst.instances, inst.weights, opts.alpha));
    }
    set.bg_protos = background_prototypes(negatives, opts.n_bg);
    return set;
}

nlohmann::json prototypes_to_json(const PrototypeSet& set) {
    nlohmann::ordered_json j;
    j["alpha"] = set.alpha;
    j["temperature_fuse"] = set.temperature_fuse;
    j["class_protos"] = nlohmann::ordered_json::array();
    for (const auto& [cat, e] : set.class_protos) {
        nlohmann::ordered_json c;
        c["category_id"] = cat;
        c["vector"] = std::vector<double>(e.begin(), e.end());
        j["class_protos"].push_back(std::move(c));
    }
    j["bg_protos"] = nlohmann::ordered_json::array();
    for (const auto& e : set.bg_protos) j["bg_protos"].push_back(std::vector<double>(e.begin(), e.end()));
    return nlohmann::json::parse(j.dump());
}

PrototypeSet prototypes_from_json(const nlohmann::json& j) {
    try {
        PrototypeSet set;
        set.alpha = j.value("alpha", kDefaultBlendAlpha);
        set.temperature_fuse = j.value("temperature_fuse", kDefaultFuseTemperature);
        for (const auto& c : j.at("class_protos"))
            set.class_protos.emplace(c.at("category_id").get<CategoryId>(),
                                     l2_normalize(Embedding(c.at("vector").get<std::vector<double>>())));
        for (const auto& b : j.value("bg_protos", nlohmann::json::array()))
            set.bg_protos.push_back(l2_normalize(Embedding(b.get<std::vector<double>>())));
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::MalformedJson, std::string("prototype file: ") + e.what());
    }
}

}  // namespace cdfsod
