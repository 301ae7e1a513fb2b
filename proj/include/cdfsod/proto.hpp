#pragma once

// Class prototypes and background references built from K-shot support
// embeddings.

#include "cdfsod/detcore.hpp"
#include "cdfsod/embed.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace cdfsod {

inline constexpr double kDefaultBlendAlpha = 0.7;
inline constexpr double kDefaultFuseTemperature = 0.1;
inline constexpr std::size_t kDefaultBackgroundCount = 16;
// Background count used by the reference training setup; too large for
// desk-scale runs, kept for documentation and CLI presets.
inline constexpr std::size_t kReferenceBackgroundCount = 530;

inline const std::vector<double>& default_scales() {
    static const std::vector<double> scales{0.9, 1.0, 1.1, 1.2};
    return scales;
}

struct PrototypeSet {
    std::map<CategoryId, Embedding> class_protos;
    std::vector<Embedding> bg_protos;
    double alpha = kDefaultBlendAlpha;
    double temperature_fuse = kDefaultFuseTemperature;
};

/// Normalized arithmetic mean. Throws EmptyClass on empty input and
/// ZeroVector when the members cancel.
Embedding mean_prototype(std::span<const Embedding> instances);

/// normalize(alpha * sum_i softmax(w)_i e_i + (1 - alpha) * mean(e)).
/// The learned projection of the attention branch is taken as identity.
/// Errors: EmptyClass, NegativeWeight, DimMismatch, InvalidArgument
/// (alpha outside [0, 1] or weight count mismatch).
Embedding reweighted_prototype(std::span<const Embedding> instances, std::span<const double> weights, double alpha);

struct ScaledEmbedding {
    double scale = 1.0;
    Embedding embedding;
};

/// normalize(sum_s softmax(quality / temperature)_s e_s).
/// Errors: EmptyInput, NonPositiveTemperature, InvalidArgument (quality size).
Embedding multiscale_fuse(std::span<const ScaledEmbedding> per_scale, std::span<const double> quality,
                          double temperature = kDefaultFuseTemperature);

/// Same with uniform quality.
Embedding multiscale_fuse(std::span<const ScaledEmbedding> per_scale, double temperature = kDefaultFuseTemperature);

struct PositiveBox {
    BBox box;
    double image_width = 0.0;
    double image_height = 0.0;
};

struct JitterOptions {
    std::size_t n_per_box = 4;
    double shift_frac = 1.0;  // max centre shift as a fraction of box size
    double scale_min = 0.5;
    double scale_max = 2.0;
    std::uint64_t seed = 0;
    std::size_t max_retries = 100;  // per output box
    double max_iou = 0.5;           // outputs satisfy iou(out, source) < max_iou
};

/// Negative boxes made by randomly shifting and scaling each positive,
/// clipped to the image. Throws RetryExhausted when a box with IoU below
/// max_iou cannot be placed within max_retries draws.
std::vector<BBox> jitter_negatives(std::span<const PositiveBox> positives, const JitterOptions& opts);

/// Mean-pools negative embeddings into at most `n_bg` background
/// prototypes (round-robin assignment, ordinal order).
std::vector<Embedding> background_prototypes(std::span<const Embedding> negatives,
                                             std::size_t n_bg = kDefaultBackgroundCount);

struct PrototypeOptions {
    double alpha = kDefaultBlendAlpha;
    double temperature_fuse = kDefaultFuseTemperature;
    std::size_t n_bg = kDefaultBackgroundCount;
};

/// Support instances for one class. `weights` empty means plain mean.
struct ClassInstances {
    std::vector<Embedding> instances;
    std::vector<double> weights;
};

PrototypeSet build_prototypes(const std::map<CategoryId, ClassInstances>& per_class,
                              std::span<const Embedding> negatives, const PrototypeOptions& opts = {});

nlohmann::json prototypes_to_json(const PrototypeSet& set);
PrototypeSet prototypes_from_json(const nlohmann::json& j);

}  // namespace cdfsod
