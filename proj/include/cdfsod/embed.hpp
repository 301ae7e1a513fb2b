#pragma once

// Embedding storage, normalization and synthesis. All neural backbones live
// behind the CDFE file format defined here.

#include "cdfsod/detcore.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace cdfsod {

/// Dense real feature vector used for all in-process arithmetic.
class Embedding {
public:
    Embedding() = default;
    explicit Embedding(std::vector<double> values) : values_(std::move(values)) {}
    Embedding(std::initializer_list<double> values) : values_(values) {}

    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }
    double operator[](std::size_t i) const noexcept { return values_[i]; }
    double& operator[](std::size_t i) noexcept { return values_[i]; }
    std::span<const double> values() const noexcept { return values_; }
    std::span<double> values() noexcept { return values_; }
    auto begin() const noexcept { return values_.begin(); }
    auto end() const noexcept { return values_.end(); }
    auto begin() noexcept { return values_.begin(); }
    auto end() noexcept { return values_.end(); }

    friend bool operator==(const Embedding&, const Embedding&) = default;

private:
    std::vector<double> values_;
};

double dot(const Embedding& a, const Embedding& b);
double norm(const Embedding& e) noexcept;

/// Unit-norm copy. Throws ZeroVector when the norm is zero.
Embedding l2_normalize(const Embedding& e);

/// Cosine similarity. Throws ZeroVector or DimMismatch.
double cosine(const Embedding& a, const Embedding& b);

enum class StoreKind { Support, Proposal };

/// Per-entry sidecar metadata.
struct EntryMeta {
    EntryId entry_id = 0;
    ImageId image_id = 0;
    std::optional<BBox> bbox;
    std::optional<CategoryId> category_id;
    std::optional<double> scale;

    friend bool operator==(const EntryMeta&, const EntryMeta&) = default;
};

/// Fixed-dimension float32 vectors addressed by entry id, in file order.
class EmbeddingStore {
public:
    EmbeddingStore() = default;
    EmbeddingStore(std::uint32_t dim, StoreKind kind) : dim_(dim), kind_(kind) {}

    std::uint32_t dim() const noexcept { return dim_; }
    StoreKind kind() const noexcept { return kind_; }
    std::size_t size() const noexcept { return metas_.size(); }

    /// Appends one entry. Throws DimMismatch, DuplicateId, or
    /// InvalidArgument for non-finite values.
    void add(const EntryMeta& meta, std::span<const float> vector);
    void add(const EntryMeta& meta, const Embedding& e);

    const EntryMeta& meta(std::size_t ordinal) const { return metas_.at(ordinal); }
    std::span<const float> row(std::size_t ordinal) const;
    std::optional<std::size_t> find(EntryId id) const;
    bool contains(EntryId id) const { return find(id).has_value(); }

    /// Vector for `id` widened to double. Throws MissingEmbedding.
    Embedding embedding(EntryId id) const;
    Embedding embedding_at(std::size_t ordinal) const;

    const std::vector<float>& payload() const noexcept { return data_; }

    /// Opaque producer metadata carried in the sidecar (exporter manifest).
    nlohmann::json manifest = nlohmann::json::object();

    friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b);

private:
    std::uint32_t dim_ = 0;
    StoreKind kind_ = StoreKind::Support;
    std::vector<EntryMeta> metas_;
    std::vector<float> data_;
    std::map<EntryId, std::size_t> index_;
};

inline constexpr char kStoreMagic[4] = {'C', 'D', 'F', 'E'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 16;

/// `<file>.idx.json`
std::filesystem::path sidecar_path(const std::filesystem::path& store_path);

/// Writes the binary payload and its sidecar (both via write-then-rename).
void write_store(const EmbeddingStore& store, const std::filesystem::path& path);

/// Errors: BadMagic, VersionMismatch, TruncatedFile, DimMismatch, Io,
/// MalformedJson (sidecar).
EmbeddingStore read_store(const std::filesystem::path& path);

/// Binary payload without sidecar, exposed for format tests.
std::string encode_store_payload(const EmbeddingStore& store);

struct SyntheticClusters {
    EmbeddingStore support;
    EmbeddingStore queries;
    std::vector<CategoryId> query_labels;  // aligned with query ordinals
    std::vector<Embedding> class_means;    // class c has id c + 1
};

/// Deterministic clustered embeddings on the unit sphere. Class means are
/// orthonormal when n_classes <= dim. Each member is
/// normalize(mean + spread * z) with z ~ N(0, I / dim). Support entries sit
/// alone on their own image; queries are laid out four per image on a
/// non-overlapping grid. Category ids are 1..n_classes.
SyntheticClusters synth_clusters(std::size_t n_classes, std::size_t per_class, std::uint32_t dim, double spread,
                                 std::uint64_t seed);

}  // namespace cdfsod
