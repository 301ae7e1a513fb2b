#include "cdfsod/embed.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace cdfsod {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

double dot(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size())
        throw Error(Errc::DimMismatch,
                    "dimensions " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const Embedding& e) noexcept {
    double s = 0.0;
    for (double v : e) s += v * v;
    return std::sqrt(s);
}

Embedding l2_normalize(const Embedding& e) {
    const double n = norm(e);
    if (!(n > 0.0) || !std::isfinite(n)) throw Error(Errc::ZeroVector, "cannot normalize a zero-norm vector");
    Embedding out = e;
    for (double& v : out.values()) v /= n;
    return out;
}

double cosine(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size())
        throw Error(Errc::DimMismatch,
                    "dimensions " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
    const double na = norm(a);
    const double nb = norm(b);
    if (!(na > 0.0) || !(nb > 0.0)) throw Error(Errc::ZeroVector, "cosine of a zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// EmbeddingStore

void EmbeddingStore::add(const EntryMeta& meta, std::span<const float> vector) {
    if (vector.size() != dim_)
        throw Error(Errc::DimMismatch, "entry " + std::to_string(meta.entry_id) + " has dimension " +
                                           std::to_string(vector.size()) + ", store expects " + std::to_string(dim_));
    if (std::any_of(vector.begin(), vector.end(), [](float v) { return !std::isfinite(v); }))
        throw Error(Errc::InvalidArgument, "entry " + std::to_string(meta.entry_id) + " has non-finite values");
    if (!index_.emplace(meta.entry_id, metas_.size()).second)
        throw Error(Errc::DuplicateId, "entry id " + std::to_string(meta.entry_id) + " already present");
    metas_.push_back(meta);
    data_.insert(data_.end(), vector.begin(), vector.end());
}

void EmbeddingStore::add(const EntryMeta& meta, const Embedding& e) {
    std::vector<float> v(e.begin(), e.end());
    add(meta, v);
}

std::span<const float> EmbeddingStore::row(std::size_t ordinal) const {
    if (ordinal >= metas_.size()) throw Error(Errc::InvalidArgument, "ordinal out of range");
    return std::span<const float>(data_).subspan(ordinal * dim_, dim_);
}

std::optional<std::size_t> EmbeddingStore::find(EntryId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

Embedding EmbeddingStore::embedding_at(std::size_t ordinal) const {
    auto r = row(ordinal);
    return Embedding(std::vector<double>(r.begin(), r.end()));
}

Embedding EmbeddingStore::embedding(EntryId id) const {
    auto ord = find(id);
    if (!ord) throw Error(Errc::MissingEmbedding, "no embedding for entry " + std::to_string(id));
    return embedding_at(*ord);
}

bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
    if (a.dim_ != b.dim_ || a.kind_ != b.kind_ || a.metas_ != b.metas_ || a.manifest != b.manifest) return false;
    if (a.data_.size() != b.data_.size()) return false;
    // bitwise so that -0.0f and 0.0f count as different payloads
    return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](float x, float y) {
        return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
    });
}

// ---------------------------------------------------------------------------
// CDFE file format

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return v;
}

const char* kind_name(StoreKind k) { return k == StoreKind::Support ? "support" : "proposal"; }

StoreKind parse_kind(const std::string& s) {
    if (s == "support") return StoreKind::Support;
    if (s == "proposal") return StoreKind::Proposal;
    throw Error(Errc::MalformedJson, "unknown store kind '" + s + "'");
}

ordered_json sidecar_json(const EmbeddingStore& store) {
    ordered_json root;
    root["version"] = kStoreVersion;
    root["kind"] = kind_name(store.kind());
    root["dim"] = store.dim();
    root["count"] = store.size();
    root["manifest"] = ordered_json::parse(store.manifest.dump());
    root["entries"] = ordered_json::array();
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& m = store.meta(i);
        ordered_json e;
        e["ordinal"] = i;
        e["entry_id"] = m.entry_id;
        e["image_id"] = m.image_id;
        if (m.bbox) e["bbox"] = {m.bbox->x, m.bbox->y, m.bbox->w, m.bbox->h};
        if (m.category_id) e["category_id"] = *m.category_id;
        if (m.scale) e["scale"] = *m.scale;
        root["entries"].push_back(std::move(e));
    }
    return root;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& store_path) {
    auto p = store_path;
    p += ".idx.json";
    return p;
}

std::string encode_store_payload(const EmbeddingStore& store) {
    std::string out;
    out.reserve(kStoreHeaderBytes + store.payload().size() * 4);
    out.append(kStoreMagic, 4);
    put_u32(out, kStoreVersion);
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    put_u32(out, store.dim());
    for (float f : store.payload()) put_u32(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

void write_store(const EmbeddingStore& store, const std::filesystem::path& path) {
    write_file_atomic(path, encode_store_payload(store));
    write_file_atomic(sidecar_path(path), sidecar_json(store).dump(1));
}

EmbeddingStore read_store(const std::filesystem::path& path) {
    const std::string bytes = read_text_file(path);
    if (bytes.size() < 4) throw Error(Errc::TruncatedFile, path.string() + ": shorter than the magic");
    if (!std::equal(kStoreMagic, kStoreMagic + 4, bytes.begin()))
        throw Error(Errc::BadMagic, path.string() + ": not a CDFE file");
    if (bytes.size() < kStoreHeaderBytes) throw Error(Errc::TruncatedFile, path.string() + ": truncated header");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kStoreVersion)
        throw Error(Errc::VersionMismatch, path.string() + ": version " + std::to_string(version));
    const std::uint64_t count = get_u32(bytes, 8);
    const std::uint32_t dim = get_u32(bytes, 12);
    const std::uint64_t expected = kStoreHeaderBytes + count * dim * 4;
    if (bytes.size() < expected) throw Error(Errc::TruncatedFile, path.string() + ": payload shorter than count*dim");
    if (bytes.size() > expected)
        throw Error(Errc::DimMismatch, path.string() + ": payload longer than count*dim");

    json side;
    try {
        side = json::parse(read_text_file(sidecar_path(path)));
    } catch (const json::parse_error& e) {
        throw Error(Errc::MalformedJson, sidecar_path(path).string() + ": " + e.what());
    }
    EmbeddingStore store;
    try {
        store = EmbeddingStore(dim, parse_kind(side.value("kind", std::string("support"))));
        if (side.contains("dim") && side["dim"].get<std::uint32_t>() != dim)
            throw Error(Errc::DimMismatch, "sidecar dim disagrees with header");
        if (side.contains("manifest")) store.manifest = side["manifest"];
        const json& entries = side.at("entries");
        if (!entries.is_array() || entries.size() != count)
            throw Error(Errc::DimMismatch, "sidecar lists " + std::to_string(entries.size()) + " entries, header " +
                                               std::to_string(count));
        std::vector<float> row(dim);
        for (std::size_t i = 0; i < count; ++i) {
            const json& e = entries[i];
            if (e.contains("ordinal") && e["ordinal"].get<std::size_t>() != i)
                throw Error(Errc::MalformedJson, "sidecar entries out of ordinal order");
            EntryMeta m;
            m.entry_id = e.at("entry_id").get<EntryId>();
            m.image_id = e.value("image_id", ImageId{0});
            if (auto b = e.find("bbox"); b != e.end() && !b->is_null()) {
                const auto& a = *b;
                m.bbox = BBox::checked(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(),
                                       a.at(3).get<double>());
            }
            if (auto c = e.find("category_id"); c != e.end() && !c->is_null()) m.category_id = c->get<CategoryId>();
            if (auto s = e.find("scale"); s != e.end() && !s->is_null()) m.scale = s->get<double>();
            for (std::uint32_t d = 0; d < dim; ++d)
                row[d] = std::bit_cast<float>(get_u32(bytes, kStoreHeaderBytes + (i * dim + d) * 4));
            store.add(m, row);
        }
    } catch (const json::exception& e) {
        throw Error(Errc::MalformedJson, sidecar_path(path).string() + ": " + e.what());
    }
    return store;
}

// ---------------------------------------------------------------------------
// Synthetic clusters

namespace {

Embedding gaussian(std::mt19937_64& rng, std::uint32_t dim, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    std::vector<double> v(dim);
    for (double& x : v) x = n(rng);
    return Embedding(std::move(v));
}

Embedding perturbed_member(const Embedding& mean, const Embedding& z, double spread) {
    Embedding e = mean;
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += spread * z[i];
    return l2_normalize(e);
}

std::vector<Embedding> class_means(std::mt19937_64& rng, std::size_t n, std::uint32_t dim) {
    std::vector<Embedding> means;
    means.reserve(n);
    while (means.size() < n) {
        Embedding v = gaussian(rng, dim, 1.0);
        if (means.size() < dim) {
            // Gram-Schmidt against the accepted means
            for (const auto& m : means) {
                const double p = dot(v, m);
                for (std::size_t i = 0; i < dim; ++i) v[i] -= p * m[i];
            }
        }
        if (norm(v) < 1e-6) continue;
        means.push_back(l2_normalize(v));
    }
    return means;
}

}  // namespace

SyntheticClusters synth_clusters(std::size_t n_classes, std::size_t per_class, std::uint32_t dim, double spread,
                                 std::uint64_t seed) {
    if (n_classes < 1) throw Error(Errc::InvalidArgument, "n_classes must be >= 1");
    if (!(spread >= 0.0)) throw Error(Errc::InvalidArgument, "spread must be >= 0");
    if (dim < 1) throw Error(Errc::InvalidArgument, "dim must be >= 1");

    std::mt19937_64 rng(seed);
    SyntheticClusters out;
    out.class_means = class_means(rng, n_classes, dim);
    out.support = EmbeddingStore(dim, StoreKind::Support);
    out.queries = EmbeddingStore(dim, StoreKind::Proposal);
    const double zstd = 1.0 / std::sqrt(static_cast<double>(dim));

    EntryId next_support = 1;
    for (std::size_t c = 0; c < n_classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            const Embedding z = gaussian(rng, dim, zstd);
            EntryMeta m;
            m.entry_id = next_support;
            m.image_id = next_support;
            m.bbox = BBox{16.0, 16.0, 64.0, 64.0};
            m.category_id = static_cast<CategoryId>(c + 1);
            out.support.add(m, perturbed_member(out.class_means[c], z, spread));
            ++next_support;
        }
    }

    std::vector<CategoryId> labels;
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t k = 0; k < per_class; ++k) labels.push_back(static_cast<CategoryId>(c + 1));
    std::shuffle(labels.begin(), labels.end(), rng);

    for (std::size_t q = 0; q < labels.size(); ++q) {
        const Embedding z = gaussian(rng, dim, zstd);
        const std::size_t cell = q % 4;
        EntryMeta m;
        m.entry_id = static_cast<EntryId>(q + 1);
        m.image_id = static_cast<ImageId>(1001 + q / 4);
        m.bbox = BBox{8.0 + 64.0 * static_cast<double>(cell % 2), 8.0 + 64.0 * static_cast<double>(cell / 2), 48.0,
                      48.0};
        out.queries.add(m, perturbed_member(out.class_means[static_cast<std::size_t>(labels[q] - 1)], z, spread));
    }
    out.query_labels = std::move(labels);
    return out;
}

}  // namespace cdfsod
