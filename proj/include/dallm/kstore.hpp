#pragma once

// Knowledge store: whitespace-token chunking of retrieved documents, a
// deterministic local embedder (hashed bag-of-words, sublinear term weights,
// L2-normalized), and an exact cosine top-k index partitioned by lesion.
// Exact scan by design: corpora stay in the low thousands of chunks and the
// results must equal the brute-force ranking bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dallm/core.hpp"
#include "dallm/ingest.hpp"
#include "dallm/util.hpp"

namespace dallm::kstore {

using json = nlohmann::json;
using core::Lesion;

struct KnowledgeChunk {
    std::string chunk_id;
    Lesion lesion = Lesion::atelectasis;
    std::string source_doc;           // RawDocument url-or-id
    std::string text;                 // tokens joined by single spaces
    std::pair<size_t, size_t> token_span;  // [start, end) in whitespace tokens

    bool operator==(const KnowledgeChunk&) const = default;
};

// ---------------------------------------------------------------------------
// Chunking

// Windows start at multiples of (size - overlap). A document that fits in a
// single window yields exactly one chunk; otherwise starts are generated
// while they fall inside the document, so the final chunk may be shorter and
// every token is covered.
inline std::vector<KnowledgeChunk> chunk_document(const ingest::RawDocument& doc, size_t size,
                                                  size_t overlap, Lesion lesion) {
    if (size == 0 || overlap >= size)
        throw ConfigError("chunk_document: require 0 <= overlap < size, got size=" +
                          std::to_string(size) + " overlap=" + std::to_string(overlap));
    auto tokens = util::split_ws(doc.body);
    if (tokens.empty()) throw DataError("chunk_document: empty document " + doc.url_or_id);

    std::vector<size_t> starts;
    if (tokens.size() <= size) {
        starts.push_back(0);
    } else {
        size_t stride = size - overlap;
        for (size_t s = 0; s < tokens.size(); s += stride) starts.push_back(s);
    }

    std::vector<KnowledgeChunk> chunks;
    chunks.reserve(starts.size());
    for (size_t i = 0; i < starts.size(); ++i) {
        size_t begin = starts[i];
        size_t end = std::min(begin + size, tokens.size());
        KnowledgeChunk c;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04u", static_cast<unsigned>(i));
        c.chunk_id = core::to_string(lesion) + "/" + doc.url_or_id + "#" + buf;
        c.lesion = lesion;
        c.source_doc = doc.url_or_id;
        c.token_span = {begin, end};
        std::string text;
        for (size_t t = begin; t < end; ++t) {
            if (t > begin) text += ' ';
            text += tokens[t];
        }
        c.text = std::move(text);
        chunks.push_back(std::move(c));
    }
    return chunks;
}

// ---------------------------------------------------------------------------
// Embedding

struct EmbeddingVector {
    std::vector<double> values;
    std::string backend;
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string descriptor() const = 0;
    virtual size_t dim() const = 0;
    virtual EmbeddingVector embed(const std::string& text) const = 0;
};

// Offline-deterministic embedder: FNV-1a hashed bag of lowercased tokens,
// per-term weight 1 + ln(tf), L2-normalized.
class LocalHashEmbedder final : public Embedder {
public:
    static constexpr size_t kDefaultDim = 256;

    explicit LocalHashEmbedder(size_t dim = kDefaultDim) : dim_(dim) {
        if (dim_ == 0) throw ConfigError("embedder dimension must be positive");
    }

    std::string descriptor() const override {
        return "local-hash-fnv1a/sublinear-tf/l2/d=" + std::to_string(dim_);
    }
    size_t dim() const override { return dim_; }

    static uint64_t fnv1a(std::string_view token) {
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : token) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    size_t bucket(std::string_view token) const { return fnv1a(token) % dim_; }

    EmbeddingVector embed(const std::string& text) const override {
        auto tokens = util::split_ws(text);
        if (tokens.empty()) throw DataError("embed: empty text");
        std::map<std::string, size_t> tf;
        for (auto& t : tokens) tf[util::to_lower(t)]++;
        std::vector<double> v(dim_, 0.0);
        for (const auto& [term, count] : tf)
            v[bucket(term)] += 1.0 + std::log(static_cast<double>(count));
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
        return {std::move(v), descriptor()};
    }

private:
    size_t dim_;
};

inline std::shared_ptr<const Embedder> make_embedder(const std::string& descriptor) {
    const std::string prefix = "local-hash-fnv1a/sublinear-tf/l2/d=";
    if (descriptor.rfind(prefix, 0) == 0) {
        size_t d = std::stoul(descriptor.substr(prefix.size()));
        return std::make_shared<LocalHashEmbedder>(d);
    }
    throw ConfigError("no embedder available for descriptor '" + descriptor + "'");
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// Index

struct SearchHit {
    std::string chunk_id;
    double score = 0.0;

    bool operator==(const SearchHit&) const = default;
};

class VectorIndex {
public:
    explicit VectorIndex(std::shared_ptr<const Embedder> embedder)
        : embedder_(std::move(embedder)) {
        if (!embedder_) throw ConfigError("VectorIndex requires an embedder");
    }

    void add(const KnowledgeChunk& chunk) {
        if (sealed_) throw DataError("index is sealed");
        if (!ids_.emplace(chunk.chunk_id, chunks_.size()).second)
            throw DataError("duplicate chunk id: " + chunk.chunk_id);
        auto vec = embedder_->embed(chunk.text);
        partitions_[chunk.lesion].push_back(chunks_.size());
        chunks_.push_back(chunk);
        vectors_.push_back(std::move(vec.values));
    }

    void seal() { sealed_ = true; }
    bool sealed() const { return sealed_; }
    size_t size() const { return chunks_.size(); }
    std::string embedder_descriptor() const { return embedder_->descriptor(); }
    const KnowledgeChunk& chunk_at(size_t i) const { return chunks_[i]; }

    const KnowledgeChunk* find_chunk(const std::string& chunk_id) const {
        auto it = ids_.find(chunk_id);
        if (it == ids_.end()) return nullptr;
        return &chunks_[it->second];
    }

    bool has_partition(Lesion lesion) const { return partitions_.count(lesion) > 0; }

    // Exact cosine scan, descending score, ties broken by ascending chunk_id.
    std::vector<SearchHit> search(const std::string& query, int k,
                                  std::optional<Lesion> lesion = std::nullopt) const {
        if (!sealed_) throw DataError("search: index not sealed");
        if (chunks_.empty()) throw DataError("search: empty index");
        if (k < 1) throw ConfigError("search: k must be >= 1");

        std::vector<size_t> candidates;
        if (lesion) {
            auto it = partitions_.find(*lesion);
            if (it == partitions_.end())
                throw DataError("search: no index partition for lesion " +
                                core::to_string(*lesion));
            candidates = it->second;
        } else {
            candidates.resize(chunks_.size());
            for (size_t i = 0; i < candidates.size(); ++i) candidates[i] = i;
        }

        auto qv = embedder_->embed(query);
        std::vector<SearchHit> hits;
        hits.reserve(candidates.size());
        for (size_t i : candidates)
            hits.push_back({chunks_[i].chunk_id, cosine(qv.values, vectors_[i])});
        std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.chunk_id < b.chunk_id;
        });
        if (hits.size() > static_cast<size_t>(k)) hits.resize(static_cast<size_t>(k));
        return hits;
    }

    json to_json() const {
        json j;
        j["version"] = 1;
        j["embedder"] = embedder_->descriptor();
        j["dim"] = embedder_->dim();
        j["sealed"] = sealed_;
        json chunks = json::array();
        for (const auto& c : chunks_) {
            chunks.push_back({{"chunk_id", c.chunk_id},
                              {"lesion", core::to_string(c.lesion)},
                              {"source_doc", c.source_doc},
                              {"text", c.text},
                              {"span", {c.token_span.first, c.token_span.second}}});
        }
        j["chunks"] = std::move(chunks);
        json vectors = json::array();
        for (const auto& v : vectors_) vectors.push_back(v);
        j["vectors"] = std::move(vectors);
        return j;
    }

    void save(const std::filesystem::path& path) const {
        util::write_file_atomic(path, to_json().dump(2) + "\n");
    }

    static VectorIndex from_json(const json& j) {
        if (j.value("version", 0) != 1) throw ArtifactError("index: unsupported version");
        VectorIndex index(make_embedder(j.at("embedder").get<std::string>()));
        const auto& chunks = j.at("chunks");
        const auto& vectors = j.at("vectors");
        if (chunks.size() != vectors.size())
            throw ArtifactError("index: chunk/vector tables disagree");
        for (size_t i = 0; i < chunks.size(); ++i) {
            const auto& cj = chunks[i];
            KnowledgeChunk c;
            c.chunk_id = cj.at("chunk_id").get<std::string>();
            auto lesion = core::lesion_from_string(cj.at("lesion").get<std::string>());
            if (!lesion) throw ArtifactError("index: unknown lesion in chunk table");
            c.lesion = *lesion;
            c.source_doc = cj.at("source_doc").get<std::string>();
            c.text = cj.at("text").get<std::string>();
            c.token_span = {cj.at("span")[0].get<size_t>(), cj.at("span")[1].get<size_t>()};
            if (!index.ids_.emplace(c.chunk_id, index.chunks_.size()).second)
                throw ArtifactError("index: duplicate chunk id " + c.chunk_id);
            index.partitions_[c.lesion].push_back(index.chunks_.size());
            index.chunks_.push_back(std::move(c));
            index.vectors_.push_back(vectors[i].get<std::vector<double>>());
            if (index.vectors_.back().size() != index.embedder_->dim())
                throw ArtifactError("index: vector dimension mismatch");
        }
        if (j.value("sealed", false)) index.sealed_ = true;
        return index;
    }

    static VectorIndex load(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path))
            throw ArtifactError("index file not found: " + path.string());
        return from_json(json::parse(util::read_file(path)));
    }

private:
    std::shared_ptr<const Embedder> embedder_;
    std::vector<KnowledgeChunk> chunks_;
    std::vector<std::vector<double>> vectors_;
    std::map<Lesion, std::vector<size_t>> partitions_;
    std::map<std::string, size_t> ids_;
    bool sealed_ = false;
};

// Chunk + embed an ingested corpus into a sealed index.
inline VectorIndex build_index(const std::map<Lesion, std::vector<ingest::RawDocument>>& corpus,
                               std::shared_ptr<const Embedder> embedder, size_t chunk_size,
                               size_t chunk_overlap) {
    VectorIndex index(std::move(embedder));
    for (const auto& [lesion, docs] : corpus) {
        for (const auto& doc : docs) {
            for (auto& chunk : chunk_document(doc, chunk_size, chunk_overlap, lesion))
                index.add(chunk);
        }
    }
    index.seal();
    return index;
}

}  // namespace dallm::kstore
