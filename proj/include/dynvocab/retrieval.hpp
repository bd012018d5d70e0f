#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dynvocab/corpus.hpp"
#include "dynvocab/model.hpp"

namespace dynvocab {

/// Source of description vectors for retrieval. Any implementation can be
/// plugged in; the fingerprint pins an index to the embedder that built it.
class DescriptionEmbedder {
public:
    virtual ~DescriptionEmbedder() = default;
    /// Unit-norm embedding of a non-empty text.
    virtual std::vector<double> embed(std::string_view text) const = 0;
    virtual std::string fingerprint() const = 0;
};

/// Mean-pooled text-encoder states of a model, L2-normalised.
class ModelDescriptionEmbedder : public DescriptionEmbedder {
public:
    explicit ModelDescriptionEmbedder(const Model& model) : model_(&model) {}
    std::vector<double> embed(std::string_view text) const override;
    std::string fingerprint() const override { return model_->fingerprint(); }

private:
    const Model* model_;
};

std::vector<double> embed_description(const Model& model, std::string_view text);

/// Scales a vector to unit L2 norm; throws on a zero or non-finite vector.
std::vector<double> unit_normalized(std::span<const double> v);

struct ScoredDocument {
    std::size_t index = 0;  // insertion index in the index
    double score = 0.0;     // cosine similarity to the query
};

/// Exact cosine index over supporting-document descriptions.
class EmbeddingIndex {
public:
    EmbeddingIndex(diff::Matrix rows, std::vector<ProteinRecord> documents,
                   std::string fingerprint);

    std::size_t size() const { return documents_.size(); }
    std::size_t dim() const { return rows_.cols(); }
    const diff::Matrix& rows() const { return rows_; }
    const std::vector<ProteinRecord>& documents() const { return documents_; }
    const std::string& fingerprint() const { return fingerprint_; }

    /// Top-k by cosine, descending; ties go to the lower insertion index.
    std::vector<ScoredDocument> search(std::span<const double> query, std::size_t k) const;

    void save(const std::filesystem::path& path) const;
    static EmbeddingIndex load(const std::filesystem::path& path);

private:
    diff::Matrix rows_;
    std::vector<ProteinRecord> documents_;
    std::string fingerprint_;
};

EmbeddingIndex build_index(std::span<const ProteinRecord> documents,
                           const DescriptionEmbedder& embedder);

/// Rejects indexes built by a different embedder, then searches.
std::vector<ScoredDocument> retrieve_topk(const EmbeddingIndex& index,
                                          const DescriptionEmbedder& embedder,
                                          std::string_view query, std::size_t k);

/// Exact-string deduped union of fragment substrings, first-seen order, with
/// the first occurrence's annotation.
std::vector<FragmentCandidate> fragment_candidates(std::span<const ProteinRecord> documents);

}  // namespace dynvocab
