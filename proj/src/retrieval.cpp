#include "dynvocab/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace dynvocab {

std::vector<double> unit_normalized(std::span<const double> v) {
    const double norm = diff::l2_norm(v);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw std::invalid_argument("cannot normalise a zero or non-finite vector");
    }
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= norm;
    return out;
}

std::vector<double> embed_description(const Model& model, std::string_view text) {
    if (text.empty()) {
        throw std::invalid_argument("cannot embed an empty description");
    }
    diff::Graph g(diff::GraphOptions{false, false, 0});
    const diff::Matrix pooled = diff::mean_rows(model.text_states(g, text)).value();
    return unit_normalized(pooled.row(0));
}

std::vector<double> ModelDescriptionEmbedder::embed(std::string_view text) const {
    return embed_description(*model_, text);
}

EmbeddingIndex::EmbeddingIndex(diff::Matrix rows, std::vector<ProteinRecord> documents,
                               std::string fingerprint)
    : rows_(std::move(rows)), documents_(std::move(documents)), fingerprint_(std::move(fingerprint)) {
    if (documents_.empty()) {
        throw std::invalid_argument("an index needs at least one document");
    }
    if (rows_.rows() != documents_.size()) {
        throw std::invalid_argument("index rows and documents differ in count");
    }
    for (std::size_t r = 0; r < rows_.rows(); ++r) {
        if (std::abs(diff::l2_norm(rows_.row(r)) - 1.0) > 1e-9) {
            throw std::invalid_argument("index row " + std::to_string(r) + " is not unit norm");
        }
    }
}

std::vector<ScoredDocument> EmbeddingIndex::search(std::span<const double> query,
                                                   std::size_t k) const {
    if (k < 1 || k > size()) {
        throw std::out_of_range("K = " + std::to_string(k) + " outside [1, " +
                                std::to_string(size()) + "]");
    }
    if (query.size() != dim()) {
        throw std::invalid_argument("query dimension does not match the index");
    }
    const auto q = unit_normalized(query);
    std::vector<ScoredDocument> scored(size());
    for (std::size_t i = 0; i < size(); ++i) {
        scored[i] = ScoredDocument{i, diff::dot(q, rows_.row(i))};
    }
    auto better = [](const ScoredDocument& a, const ScoredDocument& b) {
        return a.score > b.score || (a.score == b.score && a.index < b.index);
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k),
                      scored.end(), better);
    scored.resize(k);
    return scored;
}

void EmbeddingIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write index " + path.string());
    }
    write_framed_header(out, Json{{"format", "dynvocab-index"},
                                  {"version", 1},
                                  {"dim", dim()},
                                  {"count", size()},
                                  {"fingerprint", fingerprint_}});
    write_f64(out, rows_.values());
    for (const auto& doc : documents_) {
        out << record_to_json(doc).dump() << '\n';
    }
    if (!out) {
        throw std::runtime_error("failed writing index " + path.string());
    }
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open index " + path.string());
    }
    const std::string what = "index " + path.string();
    const Json header = read_framed_header(in, what);
    if (header.value("format", "") != "dynvocab-index") {
        throw std::runtime_error(what + ": not an index file");
    }
    const auto count = header.at("count").get<std::size_t>();
    diff::Matrix rows(count, header.at("dim").get<std::size_t>());
    read_f64(in, rows.values(), what);
    std::vector<ProteinRecord> docs;
    std::string line;
    while (docs.size() < count && std::getline(in, line)) {
        docs.push_back(record_from_json(Json::parse(line)));
    }
    if (docs.size() != count) {
        throw std::runtime_error(what + ": document list truncated");
    }
    return EmbeddingIndex(std::move(rows), std::move(docs),
                          header.at("fingerprint").get<std::string>());
}

EmbeddingIndex build_index(std::span<const ProteinRecord> documents,
                           const DescriptionEmbedder& embedder) {
    if (documents.empty()) {
        throw std::invalid_argument("cannot build an index from zero documents");
    }
    std::vector<std::vector<double>> vectors;
    for (const auto& doc : documents) {
        validate_record(doc);
        vectors.push_back(unit_normalized(embedder.embed(doc.description)));
    }
    diff::Matrix rows(documents.size(), vectors.front().size());
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (vectors[i].size() != rows.cols()) {
            throw std::invalid_argument("embedder returned vectors of differing sizes");
        }
        std::copy(vectors[i].begin(), vectors[i].end(), rows.row(i).begin());
    }
    return EmbeddingIndex(std::move(rows), {documents.begin(), documents.end()},
                          embedder.fingerprint());
}

std::vector<ScoredDocument> retrieve_topk(const EmbeddingIndex& index,
                                          const DescriptionEmbedder& embedder,
                                          std::string_view query, std::size_t k) {
    if (embedder.fingerprint() != index.fingerprint()) {
        throw std::invalid_argument("index was built with embedder " + index.fingerprint() +
                                    ", query embedder is " + embedder.fingerprint());
    }
    return index.search(embedder.embed(query), k);
}

std::vector<FragmentCandidate> fragment_candidates(std::span<const ProteinRecord> documents) {
    std::vector<FragmentCandidate> out;
    std::unordered_set<std::string> seen;
    for (const auto& doc : documents) {
        for (const auto& f : doc.fragments) {
            std::string residues = doc.sequence.substr(f.start, f.end - f.start);
            if (seen.insert(residues).second) {
                out.push_back(FragmentCandidate{std::move(residues), f.type, f.description});
            }
        }
    }
    return out;
}

}  // namespace dynvocab
