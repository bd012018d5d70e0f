#pragma once

#include <span>
#include <string>
#include <vector>

#include "dynvocab/model.hpp"
#include "dynvocab/retrieval.hpp"

namespace dynvocab {

struct GenerationParams {
    std::size_t top_k = 10;
    double temperature = 1.0;
    std::size_t max_residues = 512;
    std::uint64_t seed = 0;
    std::size_t retrieval_k = 16;

    void validate() const;
    Json to_json() const;
};

struct TraceStep {
    std::string entry;  // residue letter or fragment residues
    bool fragment = false;
    double probability = 0.0;  // under the (masked) joint distribution
    std::size_t residues = 0;  // cumulative residue count after this step

    bool operator==(const TraceStep&) const = default;
};

struct GenerationTrace {
    std::vector<TraceStep> steps;
    std::string stop_reason;  // "eos", "max_residues" or "max_steps"

    bool operator==(const GenerationTrace&) const = default;
};

struct Design {
    std::string sequence;
    GenerationTrace trace;
    std::vector<FragmentCandidate> candidates;  // the call's dynamic vocabulary
};

/// Keeps the top_k most probable entries (ties to the lower index),
/// rescales log-probabilities by 1/temperature, renormalises and samples.
std::size_t top_k_filter_sample(std::span<const double> dist, std::size_t top_k,
                                double temperature, Rng& rng);

/// Autoregressive decoding from BOS over a fixed dynamic vocabulary.
Design decode(const DecodingContext& context, const GenerationParams& params, Rng& rng);

/// Retrieves min(K, index size) supporting documents for the description,
/// encodes their fragments once and decodes.
Design generate(const Model& model, std::string_view description, const EmbeddingIndex& index,
                const GenerationParams& params);

/// ceil(K * mean annotations per record) fragments drawn uniformly with
/// replacement from all corpus annotations (uniform_index on `rng`).
std::vector<FragmentCandidate> sample_unconditional_candidates(
    std::span<const ProteinRecord> corpus, std::size_t k, Rng& rng);

/// Fixed instruction text with randomly sampled corpus fragments as candidates.
Design generate_unconditional(const Model& model, std::span<const ProteinRecord> corpus,
                              const GenerationParams& params);

Json design_to_json(const std::string& id, std::string_view description, const Design& design,
                    const GenerationParams& params, const std::string& checkpoint_fingerprint);

}  // namespace dynvocab
