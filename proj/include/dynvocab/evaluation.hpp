#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynvocab/corpus.hpp"
#include "dynvocab/model.hpp"

namespace dynvocab {

/// Next-token distributions over the 23 token ids for a residue string:
/// row i predicts residue i, the final row predicts EOS.
class StepScorer {
public:
    virtual ~StepScorer() = default;
    virtual diff::Matrix step_distributions(std::string_view sequence) const = 0;
    virtual std::string fingerprint() const = 0;
};

/// Token-only (m = 0) model run on the unconditional instruction.
class ModelScorer : public StepScorer {
public:
    explicit ModelScorer(const Model& model) : model_(&model) {}
    diff::Matrix step_distributions(std::string_view sequence) const override;
    std::string fingerprint() const override { return model_->fingerprint(); }

private:
    const Model* model_;
};

/// exp of the mean negative log-likelihood over all residues plus EOS.
double perplexity(const StepScorer& scorer, std::string_view sequence);

/// Fraction of n-gram occurrences whose n-gram occurs more than once.
double repetitiveness(std::string_view sequence, std::size_t n = 3);

/// Best global alignment match count (match 1, mismatch 0, gap 0) divided by
/// the longer length.
double pairwise_identity(std::string_view a, std::string_view b);

/// 100 * (1 - mean pairwise identity over unordered pairs).
double sequence_diversity(std::span<const std::string> sequences);

/// Joint text/sequence embedding used for retrieval accuracy.
class AlignmentEmbedder {
public:
    virtual ~AlignmentEmbedder() = default;
    virtual std::vector<double> embed_text(std::string_view description) const = 0;
    virtual std::vector<double> embed_sequence(std::string_view sequence) const = 0;
};

/// Description: text encoder -> mean pool -> description projection.
/// Sequence: fragment-encoder pathway over the whole sequence (mean pool ->
/// projection). Both unit-normalised. Needs a checkpoint with training heads.
class ModelAlignmentEmbedder : public AlignmentEmbedder {
public:
    explicit ModelAlignmentEmbedder(const Model& model);
    std::vector<double> embed_text(std::string_view description) const override;
    std::vector<double> embed_sequence(std::string_view sequence) const override;

private:
    const Model* model_;
};

struct TextSequencePair {
    std::string description;
    std::string sequence;
};

/// For each pair, T - 1 distractor sequences are drawn (seeded, without
/// replacement) from the other pairs; a hit means the true sequence is
/// strictly the most similar to the description. Returns the hit rate.
double retrieval_accuracy(std::span<const TextSequencePair> pairs, std::size_t t,
                          const AlignmentEmbedder& embedder, std::uint64_t seed);

using ResidueDistribution = std::array<double, Vocabulary::kNumResidues>;

void validate_distribution(std::span<const double> dist);
char sample_residue(const ResidueDistribution& dist, Rng& rng);

std::string random_uniform(std::size_t length, Rng& rng);
std::string random_empirical(const ResidueDistribution& dist, std::size_t length, Rng& rng);

struct RandomPlusResult {
    std::string sequence;
    std::size_t decisions = 0;
    std::size_t fragment_decisions = 0;
};

/// Each decision appends a uniformly chosen pool fragment with probability
/// p_frag, else one residue from `dist`, until the length reaches target.
RandomPlusResult random_plus(const ResidueDistribution& dist,
                             std::span<const std::string> fragment_pool,
                             std::size_t target_length, Rng& rng, double p_frag = 0.10);

struct Summary {
    double mean = 0.0;
    double median = 0.0;
    double std = 0.0;  // population standard deviation
    std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

struct DesignRecord {
    std::string id;
    std::string description;
    std::string sequence;
};

std::vector<DesignRecord> load_designs(const std::filesystem::path& path);

struct MetricOptions {
    std::size_t rep_n = 3;
    std::size_t retrieval_t = 20;
    std::uint64_t seed = 0;
};

struct MetricReport {
    std::vector<std::string> ids;
    std::vector<double> lengths;
    std::optional<std::vector<double>> ppl;
    std::vector<std::optional<double>> rep;  // nullopt when shorter than n
    std::vector<std::pair<std::string, double>> diversity_by_description;
    std::optional<double> retrieval_accuracy;
    std::size_t retrieval_t = 0;
    std::vector<std::string> notices;
    Json metadata = Json::object();

    Json to_json() const;
    std::string render_table() const;
};

/// PPL needs a scorer; retrieval accuracy needs an embedder and at least T
/// designs. Missing inputs are recorded as notices and the metric omitted.
MetricReport evaluate_designs(std::span<const DesignRecord> designs, const StepScorer* scorer,
                              const AlignmentEmbedder* embedder, const MetricOptions& options);

}  // namespace dynvocab
