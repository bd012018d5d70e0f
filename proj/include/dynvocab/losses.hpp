#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynvocab/corpus.hpp"
#include "dynvocab/model.hpp"

namespace dynvocab {

/// One training pair in segmented form.
struct TrainingExample {
    std::string id;
    std::string description;
    SegmentedSequence segmentation;
};

TrainingExample make_example(const ProteinRecord& record);

/// A fragment step occurring in a batch, pointing into the batch vocabulary.
struct FragmentOccurrence {
    std::size_t vocab_index = 0;
    FragmentType type = FragmentType::Domain;
    std::string description;
};

/// Deduped union of the fragment steps of a minibatch (first-seen order),
/// plus every occurrence in batch order.
struct BatchVocabulary {
    std::vector<std::string> fragments;
    std::vector<FragmentOccurrence> occurrences;
};

BatchVocabulary batch_vocabulary(std::span<const TrainingExample> batch);

struct LossTerms {
    diff::Var total;
    diff::Var ntp;
    diff::Var type;
    diff::Var desc;
    bool type_present = false;  // false: batch had no fragments, L_TYPE = 0
    bool desc_present = false;
};

struct LossBreakdown {
    double total = 0.0;
    double ntp = 0.0;
    double type = 0.0;
    double desc = 0.0;
    bool type_present = false;
    bool desc_present = false;
};

/// Mean negative log-likelihood of every gold next step (EOS included) under
/// the joint token/fragment softmax; `fragments` must be the block encoding
/// `vocab_fragments` row by row. Throws if a gold fragment is missing.
diff::Var ntp_loss(diff::Graph& g, const Model& model, std::span<const TrainingExample> batch,
                   std::span<const std::string> vocab_fragments, diff::Var fragments);

/// Sum_r w[type_r] * CE(logits_r, type_r) / rows.
diff::Var weighted_type_loss(diff::Var logits, std::span<const FragmentType> types,
                             const TypeWeights& weights);

/// InfoNCE over cosine similarities; row i of `u` is paired with row i of `v`,
/// every other row of `v` is a negative. Normalised by the row count.
diff::Var info_nce_loss(diff::Var u, diff::Var v, double tau);

/// L = L_NTP + alpha * L_TYPE + beta * L_DESC on one minibatch, with the
/// minibatch's own dynamic vocabulary. alpha/beta/tau come from the model config.
LossTerms build_total_loss(diff::Graph& g, const Model& model,
                           std::span<const TrainingExample> batch, const TypeWeights& weights);

LossBreakdown to_breakdown(const LossTerms& terms);

/// Evaluation-mode (no dropout, no gradients) loss breakdown.
LossBreakdown total_loss(const Model& model, std::span<const TrainingExample> batch,
                         const TypeWeights& weights);

}  // namespace dynvocab
