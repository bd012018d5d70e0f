#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dynvocab/corpus.hpp"
#include "dynvocab/diff/graph.hpp"
#include "dynvocab/io.hpp"

namespace dynvocab {

/// Instruction used for unconditional design and for perplexity scoring.
inline constexpr std::string_view kUnconditionalPrompt = "Design a novel protein sequence";

/// Number of byte-level text symbols.
inline constexpr std::size_t kTextVocabSize = 256;

struct ModelConfig {
    // Decoder backbone.
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_steps = 640;  // text prefix + BOS + protein steps
    // Text encoder.
    std::size_t text_width = 32;
    std::size_t text_layers = 1;
    std::size_t text_heads = 4;
    std::size_t max_text_tokens = 128;
    // Fragment encoder (same block design as the backbone).
    std::size_t fragment_width = 32;
    std::size_t fragment_layers = 1;
    std::size_t fragment_heads = 4;
    std::size_t max_fragment_residues = 512;

    double dropout = 0.1;
    double init_std = 0.02;
    double tau = 0.07;
    double alpha = 0.2;
    double beta = 0.2;

    void validate() const;
    Json to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static ModelConfig from_json(const Json& object);

    bool operator==(const ModelConfig&) const = default;
};

struct FragmentCandidate {
    std::string residues;
    FragmentType type = FragmentType::Domain;
    std::string description;

    bool operator==(const FragmentCandidate&) const = default;
};

/// The per-context fragment set and its embedding block W_fragments.
/// Row i of `embeddings` belongs to fragments[i]; the block is used both as
/// extra input-embedding rows and, transposed, as extra output-head columns.
struct DynamicVocabulary {
    std::vector<FragmentCandidate> fragments;
    diff::Matrix embeddings;

    std::size_t size() const { return fragments.size(); }
    std::optional<std::size_t> find(std::string_view residues) const;
};

/// Output-space index of fragment i in the joint distribution.
inline int fragment_entry(std::size_t i) { return Vocabulary::kSize + static_cast<int>(i); }
/// Joint-distribution support: every fragment plus all tokens except BOS and PAD.
std::vector<bool> joint_support_mask(std::size_t fragment_count);

std::vector<int> text_tokens(std::string_view text, std::size_t max_tokens);
std::vector<int> residue_tokens(std::string_view residues);

/// Text encoder + projection, fragment encoder + projection, decoder backbone
/// and the two training-only heads, all as named arrays in one ParameterSet.
///
/// Array names: "text.*" is the text encoder proper (the part frozen during
/// training), "prefix_proj.*" maps its states into the backbone width,
/// "frag.*" is the fragment encoder and its projection, "plm.*" the backbone
/// with "plm.tok_in" = W_tokens_in and "plm.tok_out" = W_tokens_out, and
/// "head.*" the type classifier and description projection.
class Model {
public:
    Model(ModelConfig config, std::uint64_t seed);
    Model(ModelConfig config, diff::ParameterSet params);

    const ModelConfig& config() const { return config_; }
    diff::ParameterSet& params() { return params_; }
    const diff::ParameterSet& params() const { return params_; }

    bool has_training_heads() const;
    void strip_training_heads();
    /// Hash over the config and all non-head arrays.
    std::string fingerprint() const;

    // Graph builders. None of them mutate the model.
    diff::Var text_states(diff::Graph& g, std::string_view text) const;
    diff::Var text_prefix(diff::Graph& g, diff::Var states) const;
    diff::Var description_projection(diff::Graph& g, diff::Var states) const;
    diff::Var fragment_embedding(diff::Graph& g, std::string_view residues) const;
    /// m x d_model block; an m = 0 list yields a 0 x d_model block.
    diff::Var fragment_block(diff::Graph& g, std::span<const std::string> fragments) const;
    diff::Var type_logits(diff::Graph& g, diff::Var fragment_rows) const;
    /// Final hidden states over Concat(prefix, W_in[step_ids]); step ids index
    /// tokens (0..22) or fragments (23 + row of `fragments`).
    diff::Var backbone_hidden(diff::Graph& g, diff::Var prefix, diff::Var fragments,
                              std::span<const int> step_ids) const;
    /// hidden * Concat(W_tokens_out, W_fragments^T).
    diff::Var joint_logits(diff::Graph& g, diff::Var hidden, diff::Var fragments) const;

private:
    diff::Var transformer_stack(diff::Graph& g, const std::string& prefix, diff::Var x,
                                std::size_t layers, std::size_t heads) const;
    diff::Var param(diff::Graph& g, const std::string& name) const;
    // Validates array names/shapes and restores per-array decay flags.
    void check_shapes();

    ModelConfig config_;
    diff::ParameterSet params_;
};

/// H_t for a description (eval mode).
diff::Matrix encode_text(const Model& model, std::string_view description);

/// Dedupes by exact residue string (first occurrence kept) and encodes.
DynamicVocabulary encode_fragments(const Model& model,
                                   std::span<const FragmentCandidate> fragments);
DynamicVocabulary encode_fragments(const Model& model, std::span<const std::string> fragments);

/// Maps steps onto joint-distribution entries against `vocab`; throws if a
/// fragment step is not in the vocabulary.
std::vector<int> step_entries(std::span<const Step> steps, const DynamicVocabulary& vocab);

/// Precomputed prefix and fragment block for repeated next-step queries.
class DecodingContext {
public:
    DecodingContext(const Model& model, std::string_view description, DynamicVocabulary vocab);

    const DynamicVocabulary& vocabulary() const { return vocab_; }
    const ModelConfig& model_config() const { return model_->config(); }
    std::size_t prefix_length() const { return prefix_.rows(); }

    /// Distribution over |V_tokens| + m entries after the given steps
    /// (entries as from step_entries, BOS not included).
    std::vector<double> next_distribution(std::span<const int> entries) const;
    /// Distributions at every position: row i predicts entries[i]
    /// (row count = entries.size() + 1).
    diff::Matrix all_distributions(std::span<const int> entries) const;

private:
    const Model* model_;
    diff::Matrix prefix_;
    DynamicVocabulary vocab_;
};

std::vector<double> joint_step_distribution(const Model& model, std::string_view description,
                                            std::span<const Step> prefix_steps,
                                            const DynamicVocabulary& vocab);

/// The same computation restricted to W_tokens_out (no fragment columns).
std::vector<double> token_only_distribution(const Model& model, std::string_view description,
                                            std::span<const int> token_prefix);

}  // namespace dynvocab
