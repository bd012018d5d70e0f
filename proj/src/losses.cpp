#include "dynvocab/losses.hpp"

#include <stdexcept>

namespace dynvocab {

using diff::Graph;
using diff::Matrix;
using diff::Var;

TrainingExample make_example(const ProteinRecord& record) {
    return TrainingExample{record.id, record.description, segment(record)};
}

BatchVocabulary batch_vocabulary(std::span<const TrainingExample> batch) {
    BatchVocabulary vocab;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& ex : batch) {
        for (const auto& step : ex.segmentation.steps) {
            const auto* frag = std::get_if<FragmentStep>(&step);
            if (!frag) continue;
            auto [it, inserted] = index.emplace(frag->residues, vocab.fragments.size());
            if (inserted) vocab.fragments.push_back(frag->residues);
            vocab.occurrences.push_back(
                FragmentOccurrence{it->second, frag->type, frag->description});
        }
    }
    return vocab;
}

Var ntp_loss(Graph& g, const Model& model, std::span<const TrainingExample> batch,
             std::span<const std::string> vocab_fragments, Var fragments) {
    if (batch.empty()) {
        throw std::invalid_argument("NTP loss needs a non-empty batch");
    }
    if (fragments.rows() != vocab_fragments.size()) {
        throw std::invalid_argument("fragment block rows do not match the vocabulary");
    }
    std::unordered_map<std::string_view, int> index;
    for (std::size_t i = 0; i < vocab_fragments.size(); ++i) {
        index.emplace(vocab_fragments[i], fragment_entry(i));
    }
    std::vector<Var> rows;
    std::vector<int> targets;
    for (const auto& ex : batch) {
        std::vector<int> ids{Vocabulary::kBos};
        for (const auto& step : ex.segmentation.steps) {
            if (const auto* frag = std::get_if<FragmentStep>(&step)) {
                auto it = index.find(frag->residues);
                if (it == index.end()) {
                    throw std::invalid_argument("record '" + ex.id + "': gold fragment '" +
                                                frag->residues +
                                                "' missing from the dynamic vocabulary");
                }
                ids.push_back(it->second);
            } else {
                ids.push_back(std::get<ResidueStep>(step).token);
            }
        }
        targets.insert(targets.end(), ids.begin() + 1, ids.end());
        targets.push_back(Vocabulary::kEos);
        Var prefix = model.text_prefix(g, model.text_states(g, ex.description));
        Var hidden = model.backbone_hidden(g, prefix, fragments, ids);
        // Text-prefix positions carry no targets.
        rows.push_back(diff::slice_rows(hidden, prefix.rows(), ids.size()));
    }
    Var logits = model.joint_logits(g, diff::concat_rows(rows), fragments);
    const std::vector<double> weights(targets.size(), 1.0);
    return diff::softmax_cross_entropy(logits, targets, weights,
                                       static_cast<double>(targets.size()),
                                       joint_support_mask(vocab_fragments.size()));
}

Var weighted_type_loss(Var logits, std::span<const FragmentType> types,
                       const TypeWeights& weights) {
    if (types.empty() || logits.rows() != types.size() || logits.cols() != kNumFragmentTypes) {
        throw std::invalid_argument("type loss needs one 8-way logit row per fragment");
    }
    std::vector<int> targets;
    std::vector<double> w;
    for (FragmentType t : types) {
        targets.push_back(static_cast<int>(t));
        w.push_back(weights.at(t));
    }
    return diff::softmax_cross_entropy(logits, targets, w, static_cast<double>(types.size()));
}

Var info_nce_loss(Var u, Var v, double tau) {
    if (u.rows() == 0 || u.rows() != v.rows() || u.cols() != v.cols()) {
        throw std::invalid_argument("InfoNCE needs matching non-empty u and v");
    }
    if (!(tau > 0.0)) {
        throw std::invalid_argument("InfoNCE temperature must be positive");
    }
    Var logits = diff::scale(diff::cosine_similarity(u, v), 1.0 / tau);
    std::vector<int> targets(u.rows());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i);
    const std::vector<double> w(u.rows(), 1.0);
    return diff::softmax_cross_entropy(logits, targets, w, static_cast<double>(u.rows()));
}

LossTerms build_total_loss(Graph& g, const Model& model, std::span<const TrainingExample> batch,
                           const TypeWeights& weights) {
    const ModelConfig& cfg = model.config();
    const BatchVocabulary vocab = batch_vocabulary(batch);
    Var block = model.fragment_block(g, vocab.fragments);

    LossTerms terms;
    terms.ntp = ntp_loss(g, model, batch, vocab.fragments, block);
    terms.total = terms.ntp;
    if (vocab.occurrences.empty()) {
        terms.type = g.constant(Matrix(1, 1));
        terms.desc = g.constant(Matrix(1, 1));
        return terms;
    }

    std::vector<int> rows;
    std::vector<FragmentType> types;
    for (const auto& occ : vocab.occurrences) {
        rows.push_back(static_cast<int>(occ.vocab_index));
        types.push_back(occ.type);
    }
    Var u = diff::gather_rows(block, rows);
    terms.type = weighted_type_loss(model.type_logits(g, u), types, weights);
    terms.type_present = true;

    // One text-encoder pass per distinct description.
    std::unordered_map<std::string, Var> projected;
    std::vector<Var> v_rows;
    for (const auto& occ : vocab.occurrences) {
        auto it = projected.find(occ.description);
        if (it == projected.end()) {
            Var v = model.description_projection(g, model.text_states(g, occ.description));
            it = projected.emplace(occ.description, v).first;
        }
        v_rows.push_back(it->second);
    }
    terms.desc = info_nce_loss(u, diff::concat_rows(v_rows), cfg.tau);
    terms.desc_present = true;

    terms.total = diff::add(terms.total, diff::scale(terms.type, cfg.alpha));
    terms.total = diff::add(terms.total, diff::scale(terms.desc, cfg.beta));
    return terms;
}

LossBreakdown to_breakdown(const LossTerms& terms) {
    return LossBreakdown{terms.total.scalar(), terms.ntp.scalar(),   terms.type.scalar(),
                         terms.desc.scalar(),  terms.type_present, terms.desc_present};
}

LossBreakdown total_loss(const Model& model, std::span<const TrainingExample> batch,
                         const TypeWeights& weights) {
    Graph g(diff::GraphOptions{false, false, 0});
    return to_breakdown(build_total_loss(g, model, batch, weights));
}

}  // namespace dynvocab
