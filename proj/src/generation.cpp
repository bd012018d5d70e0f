#include "dynvocab/generation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dynvocab {

void GenerationParams::validate() const {
    if (top_k < 1) throw std::invalid_argument("top_k must be at least 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (max_residues < 1) throw std::invalid_argument("max_residues must be at least 1");
    if (retrieval_k < 1) throw std::invalid_argument("retrieval K must be at least 1");
}

Json GenerationParams::to_json() const {
    return Json{{"top_k", top_k},
                {"temperature", temperature},
                {"max_residues", max_residues},
                {"seed", seed},
                {"K", retrieval_k}};
}

std::size_t top_k_filter_sample(std::span<const double> dist, std::size_t top_k,
                                double temperature, Rng& rng) {
    if (dist.empty()) throw std::invalid_argument("empty distribution");
    if (top_k < 1) throw std::invalid_argument("top_k must be at least 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    double total = 0.0;
    for (double p : dist) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw std::invalid_argument("distribution has a negative or non-finite entry");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument("distribution does not sum to 1");
    }
    std::vector<std::size_t> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
    std::size_t kept = 0;
    while (kept < order.size() && kept < top_k && dist[order[kept]] > 0.0) ++kept;

    const double top_log = std::log(dist[order[0]]);
    std::vector<double> weights(kept);
    double z = 0.0;
    for (std::size_t i = 0; i < kept; ++i) {
        weights[i] = std::exp((std::log(dist[order[i]]) - top_log) / temperature);
        z += weights[i];
    }
    double u = uniform01(rng) * z;
    for (std::size_t i = 0; i < kept; ++i) {
        if (u < weights[i]) return order[i];
        u -= weights[i];
    }
    return order[kept - 1];
}

Design decode(const DecodingContext& context, const GenerationParams& params, Rng& rng) {
    params.validate();
    const DynamicVocabulary& vocab = context.vocabulary();
    const std::size_t max_positions = context.model_config().max_steps;
    Design design;
    design.candidates = vocab.fragments;
    std::vector<int> entries;
    while (true) {
        if (design.sequence.size() >= params.max_residues) {
            design.trace.stop_reason = "max_residues";
            break;
        }
        if (context.prefix_length() + 1 + entries.size() >= max_positions) {
            design.trace.stop_reason = "max_steps";
            break;
        }
        std::vector<double> dist = context.next_distribution(entries);
        // Fragments that would overflow max_residues leave the support.
        double kept = 0.0;
        for (std::size_t i = 0; i < vocab.size(); ++i) {
            auto& p = dist[static_cast<std::size_t>(fragment_entry(i))];
            if (design.sequence.size() + vocab.fragments[i].residues.size() > params.max_residues) {
                p = 0.0;
            }
        }
        for (double p : dist) kept += p;
        for (double& p : dist) p /= kept;

        const auto choice = top_k_filter_sample(dist, params.top_k, params.temperature, rng);
        if (static_cast<int>(choice) == Vocabulary::kEos) {
            design.trace.stop_reason = "eos";
            break;
        }
        TraceStep step;
        step.probability = dist[choice];
        if (choice >= static_cast<std::size_t>(Vocabulary::kSize)) {
            step.fragment = true;
            step.entry = vocab.fragments[choice - Vocabulary::kSize].residues;
        } else {
            step.entry = std::string(1, Vocabulary::residue(static_cast<int>(choice)));
        }
        design.sequence += step.entry;
        step.residues = design.sequence.size();
        design.trace.steps.push_back(std::move(step));
        entries.push_back(static_cast<int>(choice));
    }
    return design;
}

Design generate(const Model& model, std::string_view description, const EmbeddingIndex& index,
                const GenerationParams& params) {
    params.validate();
    const ModelDescriptionEmbedder embedder(model);
    const auto hits =
        retrieve_topk(index, embedder, description, std::min(params.retrieval_k, index.size()));
    std::vector<ProteinRecord> docs;
    for (const auto& hit : hits) docs.push_back(index.documents()[hit.index]);
    const auto candidates = fragment_candidates(docs);
    DecodingContext context(model, description, encode_fragments(model, candidates));
    Rng rng(params.seed);
    return decode(context, params, rng);
}

std::vector<FragmentCandidate> sample_unconditional_candidates(
    std::span<const ProteinRecord> corpus, std::size_t k, Rng& rng) {
    std::vector<FragmentCandidate> pool;
    for (const auto& r : corpus) {
        for (const auto& f : r.fragments) {
            pool.push_back(
                FragmentCandidate{r.sequence.substr(f.start, f.end - f.start), f.type, f.description});
        }
    }
    if (pool.empty() || corpus.empty()) {
        return {};
    }
    const double mean_per_record =
        static_cast<double>(pool.size()) / static_cast<double>(corpus.size());
    const auto count = static_cast<std::size_t>(std::ceil(static_cast<double>(k) * mean_per_record));
    std::vector<FragmentCandidate> drawn;
    drawn.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        drawn.push_back(pool[uniform_index(rng, pool.size())]);
    }
    return drawn;
}

Design generate_unconditional(const Model& model, std::span<const ProteinRecord> corpus,
                              const GenerationParams& params) {
    params.validate();
    Rng rng(params.seed);
    const auto candidates = sample_unconditional_candidates(corpus, params.retrieval_k, rng);
    DecodingContext context(model, kUnconditionalPrompt, encode_fragments(model, candidates));
    return decode(context, params, rng);
}

Json design_to_json(const std::string& id, std::string_view description, const Design& design,
                    const GenerationParams& params, const std::string& checkpoint_fingerprint) {
    Json trace = Json::array();
    for (const auto& s : design.trace.steps) {
        trace.push_back(Json{{"entry", s.entry},
                             {"fragment", s.fragment},
                             {"probability", s.probability},
                             {"residues", s.residues}});
    }
    return Json{{"id", id},
                {"description", std::string(description)},
                {"sequence", design.sequence},
                {"trace", std::move(trace)},
                {"stop_reason", design.trace.stop_reason},
                {"params", params.to_json()},
                {"checkpoint", checkpoint_fingerprint}};
}

}  // namespace dynvocab
