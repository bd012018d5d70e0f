#include "dynvocab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "dynvocab/retrieval.hpp"

namespace dynvocab {

using diff::Graph;
using diff::GraphOptions;
using diff::Matrix;

Matrix ModelScorer::step_distributions(std::string_view sequence) const {
    DecodingContext ctx(*model_, kUnconditionalPrompt, DynamicVocabulary{{}, Matrix(0, 0)});
    if (sequence.empty()) return ctx.all_distributions({});  // EOS only
    return ctx.all_distributions(residue_tokens(sequence));
}

double perplexity(const StepScorer& scorer, std::string_view sequence) {
    if (!sequence.empty()) validate_residues(sequence, "sequence");  // empty: EOS only
    const Matrix dist = scorer.step_distributions(sequence);
    const std::size_t n = sequence.size() + 1;
    if (dist.rows() != n || dist.cols() < static_cast<std::size_t>(Vocabulary::kSize)) {
        throw std::invalid_argument("scorer returned a distribution matrix of the wrong shape");
    }
    // long double keeps exp(mean) exact for constant-probability scorers
    long double nll = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
        const int target = i < sequence.size() ? *Vocabulary::residue_id(sequence[i]) : Vocabulary::kEos;
        const double p = dist(i, static_cast<std::size_t>(target));
        if (!(p > 0.0)) return std::numeric_limits<double>::infinity();
        nll -= std::log(static_cast<long double>(p));
    }
    return static_cast<double>(std::exp(nll / static_cast<long double>(n)));
}

double repetitiveness(std::string_view sequence, std::size_t n) {
    if (n == 0) throw std::invalid_argument("n-gram length must be positive");
    if (sequence.size() < n) {
        throw std::invalid_argument("sequence of length " + std::to_string(sequence.size()) +
                                    " is shorter than n = " + std::to_string(n));
    }
    const std::size_t grams = sequence.size() - n + 1;
    std::unordered_map<std::string_view, std::size_t> counts;
    for (std::size_t i = 0; i < grams; ++i) ++counts[sequence.substr(i, n)];
    std::size_t repeated = 0;
    for (const auto& [gram, c] : counts) {
        if (c > 1) repeated += c;
    }
    return static_cast<double>(repeated) / static_cast<double>(grams);
}

double pairwise_identity(std::string_view a, std::string_view b) {
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("pairwise identity needs two non-empty sequences");
    }
    // match 1 / mismatch 0 / gap 0 global alignment is the LCS length
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[b.size()]) / static_cast<double>(std::max(a.size(), b.size()));
}

double sequence_diversity(std::span<const std::string> sequences) {
    const std::size_t n = sequences.size();
    if (n < 2) throw std::invalid_argument("diversity needs at least two sequences");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) total += pairwise_identity(sequences[i], sequences[j]);
    }
    const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
    return 100.0 * (1.0 - total / pairs);
}

ModelAlignmentEmbedder::ModelAlignmentEmbedder(const Model& model) : model_(&model) {
    if (!model.has_training_heads()) {
        throw std::invalid_argument(
            "retrieval accuracy needs a checkpoint saved with its training heads");
    }
}

std::vector<double> ModelAlignmentEmbedder::embed_text(std::string_view description) const {
    Graph g(GraphOptions{false, false, 0});
    auto u = model_->description_projection(g, model_->text_states(g, description));
    return unit_normalized(u.value().row(0));
}

std::vector<double> ModelAlignmentEmbedder::embed_sequence(std::string_view sequence) const {
    validate_residues(sequence, "sequence");
    Graph g(GraphOptions{false, false, 0});
    auto v = model_->fragment_embedding(g, sequence);
    return unit_normalized(v.value().row(0));
}

double retrieval_accuracy(std::span<const TextSequencePair> pairs, std::size_t t,
                          const AlignmentEmbedder& embedder, std::uint64_t seed) {
    if (t < 1) throw std::invalid_argument("T must be at least 1");
    const std::size_t n = pairs.size();
    if (n < t) {
        throw std::invalid_argument("retrieval accuracy with T = " + std::to_string(t) +
                                    " needs at least that many pairs, got " + std::to_string(n));
    }
    std::vector<std::vector<double>> texts, seqs;
    texts.reserve(n);
    seqs.reserve(n);
    for (const auto& p : pairs) {
        texts.push_back(embedder.embed_text(p.description));
        seqs.push_back(embedder.embed_sequence(p.sequence));
    }
    Rng rng(seed);
    std::vector<std::size_t> others;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        others.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) others.push_back(j);
        }
        // partial Fisher-Yates: the first t-1 slots become the distractors
        for (std::size_t s = 0; s + 1 < t; ++s) {
            const std::size_t pick = s + uniform_index(rng, others.size() - s);
            std::swap(others[s], others[pick]);
        }
        const double gold = diff::dot(texts[i], seqs[i]);
        bool best = true;
        for (std::size_t s = 0; s + 1 < t && best; ++s) {
            if (diff::dot(texts[i], seqs[others[s]]) >= gold) best = false;
        }
        hits += best ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

void validate_distribution(std::span<const double> dist) {
    if (dist.size() != Vocabulary::kNumResidues) {
        throw std::invalid_argument("residue distribution must have 20 entries");
    }
    double sum = 0.0;
    for (double p : dist) {
        if (!std::isfinite(p) || p < 0.0) {
            throw std::invalid_argument("residue distribution has a negative or non-finite entry");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("residue distribution sums to " + std::to_string(sum));
    }
}

char sample_residue(const ResidueDistribution& dist, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
        if (dist[i] <= 0.0) continue;
        acc += dist[i];
        last = i;
        if (u < acc) return Vocabulary::residue(static_cast<int>(i));
    }
    return Vocabulary::residue(static_cast<int>(last));  // rounding slack at the top end
}

std::string random_uniform(std::size_t length, Rng& rng) {
    if (length < 1) throw std::invalid_argument("length must be at least 1");
    std::string out(length, 'A');
    for (char& c : out) {
        c = Vocabulary::residue(static_cast<int>(uniform_index(rng, Vocabulary::kNumResidues)));
    }
    return out;
}

std::string random_empirical(const ResidueDistribution& dist, std::size_t length, Rng& rng) {
    validate_distribution(dist);
    if (length < 1) throw std::invalid_argument("length must be at least 1");
    std::string out(length, 'A');
    for (char& c : out) c = sample_residue(dist, rng);
    return out;
}

RandomPlusResult random_plus(const ResidueDistribution& dist,
                             std::span<const std::string> fragment_pool,
                             std::size_t target_length, Rng& rng, double p_frag) {
    validate_distribution(dist);
    if (!(p_frag >= 0.0 && p_frag <= 1.0)) throw std::invalid_argument("p_frag must be in [0, 1]");
    if (target_length < 1) throw std::invalid_argument("target length must be at least 1");
    if (p_frag > 0.0 && fragment_pool.empty()) {
        throw std::invalid_argument("Random+ needs a non-empty fragment pool");
    }
    for (const auto& f : fragment_pool) {
        if (f.empty()) throw std::invalid_argument("fragment pool contains an empty fragment");
        validate_residues(f, "fragment pool entry");
    }
    RandomPlusResult out;
    while (out.sequence.size() < target_length) {
        // no coin at p = 0 or 1, so p = 0 replays random_empirical exactly
        bool fragment = p_frag >= 1.0;
        if (p_frag > 0.0 && p_frag < 1.0) fragment = uniform01(rng) < p_frag;
        ++out.decisions;
        if (fragment) {
            ++out.fragment_decisions;
            out.sequence += fragment_pool[uniform_index(rng, fragment_pool.size())];
        } else {
            out.sequence.push_back(sample_residue(dist, rng));
        }
    }
    return out;
}

Summary summarize(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("cannot summarise an empty list");
    Summary s;
    s.count = values.size();
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.count);
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t mid = s.count / 2;
    s.median = s.count % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(var / static_cast<double>(s.count));
    return s;
}

std::vector<DesignRecord> load_designs(const std::filesystem::path& path) {
    std::vector<DesignRecord> out;
    const auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
        try {
            const Json j = Json::parse(lines[i]);
            DesignRecord d;
            d.id = j.at("id").get<std::string>();
            d.sequence = j.at("sequence").get<std::string>();
            d.description = j.value("description", std::string());
            // an immediate EOS yields a legitimate empty design
            if (!d.sequence.empty()) validate_residues(d.sequence, "design " + d.id);
            out.push_back(std::move(d));
        } catch (const std::exception& e) {
            throw CorpusError(i + 1, e.what());
        }
    }
    return out;
}

namespace {

Json summary_json(std::span<const double> values) {
    if (values.empty()) return nullptr;
    const Summary s = summarize(values);
    return Json{{"mean", s.mean}, {"median", s.median}, {"std", s.std}, {"count", s.count}};
}

std::vector<double> present(std::span<const std::optional<double>> values) {
    std::vector<double> out;
    for (const auto& v : values) {
        if (v) out.push_back(*v);
    }
    return out;
}

}  // namespace

Json MetricReport::to_json() const {
    Json per = Json::array();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        Json row{{"id", ids[i]}, {"length", lengths[i]}};
        if (ppl) row["ppl"] = (*ppl)[i];
        row["rep"] = rep[i] ? Json(*rep[i]) : Json(nullptr);
        per.push_back(std::move(row));
    }
    Json aggregate{{"length", summary_json(lengths)}};
    if (ppl) aggregate["ppl"] = summary_json(*ppl);
    aggregate["rep"] = summary_json(present(rep));

    Json groups = Json::array();
    std::vector<double> div;
    for (const auto& [desc, value] : diversity_by_description) {
        groups.push_back(Json{{"description", desc}, {"value", value}});
        div.push_back(value);
    }
    Json out{{"metadata", metadata},
             {"per_sequence", std::move(per)},
             {"aggregate", std::move(aggregate)},
             {"diversity", Json{{"groups", std::move(groups)}, {"summary", summary_json(div)}}}};
    if (retrieval_accuracy) {
        out["retrieval_accuracy"] = Json{{"T", retrieval_t}, {"value", *retrieval_accuracy}};
    }
    out["notices"] = notices;
    return out;
}

std::string MetricReport::render_table() const {
    std::ostringstream out;
    out << std::left << std::setw(22) << "metric" << std::right << std::setw(12) << "mean"
        << std::setw(12) << "median" << std::setw(12) << "std" << std::setw(8) << "n" << '\n';
    auto line = [&](const std::string& name, std::span<const double> values) {
        out << std::left << std::setw(22) << name << std::right;
        if (values.empty()) {
            out << std::setw(12) << "-" << std::setw(12) << "-" << std::setw(12) << "-"
                << std::setw(8) << 0 << '\n';
            return;
        }
        const Summary s = summarize(values);
        out << std::fixed << std::setprecision(4) << std::setw(12) << s.mean << std::setw(12)
            << s.median << std::setw(12) << s.std << std::setw(8) << s.count << '\n';
    };
    line("length", lengths);
    if (ppl) line("ppl", *ppl);
    line("rep", present(rep));
    std::vector<double> div;
    for (const auto& g : diversity_by_description) div.push_back(g.second);
    line("diversity", div);
    if (retrieval_accuracy) {
        out << std::left << std::setw(22) << ("retrieval_acc@T=" + std::to_string(retrieval_t))
            << std::right << std::fixed << std::setprecision(4) << std::setw(12)
            << *retrieval_accuracy << '\n';
    }
    return out.str();
}

MetricReport evaluate_designs(std::span<const DesignRecord> designs, const StepScorer* scorer,
                              const AlignmentEmbedder* embedder, const MetricOptions& options) {
    MetricReport report;
    report.metadata = Json{{"rep_n", options.rep_n},
                           {"retrieval_T", options.retrieval_t},
                           {"seed", options.seed},
                           {"scorer", scorer ? Json(scorer->fingerprint()) : Json(nullptr)},
                           {"designs", designs.size()}};
    if (!scorer) {
        report.notices.push_back("no scorer checkpoint given; PPL omitted");
    } else {
        report.ppl.emplace();
    }
    std::size_t short_count = 0;
    for (const auto& d : designs) {
        report.ids.push_back(d.id);
        report.lengths.push_back(static_cast<double>(d.sequence.size()));
        if (scorer) report.ppl->push_back(perplexity(*scorer, d.sequence));
        if (d.sequence.size() >= options.rep_n) {
            report.rep.push_back(repetitiveness(d.sequence, options.rep_n));
        } else {
            report.rep.push_back(std::nullopt);
            ++short_count;
        }
    }
    if (short_count > 0) {
        report.notices.push_back(std::to_string(short_count) +
                                 " design(s) shorter than the Rep n-gram length; Rep omitted for them");
    }

    // diversity per description, groups in first-appearance order
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::string>> groups;
    std::size_t empty_count = 0;
    for (const auto& d : designs) {
        if (d.sequence.empty()) {
            ++empty_count;
            continue;
        }
        auto [it, fresh] = groups.try_emplace(d.description);
        if (fresh) order.push_back(d.description);
        it->second.push_back(d.sequence);
    }
    if (empty_count > 0) {
        report.notices.push_back(std::to_string(empty_count) +
                                 " empty design(s) excluded from diversity and retrieval accuracy");
    }
    for (const auto& desc : order) {
        const auto& seqs = groups.at(desc);
        if (seqs.size() >= 2) report.diversity_by_description.emplace_back(desc, sequence_diversity(seqs));
    }
    if (report.diversity_by_description.empty()) {
        report.notices.push_back("no description has two or more designs; diversity omitted");
    }

    std::vector<TextSequencePair> pairs;
    for (const auto& d : designs) {
        if (!d.sequence.empty() && !d.description.empty()) pairs.push_back({d.description, d.sequence});
    }
    if (!embedder) {
        report.notices.push_back("no embedder available; retrieval accuracy omitted");
    } else if (pairs.size() < options.retrieval_t) {
        report.notices.push_back("only " + std::to_string(pairs.size()) +
                                 " description/sequence pairs for T = " +
                                 std::to_string(options.retrieval_t) + "; retrieval accuracy omitted");
    } else {
        report.retrieval_t = options.retrieval_t;
        report.retrieval_accuracy =
            retrieval_accuracy(pairs, options.retrieval_t, *embedder, options.seed);
    }
    return report;
}

}  // namespace dynvocab
