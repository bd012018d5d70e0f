#include "dynvocab/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "dynvocab/checkpoint.hpp"
#include "dynvocab/evaluation.hpp"
#include "dynvocab/generation.hpp"
#include "dynvocab/retrieval.hpp"
#include "dynvocab/training.hpp"

namespace dynvocab {
namespace {

namespace fs = std::filesystem;

fs::path manifest_path(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

Json base_manifest(const std::string& command, const std::vector<std::string>& args) {
    return Json{{"subcommand", command}, {"toolkit_version", kToolkitVersion}, {"argv", args}};
}

void write_json_file(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void write_jsonl(const fs::path& path, const std::vector<Json>& rows) {
    std::string text;
    for (const auto& r : rows) text += r.dump() + "\n";
    write_text(path, text);
}

Json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; results are placed
// by index so output order never depends on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
                next = n;
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// --- validate ---------------------------------------------------------------

struct ValidateArgs {
    std::string corpus;
    std::string out;
};

int cmd_validate(const ValidateArgs& a, const std::vector<std::string>& argv) {
    const auto records = load_corpus(a.corpus);
    std::map<std::string, std::size_t> histogram;
    for (int t = 0; t < kNumFragmentTypes; ++t) {
        histogram[std::string(to_string(static_cast<FragmentType>(t)))] = 0;
    }
    std::size_t fragments = 0;
    std::vector<double> lengths;
    for (const auto& r : records) {
        lengths.push_back(static_cast<double>(r.sequence.size()));
        for (const auto& f : r.fragments) {
            ++histogram[std::string(to_string(f.type))];
            ++fragments;
        }
    }
    Json report{{"corpus", a.corpus},
                {"records", records.size()},
                {"fragments", fragments},
                {"type_histogram", histogram}};
    if (!lengths.empty()) {
        const auto s = summarize(lengths);
        report["length"] = Json{{"min", *std::min_element(lengths.begin(), lengths.end())},
                                {"max", *std::max_element(lengths.begin(), lengths.end())},
                                {"mean", s.mean},
                                {"median", s.median},
                                {"std", s.std}};
    }
    std::cerr << "validate: " << records.size() << " records, " << fragments
              << " fragments, 0 errors\n";
    if (!a.out.empty()) {
        write_json_file(a.out, report);
        Json m = base_manifest("validate", argv);
        m["inputs"] = Json{{"corpus", a.corpus}};
        m["outputs"] = Json{{"report", a.out}};
        write_json_file(manifest_path(a.out), m);
    }
    return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string corpus;
    std::string out;
    std::optional<double> alpha, beta, tau, lr;
    std::optional<std::size_t> steps, seed, microbatch, effective_batch, stop_after;
    std::string resume;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
    Json cfg_json = a.config.empty() ? Json::object() : read_json_file(a.config);
    TrainConfig cfg = TrainConfig::from_json(cfg_json);
    if (a.alpha) cfg.model.alpha = *a.alpha;
    if (a.beta) cfg.model.beta = *a.beta;
    if (a.tau) cfg.model.tau = *a.tau;
    if (a.lr) cfg.max_lr = *a.lr;
    if (a.steps) cfg.total_steps = *a.steps;
    if (a.seed) cfg.seed = *a.seed;
    if (a.microbatch) cfg.microbatch_size = *a.microbatch;
    if (a.effective_batch) cfg.effective_batch_size = *a.effective_batch;
    cfg.validate();

    const auto corpus = load_corpus(a.corpus);
    TrainOptions options;
    if (!a.resume.empty()) options.resume_from = a.resume;
    options.stop_after = a.stop_after;
    std::cerr << "train: " << corpus.size() << " records, " << cfg.total_steps << " steps, alpha "
              << cfg.model.alpha << ", beta " << cfg.model.beta << "\n";
    const auto result = train(cfg, corpus, a.out, options);
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        std::cerr << "train: step " << last.step << " L " << last.loss.total << " L_NTP "
                  << last.loss.ntp << "\n";
    }
    Json m = base_manifest("train", argv);
    m["config"] = cfg.to_json();
    m["seed"] = cfg.seed;
    m["inputs"] = Json{{"corpus", a.corpus}, {"config", a.config}, {"resume", a.resume}};
    m["outputs"] = Json{{"checkpoint", result.final_checkpoint.string()},
                        {"state", result.final_state.string()},
                        {"loss_log", (fs::path(a.out) / "loss_log.jsonl").string()}};
    m["checkpoint_fingerprint"] = result.model.fingerprint();
    write_json_file(fs::path(a.out) / "train.manifest.json", m);
    return 0;
}

// --- index ------------------------------------------------------------------

struct IndexArgs {
    std::string checkpoint;
    std::string docs;
    std::string out;
};

int cmd_index(const IndexArgs& a, const std::vector<std::string>& argv) {
    const Model model = load_checkpoint(a.checkpoint);
    const auto docs = load_corpus(a.docs);
    const auto index = build_index(docs, ModelDescriptionEmbedder(model));
    index.save(a.out);
    std::cerr << "index: " << index.size() << " documents, dim " << index.dim() << "\n";
    Json m = base_manifest("index", argv);
    m["inputs"] = Json{{"checkpoint", a.checkpoint}, {"docs", a.docs}};
    m["outputs"] = Json{{"index", a.out}};
    m["checkpoint_fingerprint"] = model.fingerprint();
    m["index_fingerprint"] = index.fingerprint();
    write_json_file(manifest_path(a.out), m);
    return 0;
}

// --- generate ---------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint;
    std::string index;
    std::string description;
    std::string descriptions;
    std::string corpus;
    std::string out;
    std::string topk_retrieval = "16";
    std::size_t top_k = 10;
    double temperature = 1.0;
    std::size_t max_residues = 512;
    std::uint64_t seed = 0;
    std::size_t samples = 1;
    std::size_t workers = 1;
    bool unconditional = false;
};

struct Prompt {
    std::string id;
    std::string description;
};

std::vector<Prompt> read_prompts(const GenerateArgs& a) {
    std::vector<Prompt> out;
    if (!a.description.empty()) out.push_back({"q0", a.description});
    if (!a.descriptions.empty()) {
        const auto lines = read_lines(a.descriptions);
        for (const auto& line : lines) {
            if (line.find_first_not_of(" \t") == std::string::npos) continue;
            const std::string id = "q" + std::to_string(out.size());
            if (line.front() == '{') {
                const Json j = Json::parse(line);
                out.push_back({j.value("id", id), j.at("description").get<std::string>()});
            } else {
                out.push_back({id, line});
            }
        }
    }
    return out;
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
    std::vector<std::size_t> ks;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        long long k = 0;
        try {
            k = std::stoll(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || k < 1) {
            throw std::invalid_argument("--topk-retrieval: '" + item + "' is not a positive integer");
        }
        ks.push_back(static_cast<std::size_t>(k));
    }
    if (ks.empty()) throw std::invalid_argument("--topk-retrieval: empty list");
    return ks;
}

fs::path sweep_path(const fs::path& out, std::size_t k) {
    return out.parent_path() / (out.stem().string() + ".k" + std::to_string(k) + out.extension().string());
}

int cmd_generate(const GenerateArgs& a, bool k_given, bool index_given,
                 const std::vector<std::string>& argv) {
    const Model model = load_checkpoint(a.checkpoint);
    GenerationParams base;
    base.top_k = a.top_k;
    base.temperature = a.temperature;
    base.max_residues = a.max_residues;
    base.seed = a.seed;
    if (a.samples < 1) throw std::invalid_argument("--samples must be at least 1");

    Json m = base_manifest("generate", argv);
    m["checkpoint_fingerprint"] = model.fingerprint();
    m["seed"] = a.seed;

    if (a.unconditional) {
        if (k_given || index_given) {
            std::cerr << "warning: --unconditional ignores --index and --topk-retrieval\n";
        }
        if (a.corpus.empty()) throw std::invalid_argument("--unconditional needs --corpus");
        const auto corpus = load_corpus(a.corpus);
        std::vector<Json> rows(a.samples);
        parallel_for(a.samples, a.workers, [&](std::size_t s) {
            GenerationParams p = base;
            p.seed = derive_seed(a.seed, s);
            const Design d = generate_unconditional(model, corpus, p);
            rows[s] = design_to_json("uncond_s" + std::to_string(s), kUnconditionalPrompt, d, p,
                                     model.fingerprint());
        });
        write_jsonl(a.out, rows);
        base.validate();
        m["params"] = base.to_json();
        m["inputs"] = Json{{"checkpoint", a.checkpoint}, {"corpus", a.corpus}};
        m["outputs"] = Json::array({a.out});
        write_json_file(manifest_path(a.out), m);
        std::cerr << "generate: " << rows.size() << " unconditional designs\n";
        return 0;
    }

    if (a.index.empty()) throw std::invalid_argument("conditional generation needs --index");
    const auto prompts = read_prompts(a);
    if (prompts.empty()) {
        throw std::invalid_argument("give --description or --descriptions (or --unconditional)");
    }
    const auto index = EmbeddingIndex::load(a.index);
    if (index.fingerprint() != model.fingerprint()) {
        throw std::invalid_argument("index was built with a different checkpoint");
    }
    const auto ks = parse_k_list(a.topk_retrieval);
    const std::size_t jobs = prompts.size() * a.samples;
    Json outputs = Json::array();
    for (std::size_t k : ks) {
        if (k > index.size()) {
            std::cerr << "warning: K = " << k << " exceeds the index size " << index.size()
                      << "; using " << index.size() << "\n";
        }
        GenerationParams pk = base;
        pk.retrieval_k = k;
        pk.validate();
        std::vector<Json> rows(jobs);
        parallel_for(jobs, a.workers, [&](std::size_t job) {
            const auto& prompt = prompts[job / a.samples];
            GenerationParams p = pk;
            p.seed = derive_seed(a.seed, job);
            const Design d = generate(model, prompt.description, index, p);
            rows[job] = design_to_json(prompt.id + "_s" + std::to_string(job % a.samples),
                                       prompt.description, d, p, model.fingerprint());
        });
        const fs::path path = ks.size() == 1 ? fs::path(a.out) : sweep_path(a.out, k);
        write_jsonl(path, rows);
        outputs.push_back(path.string());
        std::cerr << "generate: K = " << k << ", " << rows.size() << " designs -> " << path.string()
                  << "\n";
    }
    m["params"] = base.to_json();
    m["topk_retrieval"] = ks;
    m["samples_per_description"] = a.samples;
    m["index_fingerprint"] = index.fingerprint();
    m["inputs"] = Json{{"checkpoint", a.checkpoint},
                       {"index", a.index},
                       {"description", a.description},
                       {"descriptions", a.descriptions}};
    m["outputs"] = outputs;
    write_json_file(manifest_path(a.out), m);
    return 0;
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
    std::string designs;
    std::string scorer;
    std::string embedder;
    std::string out;
    std::string table;
    std::size_t t = 20;
    std::size_t rep_n = 3;
    std::uint64_t seed = 0;
};

int cmd_evaluate(const EvaluateArgs& a, const std::vector<std::string>& argv) {
    const auto designs = load_designs(a.designs);
    std::optional<Model> scorer_model, embed_model;
    if (!a.scorer.empty()) scorer_model.emplace(load_checkpoint(a.scorer));
    if (!a.embedder.empty()) {
        embed_model.emplace(load_checkpoint(a.embedder));
    }
    std::optional<ModelScorer> scorer;
    if (scorer_model) scorer.emplace(*scorer_model);
    const Model* embed_source = embed_model ? &*embed_model : scorer_model ? &*scorer_model : nullptr;
    std::optional<ModelAlignmentEmbedder> embedder;
    std::vector<std::string> extra_notices;
    if (embed_source) {
        if (embed_source->has_training_heads()) {
            embedder.emplace(*embed_source);
        } else {
            extra_notices.push_back("embedder checkpoint has no training heads");
        }
    }
    MetricOptions opt{a.rep_n, a.t, a.seed};
    MetricReport report = evaluate_designs(designs, scorer ? &*scorer : nullptr,
                                           embedder ? &*embedder : nullptr, opt);
    report.notices.insert(report.notices.begin(), extra_notices.begin(), extra_notices.end());
    if (embed_source) report.metadata["embedder"] = embed_source->fingerprint();
    for (const auto& n : report.notices) std::cerr << "notice: " << n << "\n";
    write_json_file(a.out, report.to_json());
    if (!a.table.empty()) write_text(a.table, report.render_table());
    Json m = base_manifest("evaluate", argv);
    m["inputs"] = Json{{"designs", a.designs}, {"scorer", a.scorer}, {"embedder", a.embedder}};
    m["outputs"] = Json{{"report", a.out}, {"table", a.table}};
    m["params"] = Json{{"T", a.t}, {"rep_n", a.rep_n}};
    m["seed"] = a.seed;
    if (scorer_model) m["checkpoint_fingerprint"] = scorer_model->fingerprint();
    write_json_file(manifest_path(a.out), m);
    std::cerr << report.render_table();
    return 0;
}

// --- baseline ---------------------------------------------------------------

struct BaselineArgs {
    std::string kind;
    std::string corpus;
    std::string lengths_from;
    std::string out;
    std::optional<std::size_t> count;
    std::size_t min_length = 100;
    std::size_t max_length = 500;
    double p_frag = 0.10;
    std::uint64_t seed = 0;
};

int cmd_baseline(const BaselineArgs& a, const std::vector<std::string>& argv) {
    if (a.kind != "uniform" && a.kind != "empirical" && a.kind != "plus") {
        throw std::invalid_argument("--kind must be uniform, empirical or plus");
    }
    if (a.min_length < 1 || a.min_length > a.max_length) {
        throw std::invalid_argument("need 1 <= --min-length <= --max-length");
    }
    std::vector<ProteinRecord> corpus;
    if (a.kind != "uniform") {
        if (a.corpus.empty()) throw std::invalid_argument("--kind " + a.kind + " needs --corpus");
        corpus = load_corpus(a.corpus);
    }
    std::vector<DesignRecord> reference;
    if (!a.lengths_from.empty()) reference = load_designs(a.lengths_from);

    const std::size_t count = a.count ? *a.count : (reference.empty() ? 0 : reference.size());
    if (count < 1) throw std::invalid_argument("give --count or a non-empty --lengths-from file");

    Rng rng(a.seed);
    ResidueDistribution dist{};
    std::vector<std::string> pool;
    if (a.kind != "uniform") dist = empirical_aa_distribution(corpus);
    if (a.kind == "plus") {
        for (const auto& c : fragment_candidates(corpus)) pool.push_back(c.residues);
    }
    std::vector<Json> rows;
    std::size_t decisions = 0, fragment_decisions = 0;
    for (std::size_t i = 0; i < count; ++i) {
        // lengths mirror the reference in order when counts agree, else are resampled from it
        std::size_t length = 0;
        std::string description;
        if (!reference.empty()) {
            const std::size_t r = count == reference.size() ? i : uniform_index(rng, reference.size());
            length = std::max<std::size_t>(1, reference[r].sequence.size());
            description = reference[r].description;
        } else {
            length = a.min_length + uniform_index(rng, a.max_length - a.min_length + 1);
        }
        std::string seq;
        if (a.kind == "uniform") {
            seq = random_uniform(length, rng);
        } else if (a.kind == "empirical") {
            seq = random_empirical(dist, length, rng);
        } else {
            auto res = random_plus(dist, pool, length, rng, a.p_frag);
            decisions += res.decisions;
            fragment_decisions += res.fragment_decisions;
            seq = std::move(res.sequence);
        }
        rows.push_back(Json{{"id", a.kind + "_" + std::to_string(i)},
                            {"description", description},
                            {"sequence", seq},
                            {"kind", a.kind}});
    }
    write_jsonl(a.out, rows);
    Json m = base_manifest("baseline", argv);
    m["params"] = Json{{"kind", a.kind},
                       {"count", count},
                       {"p_frag", a.p_frag},
                       {"min_length", a.min_length},
                       {"max_length", a.max_length}};
    m["seed"] = a.seed;
    m["inputs"] = Json{{"corpus", a.corpus}, {"lengths_from", a.lengths_from}};
    m["outputs"] = Json{{"sequences", a.out}};
    if (a.kind == "plus") {
        m["fragment_decision_fraction"] =
            decisions ? static_cast<double>(fragment_decisions) / static_cast<double>(decisions) : 0.0;
    }
    write_json_file(manifest_path(a.out), m);
    std::cerr << "baseline: " << count << " " << a.kind << " sequences -> " << a.out << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"dynvocab: text-conditioned protein design with a dynamic fragment vocabulary"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolkitVersion);

    ValidateArgs va;
    auto* validate = app.add_subcommand("validate", "check a corpus file and summarise it");
    validate->add_option("--corpus", va.corpus, "corpus JSONL")->required();
    validate->add_option("--out", va.out, "write the report JSON here");

    TrainArgs ta;
    double alpha = 0, beta = 0, tau = 0, lr = 0;
    std::size_t steps = 0, seed = 0, micro = 0, eff = 0, stop = 0;
    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", ta.config, "training config JSON");
    tr->add_option("--corpus", ta.corpus, "training corpus JSONL")->required();
    tr->add_option("--out", ta.out, "output directory")->required();
    auto* o_alpha = tr->add_option("--alpha", alpha, "L_TYPE weight (default 0.2)");
    auto* o_beta = tr->add_option("--beta", beta, "L_DESC weight (default 0.2)");
    auto* o_tau = tr->add_option("--tau", tau, "InfoNCE temperature (default 0.07)");
    auto* o_lr = tr->add_option("--lr", lr, "maximum learning rate");
    auto* o_steps = tr->add_option("--steps", steps, "total optimizer steps");
    auto* o_seed = tr->add_option("--seed", seed, "seed");
    auto* o_micro = tr->add_option("--microbatch", micro, "microbatch size");
    auto* o_eff = tr->add_option("--effective-batch", eff, "effective batch size");
    auto* o_stop = tr->add_option("--stop-after", stop, "stop once this step is reached");
    tr->add_option("--resume", ta.resume, "resume from a saved .state file");

    IndexArgs ia;
    auto* ix = app.add_subcommand("index", "embed supporting descriptions into a search index");
    ix->add_option("--checkpoint", ia.checkpoint)->required();
    ix->add_option("--docs", ia.docs, "supporting documents (corpus JSONL)")->required();
    ix->add_option("--out", ia.out)->required();

    GenerateArgs ga;
    auto* gen = app.add_subcommand("generate", "design sequences");
    gen->add_option("--checkpoint", ga.checkpoint)->required();
    auto* o_index = gen->add_option("--index", ga.index);
    gen->add_option("--description", ga.description);
    gen->add_option("--descriptions", ga.descriptions, "one description (or JSON object) per line");
    gen->add_option("--corpus", ga.corpus, "fragment source for --unconditional");
    gen->add_option("--out", ga.out)->required();
    auto* o_k = gen->add_option("--topk-retrieval", ga.topk_retrieval,
                                "K, or a comma list for a sweep (one file per K)");
    gen->add_option("--top-k", ga.top_k, "top-k sampling cutoff");
    gen->add_option("--temperature", ga.temperature);
    gen->add_option("--max-residues", ga.max_residues);
    gen->add_option("--seed", ga.seed);
    gen->add_option("--samples", ga.samples, "designs per description");
    gen->add_option("--workers", ga.workers, "worker threads");
    gen->add_flag("--unconditional", ga.unconditional);

    EvaluateArgs ea;
    auto* ev = app.add_subcommand("evaluate", "compute sequence-level metrics");
    ev->add_option("--designs", ea.designs)->required();
    ev->add_option("--scorer", ea.scorer, "checkpoint used for PPL (and retrieval accuracy)");
    ev->add_option("--embedder", ea.embedder, "checkpoint with training heads for retrieval accuracy");
    ev->add_option("--out", ea.out)->required();
    ev->add_option("--table", ea.table, "also write an aligned text table");
    ev->add_option("--T", ea.t, "retrieval accuracy candidate count");
    ev->add_option("--rep-n", ea.rep_n, "Rep n-gram length");
    ev->add_option("--seed", ea.seed);

    BaselineArgs ba;
    std::size_t count = 0;
    auto* bl = app.add_subcommand("baseline", "random baseline sequences");
    bl->add_option("--kind", ba.kind, "uniform, empirical or plus")->required();
    bl->add_option("--corpus", ba.corpus);
    bl->add_option("--lengths-from", ba.lengths_from, "designs JSONL whose lengths are mirrored");
    bl->add_option("--out", ba.out)->required();
    auto* o_count = bl->add_option("--count", count);
    bl->add_option("--min-length", ba.min_length);
    bl->add_option("--max-length", ba.max_length);
    bl->add_option("--p-frag", ba.p_frag, "Random+ fragment probability");
    bl->add_option("--seed", ba.seed);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, std::cerr, std::cerr);
    }

    try {
        if (*validate) return cmd_validate(va, args);
        if (*tr) {
            if (*o_alpha) ta.alpha = alpha;
            if (*o_beta) ta.beta = beta;
            if (*o_tau) ta.tau = tau;
            if (*o_lr) ta.lr = lr;
            if (*o_steps) ta.steps = steps;
            if (*o_seed) ta.seed = seed;
            if (*o_micro) ta.microbatch = micro;
            if (*o_eff) ta.effective_batch = eff;
            if (*o_stop) ta.stop_after = stop;
            return cmd_train(ta, args);
        }
        if (*ix) return cmd_index(ia, args);
        if (*gen) return cmd_generate(ga, o_k->count() > 0, o_index->count() > 0, args);
        if (*ev) return cmd_evaluate(ea, args);
        if (*bl) {
            if (*o_count) ba.count = count;
            return cmd_baseline(ba, args);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace dynvocab
