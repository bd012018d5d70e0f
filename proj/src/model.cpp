#include "dynvocab/model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dynvocab {

using diff::Graph;
using diff::Matrix;
using diff::Var;

namespace {

constexpr const char* kHeadPrefix = "head.";

void add_block(diff::ParameterSet& ps, const std::string& p, std::size_t width) {
    auto ones = [](std::size_t n) { return Matrix(1, n, 1.0); };
    ps.add(p + ".ln1.g", ones(width), false);
    ps.add(p + ".ln1.b", Matrix(1, width), false);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
        ps.add(p + ".attn." + w, Matrix(width, width));
    }
    // no key bias: q . b_k is constant across keys, so softmax cancels it
    for (const char* b : {"bq", "bv", "bo"}) {
        ps.add(p + ".attn." + b, Matrix(1, width), false);
    }
    ps.add(p + ".ln2.g", ones(width), false);
    ps.add(p + ".ln2.b", Matrix(1, width), false);
    ps.add(p + ".mlp.w1", Matrix(width, 4 * width));
    ps.add(p + ".mlp.b1", Matrix(1, 4 * width), false);
    ps.add(p + ".mlp.w2", Matrix(4 * width, width));
    ps.add(p + ".mlp.b2", Matrix(1, width), false);
}

void add_stack(diff::ParameterSet& ps, const std::string& p, std::size_t width,
               std::size_t layers) {
    for (std::size_t i = 0; i < layers; ++i) {
        add_block(ps, p + ".h" + std::to_string(i), width);
    }
    ps.add(p + ".ln_f.g", Matrix(1, width, 1.0), false);
    ps.add(p + ".ln_f.b", Matrix(1, width), false);
}

diff::ParameterSet layout(const ModelConfig& c) {
    diff::ParameterSet ps;
    ps.add("text.tok_emb", Matrix(kTextVocabSize, c.text_width));
    ps.add("text.pos_emb", Matrix(c.max_text_tokens, c.text_width));
    add_stack(ps, "text", c.text_width, c.text_layers);
    ps.add("prefix_proj.w", Matrix(c.text_width, c.d_model));
    ps.add("prefix_proj.b", Matrix(1, c.d_model), false);

    ps.add("frag.tok_emb", Matrix(Vocabulary::kSize, c.fragment_width));
    ps.add("frag.pos_emb", Matrix(c.max_fragment_residues, c.fragment_width));
    add_stack(ps, "frag", c.fragment_width, c.fragment_layers);
    ps.add("frag.proj.w", Matrix(c.fragment_width, c.d_model));
    ps.add("frag.proj.b", Matrix(1, c.d_model), false);

    ps.add("plm.tok_in", Matrix(Vocabulary::kSize, c.d_model));
    ps.add("plm.tok_out", Matrix(c.d_model, Vocabulary::kSize));
    ps.add("plm.pos_emb", Matrix(c.max_steps, c.d_model));
    add_stack(ps, "plm", c.d_model, c.n_layers);

    ps.add("head.type.w", Matrix(c.d_model, kNumFragmentTypes));
    ps.add("head.type.b", Matrix(1, kNumFragmentTypes), false);
    ps.add("head.desc.w", Matrix(c.text_width, c.d_model));
    ps.add("head.desc.b", Matrix(1, c.d_model), false);
    return ps;
}

bool is_head(const std::string& name) { return name.rfind(kHeadPrefix, 0) == 0; }

std::vector<int> positions(std::size_t n) {
    std::vector<int> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    return pos;
}

}  // namespace

// -------------------------------------------------------------------- config

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        fail("d_model must be a positive multiple of n_heads");
    if (text_width == 0 || text_heads == 0 || text_width % text_heads != 0)
        fail("text_width must be a positive multiple of text_heads");
    if (fragment_width == 0 || fragment_heads == 0 || fragment_width % fragment_heads != 0)
        fail("fragment_width must be a positive multiple of fragment_heads");
    if (max_steps < 2 || max_text_tokens == 0 || max_fragment_residues == 0)
        fail("position caps must be positive");
    if (!(tau > 0.0)) fail("tau must be positive");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) fail("alpha and beta must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (!(init_std > 0.0)) fail("init_std must be positive");
}

Json ModelConfig::to_json() const {
    return Json{{"d_model", d_model},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"max_steps", max_steps},
                {"text_width", text_width},
                {"text_layers", text_layers},
                {"text_heads", text_heads},
                {"max_text_tokens", max_text_tokens},
                {"fragment_width", fragment_width},
                {"fragment_layers", fragment_layers},
                {"fragment_heads", fragment_heads},
                {"max_fragment_residues", max_fragment_residues},
                {"dropout", dropout},
                {"init_std", init_std},
                {"tau", tau},
                {"alpha", alpha},
                {"beta", beta}};
}

ModelConfig ModelConfig::from_json(const Json& object) {
    ModelConfig c;
    if (!object.is_object()) {
        throw std::invalid_argument("model config must be a JSON object");
    }
    for (const auto& [key, value] : object.items()) {
        auto size = [&](std::size_t& field) {
            if (!value.is_number_unsigned()) {
                throw std::invalid_argument("model config: '" + key + "' must be a non-negative integer");
            }
            field = value.get<std::size_t>();
        };
        auto real = [&](double& field) {
            if (!value.is_number()) {
                throw std::invalid_argument("model config: '" + key + "' must be a number");
            }
            field = value.get<double>();
        };
        if (key == "d_model") size(c.d_model);
        else if (key == "n_layers") size(c.n_layers);
        else if (key == "n_heads") size(c.n_heads);
        else if (key == "max_steps") size(c.max_steps);
        else if (key == "text_width") size(c.text_width);
        else if (key == "text_layers") size(c.text_layers);
        else if (key == "text_heads") size(c.text_heads);
        else if (key == "max_text_tokens") size(c.max_text_tokens);
        else if (key == "fragment_width") size(c.fragment_width);
        else if (key == "fragment_layers") size(c.fragment_layers);
        else if (key == "fragment_heads") size(c.fragment_heads);
        else if (key == "max_fragment_residues") size(c.max_fragment_residues);
        else if (key == "dropout") real(c.dropout);
        else if (key == "init_std") real(c.init_std);
        else if (key == "tau") real(c.tau);
        else if (key == "alpha") real(c.alpha);
        else if (key == "beta") real(c.beta);
        else throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------- vocabulary

std::optional<std::size_t> DynamicVocabulary::find(std::string_view residues) const {
    for (std::size_t i = 0; i < fragments.size(); ++i) {
        if (fragments[i].residues == residues) return i;
    }
    return std::nullopt;
}

std::vector<bool> joint_support_mask(std::size_t fragment_count) {
    std::vector<bool> allowed(Vocabulary::kSize + fragment_count, true);
    allowed[Vocabulary::kBos] = false;
    allowed[Vocabulary::kPad] = false;
    return allowed;
}

std::vector<int> text_tokens(std::string_view text, std::size_t max_tokens) {
    if (text.empty()) {
        throw std::invalid_argument("text must be non-empty");
    }
    if (text.size() > max_tokens) {
        throw std::invalid_argument("text has " + std::to_string(text.size()) +
                                    " byte tokens, cap is " + std::to_string(max_tokens));
    }
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::vector<int> residue_tokens(std::string_view residues) {
    validate_residues(residues, "fragment");
    std::vector<int> ids;
    ids.reserve(residues.size());
    for (char c : residues) ids.push_back(*Vocabulary::residue_id(c));
    return ids;
}

// --------------------------------------------------------------------- model

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    params_ = layout(config_);
    Rng rng(seed);
    for (auto& [name, p] : params_) {
        // Weights and embeddings are Gaussian; biases and LayerNorm arrays keep
        // their layout defaults (zeros / ones).
        if (p.decay) {
            for (double& v : p.value.values()) v = config_.init_std * standard_normal(rng);
        }
    }
}

Model::Model(ModelConfig config, diff::ParameterSet params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    check_shapes();
}

void Model::check_shapes() {
    const diff::ParameterSet expected = layout(config_);
    for (const auto& [name, p] : expected) {
        if (!params_.contains(name)) {
            if (is_head(name)) continue;
            throw std::invalid_argument("missing array '" + name + "'");
        }
        auto& actual = params_.at(name);
        if (!actual.value.same_shape(p.value)) {
            throw std::invalid_argument("array '" + name + "' has the wrong shape");
        }
        actual.decay = p.decay;
    }
    for (const auto& [name, _] : params_) {
        if (!expected.contains(name)) {
            throw std::invalid_argument("unexpected array '" + name + "'");
        }
    }
}

bool Model::has_training_heads() const { return params_.contains("head.type.w"); }

void Model::strip_training_heads() {
    std::vector<std::string> heads;
    for (const auto& [name, _] : params_) {
        if (is_head(name)) heads.push_back(name);
    }
    for (const auto& name : heads) params_.erase(name);
}

std::string Model::fingerprint() const {
    Fnv1a h;
    h.update(config_.to_json().dump());
    for (const auto& [name, p] : params_) {
        if (is_head(name)) continue;
        h.update(name);
        const std::uint64_t shape[2] = {p.value.rows(), p.value.cols()};
        h.update(shape, sizeof(shape));
        h.update(p.value.values().data(), p.value.values().size_bytes());
    }
    return h.hex();
}

Var Model::param(Graph& g, const std::string& name) const { return g.param(params_.at(name)); }

Var Model::transformer_stack(Graph& g, const std::string& prefix, Var x, std::size_t layers,
                             std::size_t heads) const {
    const double rate = config_.dropout;
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string p = prefix + ".h" + std::to_string(i);
        auto P = [&](const char* suffix) { return param(g, p + suffix); };
        Var h = diff::layer_norm(x, P(".ln1.g"), P(".ln1.b"));
        Var q = diff::add_row(diff::matmul(h, P(".attn.wq")), P(".attn.bq"));
        Var k = diff::matmul(h, P(".attn.wk"));
        Var v = diff::add_row(diff::matmul(h, P(".attn.wv")), P(".attn.bv"));
        Var a = diff::causal_self_attention(q, k, v, heads);
        a = diff::add_row(diff::matmul(a, P(".attn.wo")), P(".attn.bo"));
        x = diff::add(x, diff::dropout(a, rate));
        h = diff::layer_norm(x, P(".ln2.g"), P(".ln2.b"));
        h = diff::gelu(diff::add_row(diff::matmul(h, P(".mlp.w1")), P(".mlp.b1")));
        h = diff::add_row(diff::matmul(h, P(".mlp.w2")), P(".mlp.b2"));
        x = diff::add(x, diff::dropout(h, rate));
    }
    return diff::layer_norm(x, param(g, prefix + ".ln_f.g"), param(g, prefix + ".ln_f.b"));
}

Var Model::text_states(Graph& g, std::string_view text) const {
    const auto ids = text_tokens(text, config_.max_text_tokens);
    const auto pos = positions(ids.size());
    Var x = diff::add(diff::gather_rows(param(g, "text.tok_emb"), ids),
                      diff::gather_rows(param(g, "text.pos_emb"), pos));
    x = diff::dropout(x, config_.dropout);
    return transformer_stack(g, "text", x, config_.text_layers, config_.text_heads);
}

Var Model::text_prefix(Graph& g, Var states) const {
    return diff::add_row(diff::matmul(states, param(g, "prefix_proj.w")),
                         param(g, "prefix_proj.b"));
}

Var Model::description_projection(Graph& g, Var states) const {
    if (!has_training_heads()) {
        throw std::logic_error("description projection head is absent (inference checkpoint)");
    }
    Var pooled = diff::dropout(diff::mean_rows(states), config_.dropout);
    return diff::add_row(diff::matmul(pooled, param(g, "head.desc.w")), param(g, "head.desc.b"));
}

Var Model::fragment_embedding(Graph& g, std::string_view residues) const {
    const auto ids = residue_tokens(residues);
    if (ids.size() > config_.max_fragment_residues) {
        throw std::invalid_argument("fragment of " + std::to_string(ids.size()) +
                                    " residues exceeds the encoder cap of " +
                                    std::to_string(config_.max_fragment_residues));
    }
    const auto pos = positions(ids.size());
    Var x = diff::add(diff::gather_rows(param(g, "frag.tok_emb"), ids),
                      diff::gather_rows(param(g, "frag.pos_emb"), pos));
    x = diff::dropout(x, config_.dropout);
    Var h = transformer_stack(g, "frag", x, config_.fragment_layers, config_.fragment_heads);
    return diff::add_row(diff::matmul(diff::mean_rows(h), param(g, "frag.proj.w")),
                         param(g, "frag.proj.b"));
}

Var Model::fragment_block(Graph& g, std::span<const std::string> fragments) const {
    if (fragments.empty()) {
        return g.constant(Matrix(0, config_.d_model));
    }
    std::vector<Var> rows;
    rows.reserve(fragments.size());
    for (const auto& f : fragments) rows.push_back(fragment_embedding(g, f));
    return diff::concat_rows(rows);
}

Var Model::type_logits(Graph& g, Var fragment_rows) const {
    if (!has_training_heads()) {
        throw std::logic_error("type classification head is absent (inference checkpoint)");
    }
    Var x = diff::dropout(fragment_rows, config_.dropout);
    return diff::add_row(diff::matmul(x, param(g, "head.type.w")), param(g, "head.type.b"));
}

Var Model::backbone_hidden(Graph& g, Var prefix, Var fragments,
                           std::span<const int> step_ids) const {
    const std::size_t total = prefix.rows() + step_ids.size();
    if (total > config_.max_steps) {
        throw std::invalid_argument("context of " + std::to_string(total) +
                                    " positions exceeds max_steps " +
                                    std::to_string(config_.max_steps));
    }
    const Var in_parts[] = {param(g, "plm.tok_in"), fragments};
    Var w_in = diff::concat_rows(in_parts);
    const Var x_parts[] = {prefix, diff::gather_rows(w_in, step_ids)};
    Var x = diff::concat_rows(x_parts);
    x = diff::add(x, diff::gather_rows(param(g, "plm.pos_emb"), positions(total)));
    x = diff::dropout(x, config_.dropout);
    return transformer_stack(g, "plm", x, config_.n_layers, config_.n_heads);
}

Var Model::joint_logits(Graph& g, Var hidden, Var fragments) const {
    const Var out_parts[] = {param(g, "plm.tok_out"), diff::transpose(fragments)};
    return diff::matmul(hidden, diff::concat_cols(out_parts));
}

// ----------------------------------------------------------------- inference

namespace {

Graph inference_graph() { return Graph(diff::GraphOptions{false, false, 0}); }

}  // namespace

Matrix encode_text(const Model& model, std::string_view description) {
    Graph g(diff::GraphOptions{false, false, 0});
    return model.text_prefix(g, model.text_states(g, description)).value();
}

DynamicVocabulary encode_fragments(const Model& model,
                                   std::span<const FragmentCandidate> fragments) {
    DynamicVocabulary vocab;
    for (const auto& f : fragments) {
        validate_residues(f.residues, "fragment candidate");
        if (!vocab.find(f.residues)) vocab.fragments.push_back(f);
    }
    std::vector<std::string> strings;
    for (const auto& f : vocab.fragments) strings.push_back(f.residues);
    Graph g(diff::GraphOptions{false, false, 0});
    vocab.embeddings = model.fragment_block(g, strings).value();
    return vocab;
}

DynamicVocabulary encode_fragments(const Model& model, std::span<const std::string> fragments) {
    std::vector<FragmentCandidate> candidates;
    for (const auto& f : fragments) candidates.push_back(FragmentCandidate{f, {}, {}});
    return encode_fragments(model, candidates);
}

std::vector<int> step_entries(std::span<const Step> steps, const DynamicVocabulary& vocab) {
    std::vector<int> entries;
    entries.reserve(steps.size());
    for (const auto& step : steps) {
        if (const auto* frag = std::get_if<FragmentStep>(&step)) {
            const auto idx = vocab.find(frag->residues);
            if (!idx) {
                throw std::invalid_argument("fragment '" + frag->residues +
                                            "' is not in the dynamic vocabulary");
            }
            entries.push_back(fragment_entry(*idx));
        } else {
            const int token = std::get<ResidueStep>(step).token;
            if (!Vocabulary::is_residue(token)) {
                throw std::invalid_argument("prefix step is not a residue token");
            }
            entries.push_back(token);
        }
    }
    return entries;
}

DecodingContext::DecodingContext(const Model& model, std::string_view description,
                                 DynamicVocabulary vocab)
    : model_(&model), prefix_(encode_text(model, description)), vocab_(std::move(vocab)) {
    if (vocab_.embeddings.rows() != vocab_.size() ||
        (vocab_.size() > 0 && vocab_.embeddings.cols() != model.config().d_model)) {
        throw std::invalid_argument("dynamic vocabulary block does not match the model");
    }
}

Matrix DecodingContext::all_distributions(std::span<const int> entries) const {
    const int limit = fragment_entry(vocab_.size());
    std::vector<int> ids;
    ids.reserve(entries.size() + 1);
    ids.push_back(Vocabulary::kBos);
    for (int e : entries) {
        if (e < 0 || e >= limit || e == Vocabulary::kBos || e == Vocabulary::kPad) {
            throw std::invalid_argument("step entry " + std::to_string(e) + " is not valid here");
        }
        ids.push_back(e);
    }
    Graph g = inference_graph();
    Var block = g.constant(vocab_.size() > 0 ? vocab_.embeddings
                                             : Matrix(0, model_->config().d_model));
    Var hidden = model_->backbone_hidden(g, g.constant(prefix_), block, ids);
    Var rows = diff::slice_rows(hidden, prefix_.rows(), ids.size());
    Var logits = model_->joint_logits(g, rows, block);
    return diff::masked_softmax(logits.value(), joint_support_mask(vocab_.size()));
}

std::vector<double> DecodingContext::next_distribution(std::span<const int> entries) const {
    const Matrix all = all_distributions(entries);
    const auto last = all.row(all.rows() - 1);
    return {last.begin(), last.end()};
}

std::vector<double> joint_step_distribution(const Model& model, std::string_view description,
                                            std::span<const Step> prefix_steps,
                                            const DynamicVocabulary& vocab) {
    const auto entries = step_entries(prefix_steps, vocab);
    DecodingContext ctx(model, description, vocab);
    return ctx.next_distribution(entries);
}

std::vector<double> token_only_distribution(const Model& model, std::string_view description,
                                            std::span<const int> token_prefix) {
    Graph g = inference_graph();
    Var prefix = model.text_prefix(g, model.text_states(g, description));
    std::vector<int> ids{Vocabulary::kBos};
    ids.insert(ids.end(), token_prefix.begin(), token_prefix.end());
    Var hidden = model.backbone_hidden(g, prefix, g.constant(Matrix(0, model.config().d_model)),
                                       ids);
    Var last = diff::slice_rows(hidden, hidden.rows() - 1, 1);
    Var logits = diff::matmul(last, g.param(model.params().at("plm.tok_out")));
    const Matrix p = diff::masked_softmax(logits.value(), joint_support_mask(0));
    return {p.values().begin(), p.values().end()};
}

}  // namespace dynvocab
