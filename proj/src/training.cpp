#include "dynvocab/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dynvocab/checkpoint.hpp"

namespace dynvocab {

using diff::Matrix;

// -------------------------------------------------------------------- config

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(max_lr > 0.0)) fail("max_lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
    if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
    if (!(warmup_fraction >= 0.0 && decay_fraction >= 0.0)) fail("fractions must be non-negative");
    const double f = warmup_fraction + decay_fraction;
    if (!(f > 0.0 && f <= 1.0)) fail("warmup_fraction + decay_fraction must lie in (0, 1]");
    if (microbatch_size == 0 || effective_batch_size == 0) fail("batch sizes must be positive");
    if (effective_batch_size % microbatch_size != 0)
        fail("effective_batch_size must be divisible by microbatch_size");
    if (total_steps == 0) fail("total_steps must be positive");
    model.validate();
}

Json TrainConfig::to_json() const {
    return Json{{"max_lr", max_lr},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"weight_decay", weight_decay},
                {"grad_clip", grad_clip},
                {"warmup_fraction", warmup_fraction},
                {"decay_fraction", decay_fraction},
                {"microbatch_size", microbatch_size},
                {"effective_batch_size", effective_batch_size},
                {"total_steps", total_steps},
                {"seed", seed},
                {"freeze_text_encoder", freeze_text_encoder},
                {"checkpoint_every", checkpoint_every},
                {"alpha", model.alpha},
                {"beta", model.beta},
                {"tau", model.tau},
                {"model", model.to_json()}};
}

TrainConfig TrainConfig::from_json(const Json& object) {
    if (!object.is_object()) {
        throw std::invalid_argument("train config must be a JSON object");
    }
    TrainConfig c;
    if (auto it = object.find("model"); it != object.end()) {
        c.model = ModelConfig::from_json(*it);
    }
    for (const auto& [key, value] : object.items()) {
        auto real = [&](double& field) {
            if (!value.is_number()) throw std::invalid_argument("train config: '" + key + "' must be a number");
            field = value.get<double>();
        };
        auto size = [&](std::size_t& field) {
            if (!value.is_number_unsigned()) {
                throw std::invalid_argument("train config: '" + key + "' must be a non-negative integer");
            }
            field = value.get<std::size_t>();
        };
        if (key == "model") continue;
        else if (key == "max_lr") real(c.max_lr);
        else if (key == "beta1") real(c.beta1);
        else if (key == "beta2") real(c.beta2);
        else if (key == "adam_eps") real(c.adam_eps);
        else if (key == "weight_decay") real(c.weight_decay);
        else if (key == "grad_clip") real(c.grad_clip);
        else if (key == "warmup_fraction") real(c.warmup_fraction);
        else if (key == "decay_fraction") real(c.decay_fraction);
        else if (key == "microbatch_size") size(c.microbatch_size);
        else if (key == "effective_batch_size") size(c.effective_batch_size);
        else if (key == "total_steps") size(c.total_steps);
        else if (key == "checkpoint_every") size(c.checkpoint_every);
        else if (key == "seed") {
            if (!value.is_number_unsigned()) throw std::invalid_argument("train config: 'seed' must be a non-negative integer");
            c.seed = value.get<std::uint64_t>();
        } else if (key == "freeze_text_encoder") {
            if (!value.is_boolean()) throw std::invalid_argument("train config: 'freeze_text_encoder' must be a boolean");
            c.freeze_text_encoder = value.get<bool>();
        } else if (key == "alpha") real(c.model.alpha);
        else if (key == "beta") real(c.model.beta);
        else if (key == "tau") real(c.model.tau);
        else throw std::invalid_argument("train config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

double lr_at(std::size_t step, const TrainConfig& config) {
    if (step >= config.total_steps) {
        throw std::out_of_range("step " + std::to_string(step) + " outside schedule of " +
                                std::to_string(config.total_steps) + " steps");
    }
    const double total = static_cast<double>(config.total_steps);
    const double s = static_cast<double>(step);
    const double warmup_end = config.warmup_fraction * total;
    const double decay_start = (1.0 - config.decay_fraction) * total;
    if (s < warmup_end) {
        return config.max_lr * s / warmup_end;
    }
    if (s < decay_start) {
        return config.max_lr;
    }
    return config.max_lr * (1.0 - std::sqrt((s - decay_start) / (total - decay_start)));
}

// ------------------------------------------------------------------- records

Json LossRecord::to_json() const {
    return Json{{"step", step},        {"lr", lr},           {"L", loss.total},
                {"L_NTP", loss.ntp},   {"L_TYPE", loss.type}, {"L_DESC", loss.desc},
                {"grad_norm", grad_norm}};
}

LossRecord LossRecord::from_json(const Json& o) {
    LossRecord r;
    r.step = o.at("step").get<std::size_t>();
    r.lr = o.at("lr").get<double>();
    r.loss.total = o.at("L").get<double>();
    r.loss.ntp = o.at("L_NTP").get<double>();
    r.loss.type = o.at("L_TYPE").get<double>();
    r.loss.desc = o.at("L_DESC").get<double>();
    r.grad_norm = o.at("grad_norm").get<double>();
    return r;
}

// --------------------------------------------------------------------- state

void apply_freeze_policy(Model& model, bool freeze_text_encoder) {
    for (auto& [name, p] : model.params()) {
        p.requires_grad = !(freeze_text_encoder && name.rfind("text.", 0) == 0);
    }
}

TrainState init_train_state(const TrainConfig& config, std::size_t corpus_size) {
    config.validate();
    if (corpus_size == 0) {
        throw std::invalid_argument("training needs at least one record");
    }
    TrainState state{0, Model(config.model, derive_seed(config.seed, 0)), {}, {},
                     Rng(derive_seed(config.seed, 1)), {}, 0, {}};
    apply_freeze_policy(state.model, config.freeze_text_encoder);
    for (const auto& [name, p] : state.model.params()) {
        state.first_moment.emplace(name, Matrix(p.value.rows(), p.value.cols()));
        state.second_moment.emplace(name, Matrix(p.value.rows(), p.value.cols()));
    }
    state.order.resize(corpus_size);
    std::iota(state.order.begin(), state.order.end(), 0);
    state.cursor = corpus_size;  // forces a shuffle on the first draw
    return state;
}

double clip_global_norm(diff::ParameterSet& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, p] : params) {
        if (!p.requires_grad) continue;
        for (double g : p.grad.values()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& [_, p] : params) {
            if (!p.requires_grad) continue;
            for (double& g : p.grad.values()) g *= factor;
        }
    }
    return norm;
}

void adamw_update(TrainState& state, const TrainConfig& config, double lr) {
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (auto& [name, p] : state.model.params()) {
        if (!p.requires_grad) continue;
        auto theta = p.value.values();
        const auto grad = p.grad.values();
        auto m = state.first_moment.at(name).values();
        auto v = state.second_moment.at(name).values();
        const double decay = p.decay ? config.weight_decay : 0.0;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.adam_eps);
            theta[i] -= lr * (update + decay * theta[i]);
        }
    }
}

std::vector<std::vector<TrainingExample>> next_microbatches(
    TrainState& state, const TrainConfig& config, std::span<const TrainingExample> corpus) {
    if (state.order.size() != corpus.size()) {
        throw std::invalid_argument("train state was created for a corpus of a different size");
    }
    std::vector<std::vector<TrainingExample>> batches;
    for (std::size_t i = 0; i < config.effective_batch_size; ++i) {
        if (state.cursor >= state.order.size()) {
            for (std::size_t k = state.order.size(); k > 1; --k) {
                std::swap(state.order[k - 1], state.order[uniform_index(state.rng, k)]);
            }
            state.cursor = 0;
        }
        if (i % config.microbatch_size == 0) batches.emplace_back();
        batches.back().push_back(corpus[state.order[state.cursor++]]);
    }
    return batches;
}

LossRecord train_step(TrainState& state, const TrainConfig& config,
                      std::span<const std::vector<TrainingExample>> microbatches,
                      const TypeWeights& weights) {
    if (microbatches.empty()) {
        throw std::invalid_argument("train step needs at least one microbatch");
    }
    auto& params = state.model.params();
    params.zero_grad();
    LossRecord record;
    record.step = state.step;
    record.lr = lr_at(state.step, config);
    const double inv = 1.0 / static_cast<double>(microbatches.size());
    for (std::size_t i = 0; i < microbatches.size(); ++i) {
        const auto& batch = microbatches[i];
        auto batch_ids = [&] {
            std::string ids;
            for (const auto& ex : batch) ids += (ids.empty() ? "" : ",") + ex.id;
            return "step " + std::to_string(state.step) + ", microbatch " + std::to_string(i) +
                   " [" + ids + "]";
        };
        diff::Graph g(diff::GraphOptions{
            true, true, derive_seed(config.seed, 1000 + state.step * 1024 + i)});
        LossTerms terms;
        try {
            terms = build_total_loss(g, state.model, batch, weights);
        } catch (const diff::NonFiniteError& e) {
            throw std::runtime_error("non-finite loss at " + batch_ids() + ": " + e.what());
        }
        const LossBreakdown b = to_breakdown(terms);
        if (!std::isfinite(b.total)) {
            throw std::runtime_error("non-finite loss at " + batch_ids());
        }
        g.backward(terms.total);
        g.accumulate_into(params);
        record.loss.total += inv * b.total;
        record.loss.ntp += inv * b.ntp;
        record.loss.type += inv * b.type;
        record.loss.desc += inv * b.desc;
        record.loss.type_present |= b.type_present;
        record.loss.desc_present |= b.desc_present;
    }
    for (auto& [_, p] : params) {
        for (double& gv : p.grad.values()) gv *= inv;
    }
    record.grad_norm = clip_global_norm(params, config.grad_clip);
    adamw_update(state, config, record.lr);
    ++state.step;
    state.history.push_back(record);
    return record;
}

// ------------------------------------------------------------- persistence

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const TrainConfig& config, const TypeWeights& weights) {
    Json history = Json::array();
    for (const auto& r : state.history) history.push_back(r.to_json());
    Json header{{"format", "dynvocab-train-state"},
                {"version", kCheckpointVersion},
                {"train_config", config.to_json()},
                {"step", state.step},
                {"rng", serialize_rng(state.rng)},
                {"order", state.order},
                {"cursor", state.cursor},
                {"type_weights", weights.to_json()},
                {"history", std::move(history)},
                {"arrays", array_manifest(state.model.params(), true)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write train state " + path.string());
    }
    write_framed_header(out, header);
    write_arrays(out, state.model.params(), true);
    for (const auto& [name, _] : state.model.params()) write_f64(out, state.first_moment.at(name).values());
    for (const auto& [name, _] : state.model.params()) write_f64(out, state.second_moment.at(name).values());
    if (!out) {
        throw std::runtime_error("failed writing train state " + path.string());
    }
}

TrainState load_train_state(const std::filesystem::path& path, TrainConfig* config_out,
                            TypeWeights* weights_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open train state " + path.string());
    }
    const std::string what = "train state " + path.string();
    const Json header = read_framed_header(in, what);
    if (header.value("format", "") != "dynvocab-train-state") {
        throw std::runtime_error(what + ": not a train state file");
    }
    const TrainConfig config = TrainConfig::from_json(header.at("train_config"));
    diff::ParameterSet params = read_arrays(in, header.at("arrays"), what);
    TrainState state{header.at("step").get<std::size_t>(),
                     Model(config.model, std::move(params)),
                     {},
                     {},
                     deserialize_rng(header.at("rng").get<std::string>()),
                     header.at("order").get<std::vector<std::size_t>>(),
                     header.at("cursor").get<std::size_t>(),
                     {}};
    apply_freeze_policy(state.model, config.freeze_text_encoder);
    for (auto* moments : {&state.first_moment, &state.second_moment}) {
        for (const auto& [name, p] : state.model.params()) {
            Matrix m(p.value.rows(), p.value.cols());
            read_f64(in, m.values(), what);
            moments->emplace(name, std::move(m));
        }
    }
    for (const auto& r : header.at("history")) state.history.push_back(LossRecord::from_json(r));
    if (config_out) *config_out = config;
    if (weights_out) *weights_out = TypeWeights::from_json(header.at("type_weights"));
    return state;
}

// --------------------------------------------------------------------- loop

namespace {

void append_line(const std::filesystem::path& path, const std::string& line) {
    std::ofstream out(path, std::ios::app);
    out << line << '\n';
}

bool same_config(const TrainConfig& a, const TrainConfig& b) {
    return a.to_json() == b.to_json();
}

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const ProteinRecord> corpus,
                  const std::filesystem::path& out_dir, const TrainOptions& options) {
    config.validate();
    if (corpus.empty()) {
        throw std::invalid_argument("training needs at least one record");
    }
    std::vector<TrainingExample> examples;
    bool any_fragment = false;
    for (const auto& r : corpus) {
        examples.push_back(make_example(r));
        any_fragment |= !r.fragments.empty();
    }
    const TypeWeights weights = any_fragment ? compute_type_weights(corpus) : TypeWeights{};

    std::filesystem::create_directories(out_dir);
    const auto log_path = out_dir / "loss_log.jsonl";

    std::optional<TrainState> state;
    if (options.resume_from) {
        TrainConfig saved;
        state.emplace(load_train_state(*options.resume_from, &saved));
        if (!same_config(saved, config)) {
            throw std::invalid_argument("resume: train config differs from the saved state");
        }
        if (state->order.size() != examples.size()) {
            throw std::invalid_argument("resume: corpus size differs from the saved state");
        }
    } else {
        state.emplace(init_train_state(config, examples.size()));
    }
    {
        std::string log;
        for (const auto& r : state->history) log += r.to_json().dump() + "\n";
        write_text(log_path, log);
    }

    const std::size_t stop = std::min(config.total_steps, options.stop_after.value_or(config.total_steps));
    while (state->step < stop) {
        auto batches = next_microbatches(*state, config, examples);
        const LossRecord record = train_step(*state, config, batches, weights);
        append_line(log_path, record.to_json().dump());
        if (config.checkpoint_every > 0 && state->step % config.checkpoint_every == 0 &&
            state->step < config.total_steps) {
            const std::string stem = "step_" + std::to_string(state->step);
            save_checkpoint(out_dir / (stem + ".ckpt"), state->model);
            save_train_state(out_dir / (stem + ".state"), *state, config, weights);
        }
    }

    TrainResult result{state->model, state->history, out_dir / "final.ckpt", out_dir / "final.state"};
    save_checkpoint(result.final_checkpoint, state->model);
    save_train_state(result.final_state, *state, config, weights);
    return result;
}

}  // namespace dynvocab
