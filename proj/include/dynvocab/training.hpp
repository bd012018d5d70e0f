#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynvocab/losses.hpp"
#include "dynvocab/model.hpp"

namespace dynvocab {

struct TrainConfig {
    double max_lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double warmup_fraction = 0.05;
    double decay_fraction = 0.10;
    std::size_t microbatch_size = 4;
    std::size_t effective_batch_size = 64;
    std::size_t total_steps = 1000;
    std::uint64_t seed = 0;
    bool freeze_text_encoder = true;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    ModelConfig model;                 // alpha, beta and tau live here

    void validate() const;
    Json to_json() const;
    /// Missing keys keep defaults; top-level alpha/beta/tau override the
    /// "model" section; unknown keys are rejected.
    static TrainConfig from_json(const Json& object);
};

/// Linear warmup from 0, constant plateau, then max_lr * (1 - sqrt(progress))
/// over the final decay_fraction of steps.
double lr_at(std::size_t step, const TrainConfig& config);

struct LossRecord {
    std::size_t step = 0;
    double lr = 0.0;
    LossBreakdown loss;
    double grad_norm = 0.0;  // global norm before clipping

    Json to_json() const;
    static LossRecord from_json(const Json& object);
};

struct TrainState {
    std::size_t step = 0;
    Model model;
    std::map<std::string, diff::Matrix> first_moment;
    std::map<std::string, diff::Matrix> second_moment;
    Rng rng;
    std::vector<std::size_t> order;  // current epoch permutation of the corpus
    std::size_t cursor = 0;
    std::vector<LossRecord> history;
};

TrainState init_train_state(const TrainConfig& config, std::size_t corpus_size);

/// Marks "text.*" arrays frozen (or trainable) for gradient purposes.
void apply_freeze_policy(Model& model, bool freeze_text_encoder);

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before scaling.
double clip_global_norm(diff::ParameterSet& params, double max_norm);

/// Decoupled-weight-decay Adam update from the gradients currently stored in
/// the model's parameters. Frozen arrays are untouched.
void adamw_update(TrainState& state, const TrainConfig& config, double lr);

/// Draws the next effective batch (reshuffling at epoch ends) split into microbatches.
std::vector<std::vector<TrainingExample>> next_microbatches(
    TrainState& state, const TrainConfig& config, std::span<const TrainingExample> corpus);

/// Gradient accumulation (averaged) over the microbatches, global-norm
/// clipping, AdamW. Throws on a non-finite loss naming the batch records.
LossRecord train_step(TrainState& state, const TrainConfig& config,
                      std::span<const std::vector<TrainingExample>> microbatches,
                      const TypeWeights& weights);

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const TrainConfig& config, const TypeWeights& weights);
TrainState load_train_state(const std::filesystem::path& path, TrainConfig* config = nullptr,
                            TypeWeights* weights = nullptr);

struct TrainOptions {
    std::optional<std::filesystem::path> resume_from;  // a saved train state
    std::optional<std::size_t> stop_after;             // stop once step reaches this value
};

struct TrainResult {
    Model model;
    std::vector<LossRecord> history;
    std::filesystem::path final_checkpoint;
    std::filesystem::path final_state;
};

/// Full loop. Writes into `out_dir`: loss_log.jsonl, final.ckpt, final.state
/// and, every checkpoint_every steps, step_<N>.ckpt / step_<N>.state.
TrainResult train(const TrainConfig& config, std::span<const ProteinRecord> corpus,
                  const std::filesystem::path& out_dir, const TrainOptions& options = {});

}  // namespace dynvocab
