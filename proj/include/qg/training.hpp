#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "qg/squad.hpp"
#include "qg/transformer.hpp"

namespace qg {

struct TrainConfig {
  double learning_rate = 1e-3;  // peak rate, reached at the end of warmup
  std::size_t warmup_steps = 400;
  std::size_t batch_size = 32;
  std::size_t total_steps = 2000;
  std::size_t checkpoint_every = 500;  // 0: final checkpoint only
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  double label_smoothing = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double weight_decay = 0.0;

  void validate() const;
};

// base · min(step/warmup, sqrt(warmup/step)) for step ≥ 1.
double learning_rate_at(const TrainConfig& config, std::size_t step);

struct TrainState {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor> first_moment;   // parameter order
  std::vector<Tensor> second_moment;

  static TrainState fresh(const Transformer& model, std::uint64_t seed);
};

// Mean cross-entropy of logits against targets over non-[PAD] positions.
Var sequence_loss(Var logits, const std::vector<TokenId>& targets, TokenId pad_id, double smoothing = 0.0);

// One padded bucket's worth of examples in model ids.
struct Batch {
  std::vector<const InvertedExample*> examples;
  std::size_t bucket = 0;
};

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  std::size_t tokens = 0;  // non-pad target positions
};

// Forward, backward, global-norm clip and Adam update. The dropout stream is
// a function of (seed, step) only, so a resumed run replays exactly.
StepResult train_step(Transformer& model, const Batch& batch, TrainState& state, const TrainConfig& config);

// Adam step `step` (1-based) using the gradients currently in params.
void adam_update(const std::vector<Parameter*>& params, TrainState& state, const TrainConfig& config,
                 std::size_t step);

// Rescales gradients so their global norm is at most max_norm; returns the
// norm before scaling.
double clip_gradients(const std::vector<Parameter*>& params, double max_norm);

// Picks the batch for a step: a bucket drawn proportionally to its size, then
// up to batch_size distinct members. Depends on (seed, step) only.
Batch sample_batch(const std::vector<Bucket>& buckets, std::size_t batch_size, std::uint64_t seed,
                   std::size_t step);

// Checkpoint directory: config.json, params.bin, state.json, state.bin.
// Written to a sibling temporary directory and renamed into place.
void save_checkpoint(const std::filesystem::path& dir, const Transformer& model, const TokenMap& map,
                     const TrainState& state);
struct Checkpoint {
  Transformer model;
  TokenMap map;
  TrainState state;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // required
  std::filesystem::path metrics_path;    // JSON lines; empty to skip
  std::function<void(const StepMetrics&)> on_step;
};

// Runs from state.step to config.total_steps. Buckets hold model ids.
void train(Transformer& model, const TokenMap& map, const std::vector<Bucket>& buckets, TrainState& state,
           const TrainConfig& config, const TrainOptions& options);

// Every full-vocabulary id used by the examples plus the reserved tokens,
// ascending.
TokenMap build_token_map(const std::vector<InvertedExample>& examples, const Vocabulary& vocab);
std::vector<InvertedExample> to_model_ids(const std::vector<InvertedExample>& examples, const TokenMap& map);

// Teacher-forced argmax accuracy over non-pad target positions (no dropout).
double token_accuracy(Transformer& model, const std::vector<InvertedExample>& examples);

}  // namespace qg
