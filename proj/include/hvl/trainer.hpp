#pragma once

#include "hvl/embedding_store.hpp"
#include "hvl/hierarchy.hpp"
#include "hvl/objective.hpp"
#include "hvl/random.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hvl {

struct TrainConfig {
  int epochs = 100;
  Index batch_size = 32;
  double lr = 0.002;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Index n = 2;
  ModelConfig model;  // K, tau, lambda_ood, renormalize_aggregates, ablations

  void validate() const;
};

struct AdamState {
  Gradients<double> m;
  Gradients<double> v;
  std::int64_t step = 0;
};

struct Checkpoint {
  ModelParams<double> params;
  AdamState adam;
  TrainConfig config;
  int epoch = 0;          // completed epochs
  std::string rng_state;  // shuffle / selection stream, see Rng::state
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;  // learning rate of the epoch's first step
  LossBreakdown<double> loss;
};

struct TrainOptions {
  /// Stop (with a resumable checkpoint) once this many epochs are complete.
  std::optional<int> stop_after_epoch;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// W = 0, b0 = b2 = 0: training starts at the frozen zero-shot model. The seed
/// is accepted for interface symmetry; zero initialization consumes no randomness.
ModelParams<double> init_params(Index d, Index num_classes, std::uint64_t seed = 0);

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps)), no warmup, no restarts.
double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps);

/// One canonical Adam update (bias-corrected moments).
void adam_step(ModelParams<double>& params, AdamState& state, const Gradients<double>& grads, double lr,
               const TrainConfig& cfg);

/// Minibatch Adam over the labeled items of `bundle`. Unlabeled items are
/// ignored. Throws DataError for a class without labeled items and
/// NumericalError (listing the batch ids) when the loss goes non-finite.
TrainResult train(const Bundle& bundle, const TrainConfig& cfg, const TrainOptions& options = {},
                  const Checkpoint* resume = nullptr);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// JSON-lines, one {epoch, lr, l_id, l_ood, total} record per epoch.
void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path,
                     const std::string& config_hash = {});

}  // namespace hvl
