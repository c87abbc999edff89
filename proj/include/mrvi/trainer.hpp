#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "mrvi/datasynth.hpp"
#include "mrvi/losses.hpp"
#include "mrvi/model.hpp"

namespace mrvi {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 12;
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 10;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  PriorSpec prior;          // empty alpha0 means all ones
  std::size_t threads = 1;  // workers for per-sample evaluation

  void validate() const;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
};

// One bias-corrected Adam update at step t >= 1. Throws NumericalAbort on a
// non-finite gradient before touching anything.
void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state, std::uint64_t t,
               const TrainConfig& cfg);

struct Checkpoint {
  ModelParams params;
  AdamState adam;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;   // completed optimizer steps
  double val_loss = std::numeric_limits<double>::infinity();
  // Early-stopping bookkeeping so a resumed run continues exactly.
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t best_epoch = 0;
  std::uint64_t stale_epochs = 0;
};

Checkpoint initial_checkpoint(const ModelConfig& model, const TrainConfig& cfg);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// With `expected` set, a header whose model hyperparameters differ raises ConfigError.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown train;    // mean over training samples
  LossBreakdown val;      // mean over validation samples
};

struct TrainResult {
  Checkpoint best;  // lowest validation total seen
  Checkpoint last;  // state after the final completed epoch
  std::vector<EpochRecord> history;
  bool early_stopped = false;
};

struct ResumeState {
  Checkpoint last;
  Checkpoint best;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mean validation loss with the fixed evaluation streams used by train().
LossBreakdown evaluate_loss(const ModelParams& params, const Dataset& data, const TrainConfig& cfg);

// Per-sample objective hooks for the generic optimizer loop. `grad` receives
// the gradient in ModelParams::flatten() order.
struct Objective {
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::function<LossBreakdown(const ModelParams&, std::size_t idx, RngStream&, Eigen::VectorXd& grad)> train_grad;
  std::function<LossBreakdown(const ModelParams&, std::size_t idx, RngStream&)> val_loss;
};

// Adam over shuffled mini-batches with early stopping on the validation total.
TrainResult optimize(const Objective& objective, const ModelConfig& model, const TrainConfig& cfg,
                     const std::optional<ResumeState>& resume = std::nullopt, const EpochCallback& on_epoch = {});

TrainResult train(const Dataset& train_set, const Dataset& val_set, const ModelConfig& model, const TrainConfig& cfg,
                  const std::optional<ResumeState>& resume = std::nullopt, const EpochCallback& on_epoch = {});

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// handled exactly once; callers write into per-index slots.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace mrvi
