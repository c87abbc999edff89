#pragma once

#include <optional>
#include <span>

#include "mrvi/datasynth.hpp"
#include "mrvi/model.hpp"
#include "mrvi/trainer.hpp"

namespace mrvi {

struct MetaSegment {
  Mask mask;
};

// Pixel on iff strictly more than half of the masks mark it.
MetaSegment majority_vote(std::span<const Mask> masks);

// Deterministic baselines reuse the model's encoder 0 and segmentation
// predictor: the encoder mean replaces z, tau is dropped, and only the
// segmentation cross-entropy is minimized.
ModelConfig baseline_model_config(ModelConfig model);

// Target for one sample: the mask of rater index r, or the majority vote when r is empty.
Mask baseline_target(const Sample& s, std::optional<std::size_t> rater);

// Segmentation loss (and gradient) of the deterministic predictor.
LossBreakdown baseline_loss(const ModelParams& params, const Sample& s, std::optional<std::size_t> rater,
                            Eigen::VectorXd* grad);

TrainResult per_expert_baseline(const Dataset& train_set, const Dataset& val_set, std::size_t rater,
                                const ModelConfig& model, const TrainConfig& cfg);
TrainResult majority_vote_baseline(const Dataset& train_set, const Dataset& val_set, const ModelConfig& model,
                                   const TrainConfig& cfg);

// Foreground probability [H,W] of the deterministic predictor.
Tensor baseline_predict(const ModelParams& params, const Tensor& image);

}  // namespace mrvi
