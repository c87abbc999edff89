#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mrvi/model.hpp"
#include "mrvi/rng.hpp"

namespace mrvi {

struct GenerationConfig {
  std::size_t n_samples = 50;
  Tensor prior_concentration;  // alpha_*; empty means all ones
  double binarize_threshold = 0.5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  // alpha_* resolved against a model's tau dimension.
  Tensor concentration(std::size_t tau_dim) const;
};

enum class GenerationMode { personalized, prior };
std::string to_string(GenerationMode mode);
GenerationMode generation_mode_from_string(const std::string& s);

struct Provenance {
  GenerationMode mode = GenerationMode::personalized;
  std::size_t expert = 0;  // requested expert, or the routed class in prior mode
  Tensor tau;              // empty when the model has no tau latent
  std::uint64_t stream_id = 0;
};

struct PredictionSet {
  std::vector<Tensor> probs;  // foreground probability [H,W]
  std::vector<Mask> masks;
  std::vector<Provenance> provenance;

  std::size_t size() const { return probs.size(); }
};

// [prob > threshold], strict.
Mask binarize(const Tensor& prob, double threshold);

// Index of the largest entry; ties go to the lowest index.
std::size_t route_expert(const Tensor& class_probs);

// Sample j draws from stream.child({j}).
PredictionSet personalized_predict(const ModelParams& params, const Tensor& image, std::size_t expert,
                                   const GenerationConfig& cfg, const RngStream& stream);
PredictionSet diverse_predict(const ModelParams& params, const Tensor& image, const GenerationConfig& cfg,
                              const RngStream& stream);

// Per-image dump: pred_<j>.u8, pred_<j>.f32 and provenance.json in `dir`.
void write_predictions(const std::filesystem::path& dir, const PredictionSet& set);

}  // namespace mrvi
