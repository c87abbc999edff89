#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrvi/diff.hpp"
#include "mrvi/rng.hpp"
#include "mrvi/tensor.hpp"

namespace mrvi {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t experts = 4;          // N
  std::size_t latent_channels = 4;  // C_z
  std::size_t tau_dim = 4;          // K_tau
  std::size_t hidden = 8;           // feature channels of every conv stage
  bool use_tau = true;
  bool use_z = true;

  static constexpr std::size_t classes = 2;
  static constexpr double log_sigma_min = -6.0;
  static constexpr double log_sigma_max = 2.0;
  static constexpr double alpha_floor = 1e-4;

  // Two stride-2 convolutions: ceil(ceil(H/2)/2).
  std::size_t latent_height() const { return ((height + 1) / 2 + 1) / 2; }
  std::size_t latent_width() const { return ((width + 1) / 2 + 1) / 2; }
  Shape latent_shape() const { return {latent_channels, latent_height(), latent_width()}; }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ConvLayerT {
  T kernel;  // [F,C,3,3]
  T bias;    // [F]
};

template <typename T>
struct EncoderT {
  ConvLayerT<T> stem, down1, down2, head;
};

template <typename T>
struct DecoderT {
  ConvLayerT<T> in, up1, out;
};

template <typename T>
struct PredictorT {
  ConvLayerT<T> in, up1, up2, out;
};

template <typename T>
struct ClassifierT {
  T weight;  // [K_tau, N]
  T bias;    // [N]
};

// The five networks: N image encoders, one image decoder, the class
// embedding (one raw concentration vector per expert), the expert classifier
// and one shared segmentation predictor.
template <typename T>
struct WeightsT {
  std::vector<EncoderT<T>> encoders;
  DecoderT<T> decoder;
  T embedding;  // [N, K_tau] raw values; alpha = softplus(raw) + floor
  ClassifierT<T> classifier;
  PredictorT<T> predictor;
};

// Visits every parameter block in a fixed order with a stable name. Blocks
// that an ablation disables are still visited so the layout never changes.
template <typename W, typename Fn>
void for_each_block(W& w, Fn&& fn) {
  auto conv = [&](const std::string& prefix, auto& layer) {
    fn(prefix + ".kernel", layer.kernel);
    fn(prefix + ".bias", layer.bias);
  };
  for (std::size_t i = 0; i < w.encoders.size(); ++i) {
    const std::string p = "encoder" + std::to_string(i);
    conv(p + ".stem", w.encoders[i].stem);
    conv(p + ".down1", w.encoders[i].down1);
    conv(p + ".down2", w.encoders[i].down2);
    conv(p + ".head", w.encoders[i].head);
  }
  conv("decoder.in", w.decoder.in);
  conv("decoder.up1", w.decoder.up1);
  conv("decoder.out", w.decoder.out);
  fn(std::string("embedding"), w.embedding);
  fn(std::string("classifier.weight"), w.classifier.weight);
  fn(std::string("classifier.bias"), w.classifier.bias);
  conv("predictor.in", w.predictor.in);
  conv("predictor.up1", w.predictor.up1);
  conv("predictor.up2", w.predictor.up2);
  conv("predictor.out", w.predictor.out);
}

using Weights = WeightsT<Tensor>;
using BoundWeights = WeightsT<Var>;

struct ModelParams {
  ModelConfig config;
  Weights weights;

  std::size_t parameter_count() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);
};

// Zero-filled parameters with the right shapes.
ModelParams zero_model(const ModelConfig& config);
// Weights ~ U(-a, a), a = sqrt(1 / fan_in); biases and embedding raw values 0.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
// Parameter count as a pure function of the configuration.
std::size_t parameter_count(const ModelConfig& config);

// Registers every block as a graph leaf (gradient-tracked when recording).
BoundWeights bind(Graph& g, const Weights& w);

// ---- value types -----------------------------------------------------------

struct GaussianPosterior {
  Tensor mu;         // [C_z, h, w]
  Tensor log_sigma;  // [C_z, h, w]
};

struct DirichletPosterior {
  Tensor alpha;  // [K_tau], strictly positive
};

struct SimplexVector {
  Tensor tau;  // [K_tau], non-negative, sums to 1
};

// ---- graph-level building blocks -------------------------------------------

struct GaussianVar {
  Var mu;         // [1,C_z,h,w]
  Var log_sigma;  // [1,C_z,h,w]
};

GaussianVar encode(const ModelConfig& cfg, const BoundWeights& w, Var image, std::size_t expert);
// mu + exp(log_sigma) * eps with eps ~ N(0, I) drawn from `stream`.
Var sample_gaussian(const GaussianVar& post, RngStream& stream);
Var embed_expert(const ModelConfig& cfg, const BoundWeights& w, std::size_t expert);
// Logistic-normal Laplace approximation to Dir(alpha), pathwise in alpha.
Var sample_dirichlet_laplace(Var alpha, RngStream& stream);
// Classifier logits [N] for tau [K_tau].
Var classify_logits(const BoundWeights& w, Var tau);
// Decoded image [1,1,H,W] in (0,1).
Var decode(const BoundWeights& w, Var z);
// Per-pixel class logits [1,K,H,W] from (tau, z) only. tau is ignored (and may
// be default-constructed) when the model runs without the tau latent.
Var predict_logits(const ModelConfig& cfg, const BoundWeights& w, Var tau, Var z);

// Laplace-approximation moments: mu_k = log a_k - mean(log a),
// var_k = (1/a_k)(1 - 2/K) + (1/K^2) sum_j 1/a_j.
void laplace_moments(const Eigen::VectorXd& alpha, Eigen::VectorXd& mu, Eigen::VectorXd& var);

// ---- value-level API ---------------------------------------------------------

GaussianPosterior encode(const ModelParams& p, const Tensor& image, std::size_t expert);
Tensor sample_gaussian(const GaussianPosterior& post, RngStream& stream);
DirichletPosterior embed_expert(const ModelParams& p, std::size_t expert);
SimplexVector sample_dirichlet(const DirichletPosterior& post, RngStream& stream);
// Probabilities over the N experts.
Tensor classify(const ModelParams& p, const SimplexVector& tau);
// Image [1,H,W].
Tensor decode(const ModelParams& p, const Tensor& z);
// Class probabilities [K,H,W].
Tensor predict_seg(const ModelParams& p, const SimplexVector& tau, const Tensor& z);

}  // namespace mrvi
