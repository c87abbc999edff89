#pragma once

#include <cstddef>

#include <Eigen/Dense>

#include "mrvi/datasynth.hpp"
#include "mrvi/diff.hpp"
#include "mrvi/model.hpp"
#include "mrvi/rng.hpp"

namespace mrvi {

struct LossBreakdown {
  double recon = 0.0;
  double class_ce = 0.0;
  double seg_ce = 0.0;
  double kl_z = 0.0;
  double kl_tau = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double c) const;
  bool finite() const;
};

// Priors: Dir(alpha0) on tau, N(0, I) on z.
struct PriorSpec {
  Tensor alpha0;

  static PriorSpec uniform(std::size_t tau_dim) { return {Tensor({tau_dim}, 1.0)}; }
  void validate() const;
};

// Multipliers on the five terms; all 1 reproduces the unweighted objective.
struct LossWeights {
  double recon = 1.0;
  double class_ce = 1.0;
  double seg_ce = 1.0;
  double kl_z = 1.0;
  double kl_tau = 1.0;
};

// ---- closed forms on values ---------------------------------------------------

// Sum over coordinates of 0.5 (mu^2 + sigma^2 - 2 log sigma - 1).
double kl_gaussian_std(const GaussianPosterior& post);
// KL(Dir(alpha) || Dir(beta)).
double kl_dirichlet(const Tensor& alpha, const Tensor& beta);
double recon_loss(const Tensor& reconstruction, const Tensor& image);
// -log probs[r]; probs on the simplex.
double class_loss(const Tensor& probs, std::size_t r);
// Mean per-pixel cross-entropy of class probabilities [K,H,W] against a mask.
double seg_loss(const Tensor& probs, const Mask& mask);

// ---- graph forms ---------------------------------------------------------------

Var kl_gaussian_std(Var mu, Var log_sigma);
Var kl_dirichlet(Var alpha, const Tensor& beta);
Var recon_loss(Var reconstruction, const Tensor& image);
// Cross-entropy from logits [N] via log-sum-exp.
Var class_loss_logits(Var logits, std::size_t r);
// Mean pixel cross-entropy from logits [1,K,H,W] or [K,H,W].
Var seg_loss_logits(Var logits, const Mask& mask);

struct ElboGraph {
  Var total;
  LossBreakdown values;
};

// Builds the per-sample objective on `g`. Mask j of the sample belongs to
// expert j. One Monte Carlo draw per latent, from stream.child({j}).
ElboGraph elbo_graph(Graph& g, const ModelConfig& cfg, const BoundWeights& w, const Sample& sample,
                     const PriorSpec& prior, const LossWeights& weights, RngStream& stream);

LossBreakdown elbo_loss(const ModelParams& params, const Sample& sample, const PriorSpec& prior, RngStream& stream,
                        const LossWeights& weights = {});

// Loss plus gradient of `total` w.r.t. params.flatten() order.
LossBreakdown loss_and_grad(const ModelParams& params, const Sample& sample, const PriorSpec& prior,
                            RngStream& stream, const LossWeights& weights, Eigen::VectorXd& grad);

}  // namespace mrvi
