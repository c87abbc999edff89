#include "mrvi/losses.hpp"

#include <cmath>
#include <limits>

#include "mrvi/errors.hpp"
#include "mrvi/special.hpp"

namespace mrvi {

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  recon += o.recon;
  class_ce += o.class_ce;
  seg_ce += o.seg_ce;
  kl_z += o.kl_z;
  kl_tau += o.kl_tau;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double c) const {
  return {recon * c, class_ce * c, seg_ce * c, kl_z * c, kl_tau * c, total * c};
}

bool LossBreakdown::finite() const {
  return std::isfinite(recon) && std::isfinite(class_ce) && std::isfinite(seg_ce) && std::isfinite(kl_z) &&
         std::isfinite(kl_tau) && std::isfinite(total);
}

void PriorSpec::validate() const {
  if (alpha0.size() < 2) throw ConfigError("alpha0 needs at least two components");
  for (std::size_t i = 0; i < alpha0.size(); ++i)
    if (!(alpha0[i] > 0.0)) throw ConfigError("alpha0 must be strictly positive");
}

namespace {

void require_positive(const Tensor& t, const char* what) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!(t[i] > 0.0)) throw DomainError(std::string(what) + " must be strictly positive");
}

void require_mask_shape(const Shape& s, const Mask& mask, const char* where) {
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
  if (std::size_t(mask.rows()) != H || std::size_t(mask.cols()) != W)
    throw DimensionError(std::string(where) + ": mask " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()) + " does not match prediction " + shape_string(s));
}

std::span<const std::uint8_t> mask_span(const Mask& m) { return {m.data(), std::size_t(m.size())}; }

}  // namespace

// ---- values ---------------------------------------------------------------------

double kl_gaussian_std(const GaussianPosterior& post) {
  if (post.mu.shape() != post.log_sigma.shape()) throw DimensionError("kl_gaussian_std: mu/log_sigma shapes differ");
  const auto mu = post.mu.data().array();
  const auto ls = post.log_sigma.data().array();
  return 0.5 * (mu.square() + (2.0 * ls).exp() - 2.0 * ls - 1.0).sum();
}

double kl_dirichlet(const Tensor& alpha, const Tensor& beta) {
  if (alpha.shape() != beta.shape() || alpha.rank() != 1)
    throw DimensionError("kl_dirichlet: alpha " + shape_string(alpha.shape()) + " vs beta " +
                         shape_string(beta.shape()));
  require_positive(alpha, "Dirichlet concentration alpha");
  require_positive(beta, "Dirichlet concentration beta");
  double sa = 0.0, sb = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) sa += alpha[k], sb += beta[k];
  const double psi_sum = special::digamma(sa);
  double kl = special::lgamma(sa) - special::lgamma(sb);
  for (std::size_t k = 0; k < alpha.size(); ++k)
    kl += special::lgamma(beta[k]) - special::lgamma(alpha[k]) +
          (alpha[k] - beta[k]) * (special::digamma(alpha[k]) - psi_sum);
  return kl;
}

double recon_loss(const Tensor& reconstruction, const Tensor& image) {
  if (reconstruction.size() != image.size())
    throw DimensionError("recon_loss: " + shape_string(reconstruction.shape()) + " vs " +
                         shape_string(image.shape()));
  return (reconstruction.data() - image.data()).array().square().mean();
}

double class_loss(const Tensor& probs, std::size_t r) {
  if (r >= probs.size())
    throw IndexError("class_loss: expert " + std::to_string(r) + " out of range for " +
                     std::to_string(probs.size()) + " classes");
  return -std::log(std::max(probs[r], std::numeric_limits<double>::min()));
}

double seg_loss(const Tensor& probs, const Mask& mask) {
  if (probs.rank() != 3) throw DimensionError("seg_loss: expected [K,H,W], got " + shape_string(probs.shape()));
  require_mask_shape(probs.shape(), mask, "seg_loss");
  const std::size_t K = probs.dim(0), P = probs.dim(1) * probs.dim(2);
  double acc = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t y = mask.data()[p];
    if (y >= K) throw DomainError("seg_loss: label out of range");
    acc -= std::log(std::max(probs[y * P + p], std::numeric_limits<double>::min()));
  }
  return acc / double(P);
}

// ---- graphs ---------------------------------------------------------------------

Var kl_gaussian_std(Var mu, Var log_sigma) {
  if (mu.shape() != log_sigma.shape()) throw DimensionError("kl_gaussian_std: mu/log_sigma shapes differ");
  const double n = double(mu.value().size());
  Var two_ls = scale(log_sigma, 2.0);
  Var terms = sub(add(square(mu), exp(two_ls)), two_ls);
  return add_scalar(scale(sum(terms), 0.5), -0.5 * n);
}

Var kl_dirichlet(Var alpha, const Tensor& beta) {
  if (alpha.shape() != beta.shape() || beta.rank() != 1)
    throw DimensionError("kl_dirichlet: alpha " + shape_string(alpha.shape()) + " vs beta " +
                         shape_string(beta.shape()));
  require_positive(alpha.value(), "Dirichlet concentration alpha");
  require_positive(beta, "Dirichlet concentration beta");
  Graph& g = *alpha.graph;
  const std::size_t k = beta.size();
  double sb = 0.0, lgb = 0.0;
  for (std::size_t i = 0; i < k; ++i) sb += beta[i], lgb += special::lgamma(beta[i]);
  Var sa = sum(alpha);
  Var cross = sum(mul(sub(alpha, g.constant(beta)), sub(digamma(alpha), expand(digamma(sa), {k}))));
  Var kl = add(sub(lgamma(sa), sum(lgamma(alpha))), cross);
  return add_scalar(kl, lgb - special::lgamma(sb));
}

Var recon_loss(Var reconstruction, const Tensor& image) {
  if (reconstruction.value().size() != image.size())
    throw DimensionError("recon_loss: " + shape_string(reconstruction.shape()) + " vs " +
                         shape_string(image.shape()));
  return mse(reconstruction, image.reshaped(reconstruction.shape()));
}

Var class_loss_logits(Var logits, std::size_t r) {
  if (r >= logits.value().size())
    throw IndexError("class_loss: expert " + std::to_string(r) + " out of range for " +
                     std::to_string(logits.value().size()) + " classes");
  return cross_entropy_logits(logits, r);
}

Var seg_loss_logits(Var logits, const Mask& mask) {
  require_mask_shape(logits.shape(), mask, "seg_loss");
  return pixel_cross_entropy(logits, mask_span(mask));
}

ElboGraph elbo_graph(Graph& g, const ModelConfig& cfg, const BoundWeights& w, const Sample& sample,
                     const PriorSpec& prior, const LossWeights& lw, RngStream& stream) {
  if (sample.masks.size() != cfg.experts)
    throw ConfigError("sample has " + std::to_string(sample.masks.size()) + " masks, model has " +
                      std::to_string(cfg.experts) + " experts");
  if (cfg.use_tau && prior.alpha0.size() != cfg.tau_dim)
    throw ConfigError("alpha0 has " + std::to_string(prior.alpha0.size()) + " components, tau_dim is " +
                      std::to_string(cfg.tau_dim));

  Var image = g.constant(sample.image);
  std::vector<Var> terms;
  ElboGraph out;
  LossBreakdown& v = out.values;
  auto add_term = [&](Var term, double weight, double& slot) {
    Var weighted = scale(term, weight);
    slot += weighted.value().item();
    terms.push_back(weighted);
  };

  for (std::size_t j = 0; j < cfg.experts; ++j) {
    RngStream s = stream.child({j});
    GaussianVar post = encode(cfg, w, image, j);
    Var z = cfg.use_z ? sample_gaussian(post, s) : post.mu;
    Var tau;
    if (cfg.use_tau) {
      Var alpha = embed_expert(cfg, w, j);
      tau = sample_dirichlet_laplace(alpha, s);
      add_term(class_loss_logits(classify_logits(w, tau), j), lw.class_ce, v.class_ce);
      add_term(kl_dirichlet(alpha, prior.alpha0), lw.kl_tau, v.kl_tau);
    }
    add_term(recon_loss(decode(w, z), sample.image), lw.recon, v.recon);
    add_term(seg_loss_logits(predict_logits(cfg, w, tau, z), sample.masks[j]), lw.seg_ce, v.seg_ce);
    if (cfg.use_z) add_term(kl_gaussian_std(post.mu, post.log_sigma), lw.kl_z, v.kl_z);
  }

  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
  v.total = v.recon + v.class_ce + v.seg_ce + v.kl_z + v.kl_tau;
  return out;
}

LossBreakdown elbo_loss(const ModelParams& params, const Sample& sample, const PriorSpec& prior, RngStream& stream,
                        const LossWeights& weights) {
  Graph g(false);
  BoundWeights w = bind(g, params.weights);
  return elbo_graph(g, params.config, w, sample, prior, weights, stream).values;
}

LossBreakdown loss_and_grad(const ModelParams& params, const Sample& sample, const PriorSpec& prior,
                            RngStream& stream, const LossWeights& weights, Eigen::VectorXd& grad) {
  Graph g(true);
  BoundWeights w = bind(g, params.weights);
  ElboGraph e = elbo_graph(g, params.config, w, sample, prior, weights, stream);
  g.backward(e.total);
  grad.resize(Eigen::Index(params.parameter_count()));
  Eigen::Index off = 0;
  for_each_block(w, [&](const std::string&, Var& v) {
    const Tensor& a = g.adjoint(v);
    grad.segment(off, Eigen::Index(a.size())) = a.data();
    off += Eigen::Index(a.size());
  });
  return e.values;
}

}  // namespace mrvi
