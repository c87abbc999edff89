#include "mrvi/model.hpp"

#include <cmath>

#include "mrvi/errors.hpp"

namespace mrvi {

void ModelConfig::validate() const {
  if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0)
    throw ConfigError("model grid must be a positive multiple of 4");
  if (experts < 2) throw ConfigError("model needs at least two experts");
  if (latent_channels == 0) throw ConfigError("latent_channels must be positive");
  if (tau_dim < 2) throw ConfigError("tau_dim must be at least 2");
  if (hidden == 0) throw ConfigError("hidden channels must be positive");
}

namespace {

ConvLayerT<Tensor> conv_layer(std::size_t out, std::size_t in) {
  return {Tensor({out, in, 3, 3}), Tensor({out})};
}

std::size_t predictor_inputs(const ModelConfig& c) { return c.latent_channels + (c.use_tau ? c.tau_dim : 0); }

bool is_weight_block(const std::string& name) {
  return name.ends_with(".kernel") || name == "classifier.weight";
}

}  // namespace

ModelParams zero_model(const ModelConfig& c) {
  c.validate();
  ModelParams p;
  p.config = c;
  Weights& w = p.weights;
  const std::size_t h = c.hidden;
  for (std::size_t i = 0; i < c.experts; ++i)
    w.encoders.push_back({conv_layer(h, 1), conv_layer(h, h), conv_layer(h, h), conv_layer(2 * c.latent_channels, h)});
  w.decoder = {conv_layer(h, c.latent_channels), conv_layer(h, h), conv_layer(1, h)};
  w.embedding = Tensor({c.experts, c.tau_dim});
  w.classifier = {Tensor({c.tau_dim, c.experts}), Tensor({c.experts})};
  w.predictor = {conv_layer(h, predictor_inputs(c)), conv_layer(h, h), conv_layer(h, h),
                 conv_layer(ModelConfig::classes, h)};
  return p;
}

ModelParams init_model(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = zero_model(c);
  std::uint64_t block = 0;
  for_each_block(p.weights, [&](const std::string& name, Tensor& t) {
    RngStream stream(hash64({seed, block++}));
    if (!is_weight_block(name)) return;
    const std::size_t fan_in = t.rank() == 4 ? t.dim(1) * 9 : t.dim(0);
    const double a = std::sqrt(1.0 / double(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = stream.uniform(-a, a);
  });
  return p;
}

std::size_t parameter_count(const ModelConfig& c) { return zero_model(c).parameter_count(); }

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  auto& w = const_cast<Weights&>(weights);
  for_each_block(w, [&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

Eigen::VectorXd ModelParams::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index off = 0;
  auto& w = const_cast<Weights&>(weights);
  for_each_block(w, [&](const std::string&, Tensor& t) {
    flat.segment(off, Eigen::Index(t.size())) = t.data();
    off += Eigen::Index(t.size());
  });
  return flat;
}

void ModelParams::unflatten(const Eigen::VectorXd& flat) {
  if (std::size_t(flat.size()) != parameter_count())
    throw DimensionError("parameter vector has " + std::to_string(flat.size()) + " entries, model expects " +
                         std::to_string(parameter_count()));
  Eigen::Index off = 0;
  for_each_block(weights, [&](const std::string&, Tensor& t) {
    t.data() = flat.segment(off, Eigen::Index(t.size()));
    off += Eigen::Index(t.size());
  });
}

BoundWeights bind(Graph& g, const Weights& w) {
  BoundWeights b;
  b.encoders.resize(w.encoders.size());
  // Walk both structures in lockstep through the shared visitor.
  std::vector<const Tensor*> sources;
  for_each_block(const_cast<Weights&>(w), [&](const std::string&, Tensor& t) { sources.push_back(&t); });
  std::size_t next = 0;
  for_each_block(b, [&](const std::string&, Var& v) { v = g.parameter(*sources[next++]); });
  return b;
}

// ---- graph-level -------------------------------------------------------------

namespace {

Var apply(const ConvLayerT<Var>& layer, Var x, int stride = 1) { return conv2d(x, layer.kernel, layer.bias, stride); }

void require_expert(const ModelConfig& cfg, std::size_t expert) {
  if (expert >= cfg.experts)
    throw IndexError("expert index " + std::to_string(expert) + " out of range [0," + std::to_string(cfg.experts) + ")");
}

Tensor standard_normal(const Shape& shape, RngStream& stream) {
  Tensor eps(shape);
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = stream.normal();
  return eps;
}

}  // namespace

GaussianVar encode(const ModelConfig& cfg, const BoundWeights& w, Var image, std::size_t expert) {
  require_expert(cfg, expert);
  const EncoderT<Var>& enc = w.encoders[expert];
  Var x = reshape(image, {1, 1, cfg.height, cfg.width});
  Var h = relu(apply(enc.stem, x));
  h = relu(apply(enc.down1, h, 2));
  h = relu(apply(enc.down2, h, 2));
  Var head = apply(enc.head, h);
  return {slice_channels(head, 0, cfg.latent_channels),
          clamp(slice_channels(head, cfg.latent_channels, cfg.latent_channels), ModelConfig::log_sigma_min,
                ModelConfig::log_sigma_max)};
}

Var sample_gaussian(const GaussianVar& post, RngStream& stream) {
  Graph& g = *post.mu.graph;
  Var eps = g.constant(standard_normal(post.mu.shape(), stream));
  return add(post.mu, mul(exp(post.log_sigma), eps));
}

Var embed_expert(const ModelConfig& cfg, const BoundWeights& w, std::size_t expert) {
  require_expert(cfg, expert);
  return add_scalar(softplus(take_row(w.embedding, expert)), ModelConfig::alpha_floor);
}

Var sample_dirichlet_laplace(Var alpha, RngStream& stream) {
  const std::size_t k = alpha.value().size();
  if (k < 2) throw DimensionError("Dirichlet sampling needs at least two components");
  for (std::size_t i = 0; i < k; ++i)
    if (!(alpha.value()[i] > 0.0)) throw DomainError("Dirichlet concentration must be positive");
  Graph& g = *alpha.graph;
  const double kd = double(k);
  Var log_alpha = log(alpha);
  Var mu = sub(log_alpha, expand(mean(log_alpha), {k}));
  Var inv = reciprocal(alpha);
  Var var = add(scale(inv, 1.0 - 2.0 / kd), expand(scale(sum(inv), 1.0 / (kd * kd)), {k}));
  Var eps = g.constant(standard_normal({k}, stream));
  return softmax(add(mu, mul(sqrt(var), eps)), 0);
}

Var classify_logits(const BoundWeights& w, Var tau) {
  const std::size_t k = tau.value().size();
  Var logits = linear(reshape(tau, {1, k}), w.classifier.weight, w.classifier.bias);
  return reshape(logits, {logits.value().size()});
}

Var decode(const BoundWeights& w, Var z) {
  Var h = relu(apply(w.decoder.in, z));
  h = relu(apply(w.decoder.up1, upsample2(h)));
  return sigmoid(apply(w.decoder.out, upsample2(h)));
}

Var predict_logits(const ModelConfig& cfg, const BoundWeights& w, Var tau, Var z) {
  const Shape& zs = z.shape();
  if (zs.size() != 4 || zs[1] != cfg.latent_channels || zs[2] != cfg.latent_height() || zs[3] != cfg.latent_width())
    throw DimensionError("predict_seg: latent shape " + shape_string(zs) + " does not match " +
                         shape_string(cfg.latent_shape()));
  Var input = z;
  if (cfg.use_tau) {
    if (tau.value().size() != cfg.tau_dim)
      throw DimensionError("predict_seg: tau has " + std::to_string(tau.value().size()) + " components, expected " +
                           std::to_string(cfg.tau_dim));
    input = concat_channels(z, broadcast_channels(reshape(tau, {cfg.tau_dim}), zs[2], zs[3]));
  }
  Var h = relu(apply(w.predictor.in, input));
  h = relu(apply(w.predictor.up1, upsample2(h)));
  h = relu(apply(w.predictor.up2, upsample2(h)));
  return apply(w.predictor.out, h);
}

void laplace_moments(const Eigen::VectorXd& alpha, Eigen::VectorXd& mu, Eigen::VectorXd& var) {
  const double k = double(alpha.size());
  const Eigen::ArrayXd la = alpha.array().log();
  mu = (la - la.mean()).matrix();
  const Eigen::ArrayXd inv = alpha.array().inverse();
  var = (inv * (1.0 - 2.0 / k) + inv.sum() / (k * k)).matrix();
}

// ---- value-level ---------------------------------------------------------------

namespace {

Tensor squeeze_batch(const Tensor& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.reshaped(std::move(s));
}

Tensor with_batch(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(std::move(s));
}

}  // namespace

GaussianPosterior encode(const ModelParams& p, const Tensor& image, std::size_t expert) {
  if (image.size() != p.config.height * p.config.width)
    throw DimensionError("encode: image shape " + shape_string(image.shape()) + " does not match the model grid");
  Graph g(false);
  BoundWeights w = bind(g, p.weights);
  GaussianVar post = encode(p.config, w, g.constant(image), expert);
  return {squeeze_batch(post.mu.value()), squeeze_batch(post.log_sigma.value())};
}

Tensor sample_gaussian(const GaussianPosterior& post, RngStream& stream) {
  if (post.mu.shape() != post.log_sigma.shape()) throw DimensionError("posterior mu/log_sigma shapes differ");
  Tensor z(post.mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = post.mu[i] + std::exp(post.log_sigma[i]) * stream.normal();
  return z;
}

DirichletPosterior embed_expert(const ModelParams& p, std::size_t expert) {
  Graph g(false);
  BoundWeights w = bind(g, p.weights);
  return {embed_expert(p.config, w, expert).value()};
}

SimplexVector sample_dirichlet(const DirichletPosterior& post, RngStream& stream) {
  Graph g(false);
  return {sample_dirichlet_laplace(g.constant(post.alpha), stream).value()};
}

Tensor classify(const ModelParams& p, const SimplexVector& tau) {
  Graph g(false);
  BoundWeights w = bind(g, p.weights);
  return softmax(classify_logits(w, g.constant(tau.tau)), 0).value();
}

Tensor decode(const ModelParams& p, const Tensor& z) {
  if (z.shape() != p.config.latent_shape())
    throw DimensionError("decode: latent shape " + shape_string(z.shape()) + " does not match " +
                         shape_string(p.config.latent_shape()));
  Graph g(false);
  BoundWeights w = bind(g, p.weights);
  return squeeze_batch(decode(w, g.constant(with_batch(z))).value());
}

Tensor predict_seg(const ModelParams& p, const SimplexVector& tau, const Tensor& z) {
  if (z.shape() != p.config.latent_shape())
    throw DimensionError("predict_seg: latent shape " + shape_string(z.shape()) + " does not match " +
                         shape_string(p.config.latent_shape()));
  Graph g(false);
  BoundWeights w = bind(g, p.weights);
  Var tau_var = p.config.use_tau ? g.constant(tau.tau) : Var{};
  Var logits = predict_logits(p.config, w, tau_var, g.constant(with_batch(z)));
  return squeeze_batch(softmax(logits, 1).value());
}

}  // namespace mrvi
