#include "mrvi/baselines.hpp"

#include "mrvi/errors.hpp"

namespace mrvi {

MetaSegment majority_vote(std::span<const Mask> masks) {
  if (masks.empty()) throw ArgumentError("majority_vote: no masks");
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> votes =
      Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(masks[0].rows(), masks[0].cols());
  for (const Mask& m : masks) {
    if (m.rows() != masks[0].rows() || m.cols() != masks[0].cols())
      throw DimensionError("majority_vote: mask shapes differ");
    votes += (m != 0).cast<int>();
  }
  // votes > N/2  <=>  2 * votes > N
  return {(2 * votes > int(masks.size())).cast<std::uint8_t>()};
}

ModelConfig baseline_model_config(ModelConfig model) {
  model.use_tau = false;
  model.use_z = false;
  return model;
}

Mask baseline_target(const Sample& s, std::optional<std::size_t> rater) {
  if (!rater) return majority_vote(s.masks).mask;
  if (*rater >= s.masks.size())
    throw IndexError("rater index " + std::to_string(*rater) + " out of range [0," + std::to_string(s.masks.size()) +
                     ")");
  return s.masks[*rater];
}

namespace {

Var baseline_logits(const ModelConfig& cfg, const BoundWeights& w, const Tensor& image) {
  Graph& g = *w.embedding.graph;
  GaussianVar post = encode(cfg, w, g.constant(image), 0);
  return predict_logits(cfg, w, Var{}, post.mu);
}

}  // namespace

LossBreakdown baseline_loss(const ModelParams& params, const Sample& s, std::optional<std::size_t> rater,
                            Eigen::VectorXd* grad) {
  const Mask target = baseline_target(s, rater);
  Graph g(grad != nullptr);
  BoundWeights w = bind(g, params.weights);
  Var loss = pixel_cross_entropy(baseline_logits(params.config, w, s.image),
                                 std::span<const std::uint8_t>(target.data(), std::size_t(target.size())));
  LossBreakdown out;
  out.seg_ce = out.total = loss.value().item();
  if (grad) {
    g.backward(loss);
    grad->resize(Eigen::Index(params.parameter_count()));
    Eigen::Index off = 0;
    for_each_block(w, [&](const std::string&, Var& v) {
      const Tensor& a = g.adjoint(v);
      grad->segment(off, Eigen::Index(a.size())) = a.data();
      off += Eigen::Index(a.size());
    });
  }
  return out;
}

namespace {

TrainResult train_baseline(const Dataset& train_set, const Dataset& val_set, std::optional<std::size_t> rater,
                           const ModelConfig& model, const TrainConfig& cfg) {
  const ModelConfig bm = baseline_model_config(model);
  bm.validate();
  for (const Dataset* d : {&train_set, &val_set}) {
    if (d->samples.empty()) throw ConfigError("baseline training needs non-empty datasets");
    if (d->meta.height != bm.height || d->meta.width != bm.width)
      throw ConfigError("dataset grid does not match the baseline model grid");
    if (rater && *rater >= d->meta.raters)
      throw IndexError("rater index " + std::to_string(*rater) + " out of range [0," +
                       std::to_string(d->meta.raters) + ")");
  }
  Objective obj;
  obj.train_size = train_set.samples.size();
  obj.val_size = val_set.samples.size();
  obj.train_grad = [&](const ModelParams& p, std::size_t idx, RngStream&, Eigen::VectorXd& grad) {
    return baseline_loss(p, train_set.samples[idx], rater, &grad);
  };
  obj.val_loss = [&](const ModelParams& p, std::size_t idx, RngStream&) {
    return baseline_loss(p, val_set.samples[idx], rater, nullptr);
  };
  return optimize(obj, bm, cfg);
}

}  // namespace

TrainResult per_expert_baseline(const Dataset& train_set, const Dataset& val_set, std::size_t rater,
                                const ModelConfig& model, const TrainConfig& cfg) {
  return train_baseline(train_set, val_set, rater, model, cfg);
}

TrainResult majority_vote_baseline(const Dataset& train_set, const Dataset& val_set, const ModelConfig& model,
                                   const TrainConfig& cfg) {
  return train_baseline(train_set, val_set, std::nullopt, model, cfg);
}

Tensor baseline_predict(const ModelParams& params, const Tensor& image) {
  Graph g(false);
  BoundWeights w = bind(g, params.weights);
  const Tensor probs = softmax(baseline_logits(params.config, w, image), 1).value();
  const std::size_t H = params.config.height, W = params.config.width;
  Tensor fg({H, W});
  std::copy_n(probs.ptr() + H * W, H * W, fg.ptr());
  return fg;
}

}  // namespace mrvi
