#include "mrvi/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "mrvi/errors.hpp"

namespace mrvi {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kValStream = 0x56414cULL;

PriorSpec resolved_prior(const TrainConfig& cfg, const ModelConfig& model) {
  return cfg.prior.alpha0.size() == 0 ? PriorSpec::uniform(model.tau_dim) : cfg.prior;
}

void check_compatible(const Dataset& d, const ModelConfig& m, const char* which) {
  if (d.samples.empty()) throw ConfigError(std::string(which) + " dataset is empty");
  if (d.meta.raters != m.experts || d.meta.height != m.height || d.meta.width != m.width)
    throw ConfigError(std::string(which) + " dataset (N=" + std::to_string(d.meta.raters) + ", " +
                      std::to_string(d.meta.height) + "x" + std::to_string(d.meta.width) +
                      ") does not match the model (N=" + std::to_string(m.experts) + ", " +
                      std::to_string(m.height) + "x" + std::to_string(m.width) + ")");
}

// Name of the first parameter block holding a non-finite gradient entry.
std::string nonfinite_block(const ModelParams& p, const Eigen::VectorXd& grad) {
  std::string found;
  Eigen::Index off = 0;
  auto& w = const_cast<Weights&>(p.weights);
  for_each_block(w, [&](const std::string& name, Tensor& t) {
    const Eigen::Index n = Eigen::Index(t.size());
    if (found.empty() && !grad.segment(off, n).allFinite()) found = name;
    off += n;
  });
  return found;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (prior.alpha0.size() != 0) prior.validate();
}

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state, std::uint64_t t,
               const TrainConfig& cfg) {
  if (t < 1) throw ArgumentError("adam_step: step must be >= 1");
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: parameter, gradient and moment lengths differ");
  if (!grads.allFinite()) throw NumericalAbort("adam_step: non-finite gradient");
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  state.m = b1 * state.m + (1.0 - b1) * grads;
  state.v = b2 * state.v + (1.0 - b2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(b1, double(t));
  const double c2 = 1.0 - std::pow(b2, double(t));
  params.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.adam_eps);
}

Checkpoint initial_checkpoint(const ModelConfig& model, const TrainConfig& cfg) {
  Checkpoint c;
  c.params = init_model(model, cfg.seed);
  const Eigen::Index n = Eigen::Index(c.params.parameter_count());
  c.adam.m = Eigen::VectorXd::Zero(n);
  c.adam.v = Eigen::VectorXd::Zero(n);
  c.seed = cfg.seed;
  return c;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

namespace {

LossBreakdown mean_val_loss(const Objective& obj, const ModelParams& params, const TrainConfig& cfg) {
  std::vector<LossBreakdown> per(obj.val_size);
  parallel_for(per.size(), cfg.threads, [&](std::size_t i) {
    RngStream s(hash64({cfg.seed, kValStream, i}));
    per[i] = obj.val_loss(params, i, s);
  });
  LossBreakdown mean;
  for (const auto& l : per) mean += l;
  return mean.scaled(1.0 / double(per.size()));
}

Objective elbo_objective(const Dataset& train_set, const Dataset& val_set, const PriorSpec& prior,
                         const LossWeights& weights) {
  Objective obj;
  obj.train_size = train_set.samples.size();
  obj.val_size = val_set.samples.size();
  obj.train_grad = [&train_set, prior, weights](const ModelParams& p, std::size_t idx, RngStream& s,
                                                 Eigen::VectorXd& grad) {
    return loss_and_grad(p, train_set.samples[idx], prior, s, weights, grad);
  };
  obj.val_loss = [&val_set, prior, weights](const ModelParams& p, std::size_t idx, RngStream& s) {
    return elbo_loss(p, val_set.samples[idx], prior, s, weights);
  };
  return obj;
}

}  // namespace

LossBreakdown evaluate_loss(const ModelParams& params, const Dataset& data, const TrainConfig& cfg) {
  if (data.samples.empty()) throw ConfigError("cannot evaluate on an empty dataset");
  const PriorSpec prior = resolved_prior(cfg, params.config);
  return mean_val_loss(elbo_objective(data, data, prior, cfg.weights), params, cfg);
}

TrainResult train(const Dataset& train_set, const Dataset& val_set, const ModelConfig& model, const TrainConfig& cfg,
                  const std::optional<ResumeState>& resume, const EpochCallback& on_epoch) {
  cfg.validate();
  model.validate();
  check_compatible(train_set, model, "training");
  check_compatible(val_set, model, "validation");
  const PriorSpec prior = resolved_prior(cfg, model);
  if (model.use_tau && prior.alpha0.size() != model.tau_dim) throw ConfigError("alpha0 length must equal tau_dim");
  return optimize(elbo_objective(train_set, val_set, prior, cfg.weights), model, cfg, resume, on_epoch);
}

TrainResult optimize(const Objective& obj, const ModelConfig& model, const TrainConfig& cfg,
                     const std::optional<ResumeState>& resume, const EpochCallback& on_epoch) {
  cfg.validate();
  model.validate();
  if (obj.train_size == 0 || obj.val_size == 0) throw ConfigError("training and validation sets must be non-empty");

  TrainResult result;
  if (resume) {
    if (!(resume->last.params.config == model) || !(resume->best.params.config == model))
      throw ConfigError("resume checkpoint was written for a different model configuration");
    if (resume->last.seed != cfg.seed) throw ConfigError("resume checkpoint seed differs from the training seed");
    result.last = resume->last;
    result.best = resume->best;
  } else {
    result.last = initial_checkpoint(model, cfg);
    result.best = result.last;
  }
  Checkpoint& cur = result.last;
  if (cur.stale_epochs >= cfg.early_stop_patience && cur.epoch > 0) {
    result.early_stopped = true;
    return result;
  }

  const std::size_t n = obj.train_size;
  Eigen::VectorXd theta = cur.params.flatten();
  std::vector<Eigen::VectorXd> grads(std::min(cfg.batch_size, n));
  std::vector<LossBreakdown> losses(n);

  for (std::uint64_t epoch = cur.epoch; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream(hash64({cfg.seed, epoch, kShuffleStream})).shuffle(order);

    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - begin);
      parallel_for(count, cfg.threads, [&](std::size_t k) {
        const std::size_t idx = order[begin + k];
        RngStream s(hash64({cfg.seed, epoch, idx}));
        losses[idx] = obj.train_grad(cur.params, idx, s, grads[k]);
      });
      // Fixed reduction order keeps the result independent of scheduling.
      Eigen::VectorXd g = grads[0];
      for (std::size_t k = 1; k < count; ++k) g += grads[k];
      g /= double(count);
      if (!g.allFinite())
        throw NumericalAbort("non-finite gradient in parameter block '" + nonfinite_block(cur.params, g) +
                             "' at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(cur.step + 1));
      ++cur.step;
      adam_step(theta, g, cur.adam, cur.step, cfg);
      cur.params.unflatten(theta);
    }

    EpochRecord rec;
    rec.epoch = std::size_t(epoch + 1);
    for (const auto& l : losses) rec.train += l;
    rec.train = rec.train.scaled(1.0 / double(n));
    rec.val = mean_val_loss(obj, cur.params, cfg);
    if (!rec.train.finite() || !rec.val.finite())
      throw NumericalAbort("non-finite loss at epoch " + std::to_string(epoch + 1));

    cur.epoch = epoch + 1;
    cur.val_loss = rec.val.total;
    if (rec.val.total < cur.best_val) {
      cur.best_val = rec.val.total;
      cur.best_epoch = cur.epoch;
      cur.stale_epochs = 0;
      result.best = cur;
    } else {
      ++cur.stale_epochs;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cur.stale_epochs >= cfg.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace mrvi
