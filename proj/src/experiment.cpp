#include "mrvi/experiment.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "mrvi/baselines.hpp"
#include "mrvi/errors.hpp"

namespace mrvi {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration --------------------------------------------------------------

DataConfig::DataConfig() {
  const int dilation[] = {-2, -1, 1, 2};
  for (int r = 0; r < 4; ++r) raters.push_back(RaterProfile::from_dilation(r, dilation[r], 0.3));
}

std::size_t DataConfig::train_count() const { return std::size_t(std::llround(double(count) * train_fraction)); }
std::size_t DataConfig::val_count() const { return std::size_t(std::llround(double(count) * val_fraction)); }

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown key '" + section + "." + it.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0)) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    out = v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("'" + section + "." + key + "' has the wrong type");
  }
}

Tensor read_vector(const json& j, const char* key, const std::string& section) {
  if (!j.contains(key)) return Tensor();
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError("'" + section + "." + key + "' must be an array of numbers");
  Tensor t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError("'" + section + "." + key + "' must be an array of numbers");
    t[i] = v[i].get<double>();
  }
  return t;
}

json vector_json(const Tensor& t) {
  json a = json::array();
  for (std::size_t i = 0; i < t.size(); ++i) a.push_back(t[i]);
  return a;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, {"data", "model", "train", "generate", "eval", "paths"}, "config");
  ExperimentConfig c;
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"scene", "raters", "count", "train_fraction", "val_fraction", "seed"}, "data");
    if (d.contains("scene")) {
      const json& s = d.at("scene");
      check_keys(s, {"height", "width", "blob_min", "blob_max", "radius_min", "radius_max", "blur_sigma", "noise_std"},
                 "data.scene");
      read(s, "height", c.data.scene.height, "data.scene");
      read(s, "width", c.data.scene.width, "data.scene");
      read(s, "blob_min", c.data.scene.blob_min, "data.scene");
      read(s, "blob_max", c.data.scene.blob_max, "data.scene");
      read(s, "radius_min", c.data.scene.radius_min, "data.scene");
      read(s, "radius_max", c.data.scene.radius_max, "data.scene");
      read(s, "blur_sigma", c.data.scene.blur_sigma, "data.scene");
      read(s, "noise_std", c.data.scene.noise_std, "data.scene");
    }
    if (d.contains("raters")) {
      if (!d.at("raters").is_array()) throw ConfigError("'data.raters' must be an array");
      c.data.raters.clear();
      for (const json& r : d.at("raters")) {
        check_keys(r, {"rater_id", "bias", "magnitude", "jitter_std"}, "data.raters[]");
        RaterProfile p;
        std::string bias = "threshold_shift";
        read(r, "rater_id", p.rater_id, "data.raters[]");
        read(r, "bias", bias, "data.raters[]");
        read(r, "magnitude", p.magnitude, "data.raters[]");
        read(r, "jitter_std", p.jitter_std, "data.raters[]");
        p.bias = bias_kind_from_string(bias);
        c.data.raters.push_back(p);
      }
    }
    read(d, "count", c.data.count, "data");
    read(d, "train_fraction", c.data.train_fraction, "data");
    read(d, "val_fraction", c.data.val_fraction, "data");
    read(d, "seed", c.data.seed, "data");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"latent_channels", "tau_dim", "hidden", "use_tau", "use_z"}, "model");
    read(m, "latent_channels", c.model.latent_channels, "model");
    read(m, "tau_dim", c.model.tau_dim, "model");
    read(m, "hidden", c.model.hidden, "model");
    read(m, "use_tau", c.model.use_tau, "model");
    read(m, "use_z", c.model.use_z, "model");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t,
               {"lr", "batch_size", "max_epochs", "early_stop_patience", "seed", "adam_beta1", "adam_beta2", "adam_eps",
                "alpha0", "loss_weights", "threads"},
               "train");
    read(t, "lr", c.train.lr, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "max_epochs", c.train.max_epochs, "train");
    read(t, "early_stop_patience", c.train.early_stop_patience, "train");
    read(t, "seed", c.train.seed, "train");
    read(t, "adam_beta1", c.train.adam_beta1, "train");
    read(t, "adam_beta2", c.train.adam_beta2, "train");
    read(t, "adam_eps", c.train.adam_eps, "train");
    read(t, "threads", c.train.threads, "train");
    c.train.prior.alpha0 = read_vector(t, "alpha0", "train");
    if (t.contains("loss_weights")) {
      const json& w = t.at("loss_weights");
      check_keys(w, {"recon", "class_ce", "seg_ce", "kl_z", "kl_tau"}, "train.loss_weights");
      read(w, "recon", c.train.weights.recon, "train.loss_weights");
      read(w, "class_ce", c.train.weights.class_ce, "train.loss_weights");
      read(w, "seg_ce", c.train.weights.seg_ce, "train.loss_weights");
      read(w, "kl_z", c.train.weights.kl_z, "train.loss_weights");
      read(w, "kl_tau", c.train.weights.kl_tau, "train.loss_weights");
    }
  }
  if (j.contains("generate")) {
    const json& g = j.at("generate");
    check_keys(g, {"n_samples", "prior_concentration", "binarize_threshold", "seed"}, "generate");
    read(g, "n_samples", c.generate.n_samples, "generate");
    read(g, "binarize_threshold", c.generate.binarize_threshold, "generate");
    read(g, "seed", c.generate.seed, "generate");
    c.generate.prior_concentration = read_vector(g, "prior_concentration", "generate");
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, {"ged", "soft_dice", "d_max", "d_match", "per_expert"}, "eval");
    read(e, "ged", c.eval.ged, "eval");
    read(e, "soft_dice", c.eval.soft_dice, "eval");
    read(e, "d_max", c.eval.d_max, "eval");
    read(e, "d_match", c.eval.d_match, "eval");
    read(e, "per_expert", c.eval.per_expert, "eval");
  }
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    check_keys(p, {"data_dir", "out_dir"}, "paths");
    read(p, "data_dir", c.paths.data_dir, "paths");
    read(p, "out_dir", c.paths.out_dir, "paths");
  }
  c.model.height = c.data.scene.height;
  c.model.width = c.data.scene.width;
  c.model.experts = c.data.raters.size();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.filename().string() + ": " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json raters = json::array();
  for (const auto& p : data.raters)
    raters.push_back(
        {{"rater_id", p.rater_id}, {"bias", to_string(p.bias)}, {"magnitude", p.magnitude}, {"jitter_std", p.jitter_std}});
  const SceneSpec& s = data.scene;
  json out = {
      {"data",
       {{"scene",
         {{"height", s.height},
          {"width", s.width},
          {"blob_min", s.blob_min},
          {"blob_max", s.blob_max},
          {"radius_min", s.radius_min},
          {"radius_max", s.radius_max},
          {"blur_sigma", s.blur_sigma},
          {"noise_std", s.noise_std}}},
        {"raters", raters},
        {"count", data.count},
        {"train_fraction", data.train_fraction},
        {"val_fraction", data.val_fraction},
        {"seed", data.seed}}},
      {"model",
       {{"latent_channels", model.latent_channels},
        {"tau_dim", model.tau_dim},
        {"hidden", model.hidden},
        {"use_tau", model.use_tau},
        {"use_z", model.use_z}}},
      {"train",
       {{"lr", train.lr},
        {"batch_size", train.batch_size},
        {"max_epochs", train.max_epochs},
        {"early_stop_patience", train.early_stop_patience},
        {"seed", train.seed},
        {"adam_beta1", train.adam_beta1},
        {"adam_beta2", train.adam_beta2},
        {"adam_eps", train.adam_eps},
        {"threads", train.threads},
        {"loss_weights",
         {{"recon", train.weights.recon},
          {"class_ce", train.weights.class_ce},
          {"seg_ce", train.weights.seg_ce},
          {"kl_z", train.weights.kl_z},
          {"kl_tau", train.weights.kl_tau}}}}},
      {"generate",
       {{"n_samples", generate.n_samples},
        {"binarize_threshold", generate.binarize_threshold},
        {"seed", generate.seed}}},
      {"eval",
       {{"ged", eval.ged},
        {"soft_dice", eval.soft_dice},
        {"d_max", eval.d_max},
        {"d_match", eval.d_match},
        {"per_expert", eval.per_expert}}},
      {"paths", {{"data_dir", paths.data_dir}, {"out_dir", paths.out_dir}}}};
  if (train.prior.alpha0.size()) out["train"]["alpha0"] = vector_json(train.prior.alpha0);
  if (generate.prior_concentration.size())
    out["generate"]["prior_concentration"] = vector_json(generate.prior_concentration);
  return out;
}

void ExperimentConfig::validate() const {
  data.scene.validate();
  if (data.raters.size() < 2) throw ConfigError("at least two raters are required");
  std::set<int> ids;
  for (std::size_t i = 0; i < data.raters.size(); ++i) {
    data.raters[i].validate();
    if (!ids.insert(data.raters[i].rater_id).second)
      throw ConfigError("duplicate rater_id " + std::to_string(data.raters[i].rater_id));
  }
  if (data.count == 0) throw ConfigError("data.count must be positive");
  if (!(data.train_fraction > 0.0) || !(data.val_fraction > 0.0) || data.train_fraction + data.val_fraction >= 1.0)
    throw ConfigError("split fractions must be positive and leave a non-empty test split");
  if (data.train_count() == 0 || data.val_count() == 0 || data.train_count() + data.val_count() >= data.count)
    throw ConfigError("data.count too small for the requested split fractions");
  model.validate();
  train.validate();
  if (train.prior.alpha0.size() && train.prior.alpha0.size() != model.tau_dim)
    throw ConfigError("train.alpha0 must have tau_dim components");
  generate.validate();
  if (generate.prior_concentration.size() && generate.prior_concentration.size() != model.tau_dim)
    throw ConfigError("generate.prior_concentration must have tau_dim components");
}

// ---- splits ---------------------------------------------------------------------

Splits make_splits(const DataConfig& data) {
  const Dataset all = build_dataset(data.scene, data.raters, data.count, data.seed);
  const std::size_t a = data.train_count(), b = a + data.val_count();
  return {slice_dataset(all, 0, a), slice_dataset(all, a, b), slice_dataset(all, b, data.count)};
}

void write_splits(const fs::path& dir, const Splits& s) {
  write_dataset(dir / "train", s.train);
  write_dataset(dir / "val", s.val);
  write_dataset(dir / "test", s.test);
}

Splits read_splits(const fs::path& dir) {
  return {read_dataset(dir / "train"), read_dataset(dir / "val"), read_dataset(dir / "test")};
}

// ---- evaluation -----------------------------------------------------------------

namespace {

constexpr std::uint64_t kPriorStream = 0x505249ULL;

struct ImageResult {
  GedReport all, exclusive;
  double soft = 0.0, dmax = 0.0, dmatch = 0.0;
  std::vector<double> per_expert;
  std::vector<double> area_sum;
  std::vector<std::size_t> area_count;
  bool ambiguous = false;
  bool diverse = false;
};

std::size_t distinct_masks(const std::vector<Mask>& masks) {
  std::set<std::vector<std::uint8_t>> seen;
  for (const Mask& m : masks) seen.emplace(m.data(), m.data() + m.size());
  return seen.size();
}

// Every metric except the per-expert column, which depends on the mode.
void score_common(ImageResult& r, const std::vector<Mask>& preds, const Sample& s, const EvalToggles& t) {
  const std::size_t n = s.masks.size();
  if (t.ged) {
    r.all = ged(preds, s.masks, true);
    r.exclusive = ged(preds, s.masks, false);
  }
  if (t.soft_dice) r.soft = soft_dice(preds, s.masks);
  if (t.d_max || t.d_match) {
    std::vector<Mask> cols = preds;
    for (std::size_t k = 0; cols.size() < n; ++k) cols.push_back(preds[k % preds.size()]);
    const DiceMatrix m = dice_matrix(s.masks, cols);
    if (t.d_max) r.dmax = d_max(m);
    if (t.d_match) r.dmatch = d_match(m);
  }
  r.ambiguous = distinct_masks(s.masks) > 1;
  r.diverse = distinct_masks(preds) > 1;
}

EvalReport aggregate(const std::vector<ImageResult>& results, const Dataset& test, const EvalToggles& t,
                     bool per_expert_available) {
  const std::size_t n = test.meta.raters;
  const double inv = 1.0 / double(results.size());
  EvalReport rep;
  rep.images = results.size();
  rep.experts = n;
  MetricSummary& m = rep.metrics;
  auto mean_of = [&](auto get) {
    double acc = 0.0;
    for (const auto& r : results) acc += get(r);
    return acc * inv;
  };
  if (t.ged) {
    m.ged = mean_of([](const ImageResult& r) { return r.all.ged; });
    m.d_pp = mean_of([](const ImageResult& r) { return r.all.d_pp; });
    m.d_pa = mean_of([](const ImageResult& r) { return r.all.d_pa; });
    m.d_aa = mean_of([](const ImageResult& r) { return r.all.d_aa; });
    m.ged_exclusive = mean_of([](const ImageResult& r) { return r.exclusive.ged; });
    m.d_pp_exclusive = mean_of([](const ImageResult& r) { return r.exclusive.d_pp; });
    m.d_aa_exclusive = mean_of([](const ImageResult& r) { return r.exclusive.d_aa; });
  }
  if (t.soft_dice) m.d_soft = mean_of([](const ImageResult& r) { return r.soft; });
  if (t.d_max) m.d_max = mean_of([](const ImageResult& r) { return r.dmax; });
  if (t.d_match) m.d_match = mean_of([](const ImageResult& r) { return r.dmatch; });
  m.d_per_expert.assign(n, std::nullopt);
  if (t.per_expert && per_expert_available) {
    double total = 0.0;
    for (std::size_t e = 0; e < n; ++e) {
      m.d_per_expert[e] = mean_of([e](const ImageResult& r) { return r.per_expert[e]; });
      total += *m.d_per_expert[e];
    }
    m.d_mean = total / double(n);
  }
  rep.mean_pred_area.assign(n, std::nullopt);
  for (std::size_t e = 0; e < n; ++e) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : results) {
      if (r.area_count.empty()) continue;
      sum += r.area_sum[e];
      count += r.area_count[e];
    }
    if (count) rep.mean_pred_area[e] = sum / double(count);
  }
  rep.mean_gt_area.assign(n, 0.0);
  for (const Sample& s : test.samples)
    for (std::size_t e = 0; e < n; ++e) rep.mean_gt_area[e] += double(area(s.masks[e])) * inv;
  std::size_t diverse = 0;
  for (const auto& r : results) {
    rep.ambiguous_images += r.ambiguous;
    diverse += r.ambiguous && r.diverse;
  }
  rep.diverse_fraction = rep.ambiguous_images ? double(diverse) / double(rep.ambiguous_images) : 0.0;
  return rep;
}

fs::path image_dir(const fs::path& root, std::size_t i) { return root / ("img_" + std::to_string(i)); }

}  // namespace

EvalReport evaluate_model(const ModelParams& params, const Dataset& test, GenerationMode mode,
                          const GenerationConfig& cfg, const EvalToggles& toggles,
                          const std::optional<fs::path>& dump_dir) {
  cfg.validate();
  if (test.samples.empty()) throw ConfigError("test dataset is empty");
  const std::size_t n_exp = params.config.experts;
  if (test.meta.raters != n_exp || test.meta.height != params.config.height || test.meta.width != params.config.width)
    throw ConfigError("test dataset does not match the checkpoint's model configuration");
  if (mode == GenerationMode::personalized && cfg.n_samples < n_exp)
    throw ConfigError("personalized evaluation needs n_samples >= number of experts");

  GenerationConfig inner = cfg;
  inner.threads = 1;
  std::vector<ImageResult> results(test.samples.size());
  parallel_for(results.size(), cfg.threads, [&](std::size_t i) {
    const Sample& s = test.samples[i];
    ImageResult& r = results[i];
    r.area_sum.assign(n_exp, 0.0);
    r.area_count.assign(n_exp, 0);
    PredictionSet set;
    if (mode == GenerationMode::personalized) {
      std::vector<PredictionSet> per(n_exp);
      for (std::size_t e = 0; e < n_exp; ++e) {
        GenerationConfig c = inner;
        c.n_samples = cfg.n_samples / n_exp + (e < cfg.n_samples % n_exp ? 1 : 0);
        per[e] = personalized_predict(params, s.image, e, c, RngStream(hash64({cfg.seed, i, e})));
      }
      // Interleave so sample j belongs to expert j mod N.
      for (std::size_t j = 0; j < cfg.n_samples; ++j) {
        const PredictionSet& p = per[j % n_exp];
        const std::size_t k = j / n_exp;
        set.probs.push_back(p.probs[k]);
        set.masks.push_back(p.masks[k]);
        set.provenance.push_back(p.provenance[k]);
      }
      r.per_expert.assign(n_exp, 0.0);
      for (std::size_t e = 0; e < n_exp; ++e) {
        double acc = 0.0;
        for (const Mask& m : per[e].masks) acc += dice(m, s.masks[e]);
        r.per_expert[e] = acc / double(per[e].size());
      }
    } else {
      set = diverse_predict(params, s.image, inner, RngStream(hash64({cfg.seed, i, kPriorStream})));
    }
    for (std::size_t j = 0; j < set.size(); ++j) {
      r.area_sum[set.provenance[j].expert] += double(area(set.masks[j]));
      ++r.area_count[set.provenance[j].expert];
    }
    score_common(r, set.masks, s, toggles);
    if (dump_dir) write_predictions(image_dir(*dump_dir, i), set);
  });

  EvalReport rep = aggregate(results, test, toggles, mode == GenerationMode::personalized);
  rep.model = "mrvi";
  rep.mode = to_string(mode);
  rep.n_samples = cfg.n_samples;
  return rep;
}

double personalized_within_expert_dpp(const ModelParams& params, const Dataset& test, const GenerationConfig& cfg) {
  cfg.validate();
  if (test.samples.empty()) throw ConfigError("test dataset is empty");
  const std::size_t n_exp = params.config.experts;
  GenerationConfig inner = cfg;
  inner.threads = 1;
  std::vector<double> per_image(test.samples.size(), 0.0);
  parallel_for(per_image.size(), cfg.threads, [&](std::size_t i) {
    for (std::size_t e = 0; e < n_exp; ++e) {
      const PredictionSet set =
          personalized_predict(params, test.samples[i].image, e, inner, RngStream(hash64({cfg.seed, i, e})));
      per_image[i] += ged(set.masks, set.masks).d_pp / double(n_exp);
    }
  });
  double acc = 0.0;
  for (double v : per_image) acc += v;
  return acc / double(per_image.size());
}

EvalReport evaluate_deterministic(const ModelParams& baseline, const Dataset& test, const EvalToggles& toggles,
                                  const std::string& name, std::size_t threads,
                                  const std::optional<fs::path>& dump_dir) {
  if (test.samples.empty()) throw ConfigError("test dataset is empty");
  if (test.meta.height != baseline.config.height || test.meta.width != baseline.config.width)
    throw ConfigError("test dataset grid does not match the baseline model");
  const std::size_t n = test.meta.raters;
  std::vector<ImageResult> results(test.samples.size());
  parallel_for(results.size(), threads, [&](std::size_t i) {
    const Sample& s = test.samples[i];
    ImageResult& r = results[i];
    PredictionSet set;
    set.probs.push_back(baseline_predict(baseline, s.image));
    set.masks.push_back(binarize(set.probs[0], 0.5));
    set.provenance.push_back({GenerationMode::personalized, 0, Tensor(), 0});
    r.per_expert.assign(n, 0.0);
    for (std::size_t e = 0; e < n; ++e) r.per_expert[e] = dice(set.masks[0], s.masks[e]);
    score_common(r, set.masks, s, toggles);
    if (dump_dir) write_predictions(image_dir(*dump_dir, i), set);
  });
  EvalReport rep = aggregate(results, test, toggles, true);
  rep.model = name;
  rep.mode = "deterministic";
  rep.n_samples = 1;
  return rep;
}

}  // namespace mrvi
