#include <doctest.h>

#include <sstream>

#include "mrvi/baselines.hpp"
#include "mrvi/experiment.hpp"
#include "test_util.hpp"

using namespace mrvi;
using nlohmann::json;

#ifndef MRVI_SOURCE_DIR
#define MRVI_SOURCE_DIR "."
#endif

TEST_SUITE("experiment") {

TEST_CASE("shipped default config parses") {
  const ExperimentConfig c = ExperimentConfig::from_file(std::string(MRVI_SOURCE_DIR) + "/configs/default.json");
  CHECK(c.data.count == 800);
  CHECK(c.data.train_count() == 512);
  CHECK(c.data.val_count() == 128);
  CHECK(c.data.test_count() == 160);
  CHECK(c.model.experts == 4);
  CHECK(c.model.height == 32);
  CHECK(c.generate.n_samples == 50);
  CHECK(c.data.raters[0].bias == BiasKind::erode);
  CHECK(c.data.raters[3].bias == BiasKind::dilate);
}

TEST_CASE("config round trips through json") {
  ExperimentConfig c;
  c.train.lr = 3e-3;
  c.model.use_tau = false;
  c.generate.prior_concentration = Tensor({4}, 2.0);
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.train.lr == 3e-3);
  CHECK_FALSE(back.model.use_tau);
}

TEST_CASE("config rejects unknown keys, wrong types and bad values") {
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"extra", 1}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"train", {{"lr", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"train", {{"batch_size", -3}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"model", {{"dropout", 0.1}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"data", {{"count", 0}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"data", {{"train_fraction", 0.9}, {"val_fraction", 0.2}}}}),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"data", {{"raters", {{{"bias", "blur"}}}}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"generate", {{"prior_concentration", {1, 1}}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_file("/nonexistent/config.json"), IoError);
}

TEST_CASE("splits are contiguous by scene id") {
  DataConfig d;
  d.count = 20;
  d.scene.height = d.scene.width = 8;
  d.scene.radius_min = 1.5;
  d.scene.radius_max = 3.0;
  const Splits s = make_splits(d);
  CHECK(s.train.samples.size() == 13);
  CHECK(s.val.samples.size() == 3);
  CHECK(s.test.samples.size() == 4);
  CHECK(s.train.samples.back().scene_id + 1 == s.val.samples.front().scene_id);
  CHECK(s.val.samples.back().scene_id + 1 == s.test.samples.front().scene_id);
  TempDir tmp("splits");
  write_splits(tmp.path, s);
  const Splits back = read_splits(tmp.path);
  CHECK(back.test.samples.size() == 4);
  CHECK(same_masks(back.test.samples[0].masks, s.test.samples[0].masks));
}

TEST_CASE("evaluation reports per mode") {
  const Dataset d = tiny_dataset(3, 1);
  const ModelParams p = init_model(tiny_model(d), 2);
  GenerationConfig cfg;
  cfg.n_samples = 7;
  const EvalReport pers = evaluate_model(p, d, GenerationMode::personalized, cfg, EvalToggles{});
  REQUIRE(pers.metrics.d_per_expert.size() == 3);
  for (const auto& v : pers.metrics.d_per_expert) CHECK(v.has_value());
  CHECK(pers.metrics.d_mean.has_value());
  CHECK(std::abs(*pers.metrics.ged - (2 * *pers.metrics.d_pa - *pers.metrics.d_pp - *pers.metrics.d_aa)) < 1e-12);
  CHECK(*pers.metrics.d_match <= *pers.metrics.d_max + 1e-12);

  const EvalReport prior = evaluate_model(p, d, GenerationMode::prior, cfg, EvalToggles{});
  for (const auto& v : prior.metrics.d_per_expert) CHECK_FALSE(v.has_value());
  CHECK_FALSE(prior.metrics.d_mean.has_value());

  const std::string csv = report_to_csv(prior);
  CHECK(csv.rfind("ged,d_pp,d_pa,d_aa,d_soft,d_max,d_match,d_A0,d_A1,d_A2,d_mean\n", 0) == 0);
  CHECK(csv.find("N/A") != std::string::npos);
  const json j = report_to_json(prior);
  CHECK(j["metrics"]["d_per_expert"][0].is_null());
  CHECK(j["mode"] == "prior");

  cfg.n_samples = 2;
  CHECK_THROWS_AS(evaluate_model(p, d, GenerationMode::personalized, cfg, EvalToggles{}), ConfigError);
}

TEST_CASE("evaluation is independent of the thread count") {
  const Dataset d = tiny_dataset(4, 3);
  const ModelParams p = init_model(tiny_model(d), 5);
  GenerationConfig cfg;
  cfg.n_samples = 6;
  const json a = report_to_json(evaluate_model(p, d, GenerationMode::prior, cfg, EvalToggles{}));
  cfg.threads = 3;
  const json b = report_to_json(evaluate_model(p, d, GenerationMode::prior, cfg, EvalToggles{}));
  CHECK(a.dump() == b.dump());
}

TEST_CASE("deterministic evaluation") {
  const Dataset d = tiny_dataset(2, 4);
  const ModelParams p = init_model(baseline_model_config(tiny_model(d)), 6);
  const EvalReport r = evaluate_deterministic(p, d, EvalToggles{}, "majority_vote");
  CHECK(r.mode == "deterministic");
  CHECK(*r.metrics.d_pp == 0.0);
}

TEST_CASE("history csv") {
  EpochRecord e;
  e.epoch = 1;
  e.train.recon = 1.0;
  e.train.total = 1.0;
  e.val.total = 2.0;
  const std::string csv = history_to_csv({e});
  std::istringstream is(csv);
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  CHECK(header == "epoch,recon,class,seg,kl_z,kl_tau,total,val_total");
  CHECK(row == "1,1,0,0,0,0,1,2");
}

}  // TEST_SUITE
