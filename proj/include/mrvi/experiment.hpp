#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrvi/datasynth.hpp"
#include "mrvi/generate.hpp"
#include "mrvi/metrics.hpp"
#include "mrvi/model.hpp"
#include "mrvi/trainer.hpp"

namespace mrvi {

struct DataConfig {
  SceneSpec scene;
  std::vector<RaterProfile> raters;  // default: dilation -2, -1, +1, +2
  std::size_t count = 800;
  double train_fraction = 0.64;
  double val_fraction = 0.16;
  std::uint64_t seed = 0;

  DataConfig();
  // Sample counts of the train/val/test splits (test takes the remainder).
  std::size_t train_count() const;
  std::size_t val_count() const;
  std::size_t test_count() const { return count - train_count() - val_count(); }
};

struct EvalToggles {
  bool ged = true;
  bool soft_dice = true;
  bool d_max = true;
  bool d_match = true;
  bool per_expert = true;
};

struct PathsConfig {
  std::string data_dir = "data";
  std::string out_dir = "runs";
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;  // height/width/experts are taken from the data section
  TrainConfig train;
  GenerationConfig generate;
  EvalToggles eval;
  PathsConfig paths;

  // Throws ConfigError on unknown keys, wrong types or invalid values.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

struct Splits {
  Dataset train, val, test;
};

// Generates the full dataset and splits it contiguously by scene id.
Splits make_splits(const DataConfig& data);
void write_splits(const std::filesystem::path& dir, const Splits& s);
Splits read_splits(const std::filesystem::path& dir);

// ---- evaluation ----------------------------------------------------------------

struct MetricSummary {
  std::optional<double> ged, d_pp, d_pa, d_aa;
  std::optional<double> ged_exclusive, d_pp_exclusive, d_aa_exclusive;  // i != j pair means
  std::optional<double> d_soft, d_max, d_match;
  std::vector<std::optional<double>> d_per_expert;  // empty entries are N/A
  std::optional<double> d_mean;
};

struct EvalReport {
  std::string model;  // "mrvi", "majority_vote", "expert_<r>"
  std::string mode;   // personalized | prior | deterministic
  std::size_t n_samples = 0;
  std::size_t images = 0;
  std::size_t experts = 0;
  MetricSummary metrics;
  // Mean foreground area of predictions routed to / requested for each expert,
  // and of each rater's own annotations.
  std::vector<std::optional<double>> mean_pred_area;
  std::vector<double> mean_gt_area;
  // Images whose annotations disagree, and the share of those whose
  // predictions contain at least two distinct binary masks.
  std::size_t ambiguous_images = 0;
  double diverse_fraction = 0.0;
};

// Samples n_samples predictions per test image and aggregates every metric as
// a mean over images. Personalized mode assigns sample j to expert j mod N.
EvalReport evaluate_model(const ModelParams& params, const Dataset& test, GenerationMode mode,
                          const GenerationConfig& cfg, const EvalToggles& toggles,
                          const std::optional<std::filesystem::path>& dump_dir = std::nullopt);

// Single deterministic prediction per image. For D_match it is replicated so
// every annotation can be matched.
EvalReport evaluate_deterministic(const ModelParams& baseline, const Dataset& test, const EvalToggles& toggles,
                                  const std::string& name, std::size_t threads = 1,
                                  const std::optional<std::filesystem::path>& dump_dir = std::nullopt);

// Mean over test images and experts of d_pp among n_samples personalized
// predictions for a single expert (diversity from the latent draws alone).
double personalized_within_expert_dpp(const ModelParams& params, const Dataset& test, const GenerationConfig& cfg);

nlohmann::json report_to_json(const EvalReport& r);
std::string report_to_csv(const EvalReport& r);
// Writes metrics.json and metrics.csv into dir.
void write_report(const std::filesystem::path& dir, const EvalReport& r);

// history.csv: epoch, recon, class, seg, kl_z, kl_tau, total, val_total
std::string history_to_csv(const std::vector<EpochRecord>& history);

}  // namespace mrvi
