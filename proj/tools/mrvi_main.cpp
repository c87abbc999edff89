// mrvi: synthetic multi-rater segmentation experiments.
//
// Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 I/O error,
// 4 numerical abort.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mrvi/baselines.hpp"
#include "mrvi/errors.hpp"
#include "mrvi/experiment.hpp"
#include "mrvi/gradsuite.hpp"
#include "mrvi/trainer.hpp"

namespace fs = std::filesystem;
using namespace mrvi;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

struct Common {
  std::string config;
  std::size_t threads = 0;  // 0: take MRVI_THREADS or 1
  bool force = false;
};

std::size_t resolve_threads(std::size_t flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("MRVI_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("MRVI_THREADS must be a positive integer");
    return std::size_t(v);
  }
  return 1;
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig::from_json(nlohmann::json::object())
                                          : ExperimentConfig::from_file(c.config);
  const std::size_t threads = resolve_threads(c.threads);
  cfg.train.threads = threads;
  cfg.generate.threads = threads;
  return cfg;
}

// Refuses to write into a non-empty directory unless forced.
void prepare_out_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) {
    if (!force) throw IoError(dir.string() + " exists and is not empty (use --force to overwrite)");
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw IoError("short write to " + p.string());
}

// A split directory, or a dataset root holding train/val/test.
Dataset read_split(const fs::path& dir, const char* split) {
  if (fs::exists(dir / split / "manifest.json")) return read_dataset(dir / split);
  return read_dataset(dir);
}

int cmd_synth(const Common& common, const std::string& out) {
  const ExperimentConfig cfg = load_config(common);
  prepare_out_dir(out, common.force);
  const Splits s = make_splits(cfg.data);
  write_splits(out, s);
  write_text(fs::path(out) / "config.json", cfg.to_json().dump(2) + "\n");
  std::printf("wrote %zu/%zu/%zu train/val/test samples to %s\n", s.train.samples.size(), s.val.samples.size(),
              s.test.samples.size(), out.c_str());
  return kOk;
}

struct TrainFlags {
  std::string data, out, resume;
  bool no_tau = false, no_z = false;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

void apply_overrides(ExperimentConfig& cfg, const TrainFlags& f) {
  if (f.no_tau) cfg.model.use_tau = false;
  if (f.no_z) cfg.model.use_z = false;
  if (f.epochs) cfg.train.max_epochs = *f.epochs;
  if (f.seed) cfg.train.seed = *f.seed;
}

ModelConfig model_for(const ExperimentConfig& cfg, const Dataset& d) {
  ModelConfig m = cfg.model;
  m.height = d.meta.height;
  m.width = d.meta.width;
  m.experts = d.meta.raters;
  return m;
}

int cmd_train(const Common& common, const TrainFlags& f) {
  ExperimentConfig cfg = load_config(common);
  apply_overrides(cfg, f);
  const Dataset train_set = read_split(f.data, "train");
  const Dataset val_set = read_split(f.data, "val");
  const ModelConfig model = model_for(cfg, train_set);

  std::optional<ResumeState> resume;
  if (!f.resume.empty())
    resume = ResumeState{load_checkpoint(fs::path(f.resume) / "last.bin", &model),
                         load_checkpoint(fs::path(f.resume) / "checkpoint.bin", &model)};
  prepare_out_dir(f.out, common.force);
  const TrainResult r = train(train_set, val_set, model, cfg.train, resume, [](const EpochRecord& e) {
    std::printf("epoch %zu  train %.6f  val %.6f\n", e.epoch, e.train.total, e.val.total);
    std::fflush(stdout);
  });
  const fs::path out = f.out;
  save_checkpoint(out / "checkpoint.bin", r.best);
  save_checkpoint(out / "last.bin", r.last);
  write_text(out / "history.csv", history_to_csv(r.history));
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  std::printf("best epoch %llu (val %.6f)%s\n", static_cast<unsigned long long>(r.best.epoch), r.best.val_loss,
              r.early_stopped ? ", stopped early" : "");
  return kOk;
}

struct EvalFlags {
  std::string checkpoint, data, out, mode = "personalized";
  std::optional<std::size_t> n_samples;
  bool dump = false;
};

int cmd_eval(const Common& common, const EvalFlags& f) {
  ExperimentConfig cfg = load_config(common);
  if (f.n_samples) cfg.generate.n_samples = *f.n_samples;
  const GenerationMode mode = generation_mode_from_string(f.mode);
  Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const Dataset test = read_split(f.data, "test");
  // The ablation switches travel with the checkpoint; everything else must match the config.
  ModelConfig expected = model_for(cfg, test);
  expected.use_tau = ckpt.params.config.use_tau;
  expected.use_z = ckpt.params.config.use_z;
  if (!(expected == ckpt.params.config))
    throw ConfigError("checkpoint model hyperparameters do not match the configuration and dataset");
  prepare_out_dir(f.out, common.force);
  std::optional<fs::path> dump;
  if (f.dump) dump = fs::path(f.out) / "predictions";
  const EvalReport rep = evaluate_model(ckpt.params, test, mode, cfg.generate, cfg.eval, dump);
  write_report(f.out, rep);
  std::cout << report_to_csv(rep);
  return kOk;
}

struct BaselineFlags {
  std::string data, out;
  std::optional<std::size_t> rater;
  bool majority = false;
  bool dump = false;
};

int cmd_baseline(const Common& common, const BaselineFlags& f) {
  if (f.majority == f.rater.has_value()) throw ConfigError("choose exactly one of --rater or --majority");
  const ExperimentConfig cfg = load_config(common);
  const Dataset train_set = read_split(f.data, "train");
  const Dataset val_set = read_split(f.data, "val");
  const Dataset test = read_split(f.data, "test");
  const ModelConfig model = model_for(cfg, train_set);
  prepare_out_dir(f.out, common.force);
  const TrainResult r = f.majority ? majority_vote_baseline(train_set, val_set, model, cfg.train)
                                   : per_expert_baseline(train_set, val_set, *f.rater, model, cfg.train);
  const fs::path out = f.out;
  save_checkpoint(out / "checkpoint.bin", r.best);
  write_text(out / "history.csv", history_to_csv(r.history));
  const std::string name = f.majority ? "majority_vote" : "expert_" + std::to_string(*f.rater);
  std::optional<fs::path> dump;
  if (f.dump) dump = out / "predictions";
  const EvalReport rep = evaluate_deterministic(r.best.params, test, cfg.eval, name, cfg.train.threads, dump);
  write_report(out, rep);
  std::cout << report_to_csv(rep);
  return kOk;
}

struct GradFlags {
  std::size_t trials = 20;
  std::string corrupt;
  std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradFlags& f) {
  GradSuiteOptions opts;
  opts.trials = f.trials;
  opts.seed = f.seed;
  opts.corrupt_op = f.corrupt;
  if (!f.corrupt.empty()) {
    const auto ops = grad_suite_ops();
    if (std::find(ops.begin(), ops.end(), f.corrupt) == ops.end())
      throw ConfigError("unknown op '" + f.corrupt + "' for --corrupt");
  }
  bool ok = true;
  for (const auto& e : run_grad_suite(opts)) {
    std::printf("%-28s %-4s worst_rel_err=%.3e\n", e.op.c_str(), e.passed ? "ok" : "FAIL", e.worst_error);
    ok = ok && e.passed;
  }
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-rater segmentation with expert-preference and ambiguity latents"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "experiment configuration (JSON)");
    sub->add_option("--threads", common.threads, "worker threads (default: MRVI_THREADS or 1)");
    sub->add_flag("--force", common.force, "overwrite a non-empty output directory");
  };

  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate the synthetic train/val/test splits");
  add_common(synth);
  synth->add_option("--out", synth_out, "output directory")->required();

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "train the model");
  add_common(train_cmd);
  train_cmd->add_option("--data", tf.data, "dataset root written by synth")->required();
  train_cmd->add_option("--out", tf.out, "output directory")->required();
  train_cmd->add_option("--resume", tf.resume, "directory of a previous run to continue");
  train_cmd->add_flag("--no-tau", tf.no_tau, "ablate the expert-preference latent");
  train_cmd->add_flag("--no-z", tf.no_z, "ablate the ambiguity latent");
  train_cmd->add_option("--epochs", tf.epochs, "override train.max_epochs");
  train_cmd->add_option("--seed", tf.seed, "override train.seed");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "sample predictions and compute metrics");
  add_common(eval);
  eval->add_option("--checkpoint", ef.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", ef.data, "dataset root or test split")->required();
  eval->add_option("--out", ef.out, "output directory")->required();
  eval->add_option("--mode", ef.mode, "personalized or prior")->check(CLI::IsMember({"personalized", "prior"}));
  eval->add_option("--n-samples", ef.n_samples, "samples per image (default 50)");
  eval->add_flag("--dump", ef.dump, "write per-image predictions");

  BaselineFlags bf;
  auto* baseline = app.add_subcommand("baseline", "train and evaluate a deterministic baseline");
  add_common(baseline);
  baseline->add_option("--data", bf.data, "dataset root written by synth")->required();
  baseline->add_option("--out", bf.out, "output directory")->required();
  baseline->add_option("--rater", bf.rater, "train on this rater's masks");
  baseline->add_flag("--majority", bf.majority, "train on majority-vote masks");
  baseline->add_flag("--dump", bf.dump, "write per-image predictions");

  GradFlags gf;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad->add_option("--trials", gf.trials, "seeded trials per op");
  grad->add_option("--seed", gf.seed, "suite seed");
  grad->add_option("--corrupt", gf.corrupt, "scale this op's adjoint (self-test of the checker)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) return cmd_synth(common, synth_out);
    if (*train_cmd) return cmd_train(common, tf);
    if (*eval) return cmd_eval(common, ef);
    if (*baseline) return cmd_baseline(common, bf);
    if (*grad) return cmd_gradcheck(gf);
  } catch (const NumericalAbort& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return kNumeric;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const CorruptDatasetError& e) {
    std::fprintf(stderr, "corrupt dataset: %s\n", e.what());
    return kIo;
  } catch (const CorruptCheckpointError& e) {
    std::fprintf(stderr, "corrupt checkpoint: %s\n", e.what());
    return kIo;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const std::logic_error& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  }
  return kOk;
}
