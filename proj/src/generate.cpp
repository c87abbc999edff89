#include "mrvi/generate.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

#include "mrvi/errors.hpp"
#include "mrvi/trainer.hpp"

namespace mrvi {

namespace fs = std::filesystem;

void GenerationConfig::validate() const {
  if (n_samples < 1) throw ConfigError("n_samples must be at least 1");
  for (std::size_t i = 0; i < prior_concentration.size(); ++i)
    if (!(prior_concentration[i] > 0.0)) throw ConfigError("prior_concentration must be strictly positive");
  if (!(binarize_threshold >= 0.0 && binarize_threshold <= 1.0))
    throw ConfigError("binarize_threshold must lie in [0, 1]");
}

Tensor GenerationConfig::concentration(std::size_t tau_dim) const {
  if (prior_concentration.size() == 0) return Tensor({tau_dim}, 1.0);
  if (prior_concentration.size() != tau_dim)
    throw ConfigError("prior_concentration has " + std::to_string(prior_concentration.size()) +
                      " components, model tau_dim is " + std::to_string(tau_dim));
  return prior_concentration;
}

std::string to_string(GenerationMode mode) { return mode == GenerationMode::prior ? "prior" : "personalized"; }

GenerationMode generation_mode_from_string(const std::string& s) {
  if (s == "personalized") return GenerationMode::personalized;
  if (s == "prior") return GenerationMode::prior;
  throw ConfigError("unknown generation mode '" + s + "' (expected personalized or prior)");
}

Mask binarize(const Tensor& prob, double threshold) {
  if (prob.rank() != 2) throw DimensionError("binarize: expected [H,W], got " + shape_string(prob.shape()));
  Mask m(Eigen::Index(prob.dim(0)), Eigen::Index(prob.dim(1)));
  for (std::size_t i = 0; i < prob.size(); ++i) m.data()[i] = prob[i] > threshold ? 1 : 0;
  return m;
}

std::size_t route_expert(const Tensor& class_probs) {
  if (class_probs.size() == 0) throw ArgumentError("route_expert: empty probability vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < class_probs.size(); ++i)
    if (class_probs[i] > class_probs[best]) best = i;
  return best;
}

namespace {

Tensor foreground(const Tensor& class_probs) {
  const std::size_t H = class_probs.dim(1), W = class_probs.dim(2);
  Tensor fg({H, W});
  std::copy_n(class_probs.ptr() + H * W, H * W, fg.ptr());
  return fg;
}

struct Draw {
  Tensor prob;
  Provenance prov;
};

PredictionSet collect(std::vector<Draw>& draws, double threshold) {
  PredictionSet set;
  for (auto& d : draws) {
    set.masks.push_back(binarize(d.prob, threshold));
    set.probs.push_back(std::move(d.prob));
    set.provenance.push_back(std::move(d.prov));
  }
  return set;
}

void require_image(const ModelParams& p, const Tensor& image) {
  if (image.size() != p.config.height * p.config.width)
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match the model grid " +
                         std::to_string(p.config.height) + "x" + std::to_string(p.config.width));
}

Tensor draw_z(const ModelParams& p, const GaussianPosterior& post, RngStream& s) {
  return p.config.use_z ? sample_gaussian(post, s) : post.mu;
}

}  // namespace

PredictionSet personalized_predict(const ModelParams& params, const Tensor& image, std::size_t expert,
                                   const GenerationConfig& cfg, const RngStream& stream) {
  cfg.validate();
  require_image(params, image);
  if (expert >= params.config.experts)
    throw IndexError("expert " + std::to_string(expert) + " out of range [0," + std::to_string(params.config.experts) +
                     ")");
  const GaussianPosterior post = encode(params, image, expert);
  const DirichletPosterior alpha = params.config.use_tau ? embed_expert(params, expert) : DirichletPosterior{};

  std::vector<Draw> draws(cfg.n_samples);
  parallel_for(cfg.n_samples, cfg.threads, [&](std::size_t j) {
    RngStream s = stream.child({j});
    Draw& d = draws[j];
    d.prov = {GenerationMode::personalized, expert, Tensor(), s.seed()};
    SimplexVector tau;
    if (params.config.use_tau) tau = sample_dirichlet(alpha, s);
    const Tensor z = draw_z(params, post, s);
    d.prob = foreground(predict_seg(params, tau, z));
    d.prov.tau = tau.tau;
  });
  return collect(draws, cfg.binarize_threshold);
}

PredictionSet diverse_predict(const ModelParams& params, const Tensor& image, const GenerationConfig& cfg,
                              const RngStream& stream) {
  cfg.validate();
  require_image(params, image);
  const ModelConfig& mc = params.config;
  const Tensor alpha_star = cfg.concentration(mc.tau_dim);
  const Eigen::VectorXd alpha_vec = alpha_star.data();

  // Encoders are deterministic given the image, so run each once.
  std::vector<GaussianPosterior> posts;
  for (std::size_t i = 0; i < mc.experts; ++i) posts.push_back(encode(params, image, i));

  std::vector<Draw> draws(cfg.n_samples);
  parallel_for(cfg.n_samples, cfg.threads, [&](std::size_t j) {
    RngStream s = stream.child({j});
    Draw& d = draws[j];
    d.prov = {GenerationMode::prior, 0, Tensor(), s.seed()};
    SimplexVector tau;
    if (mc.use_tau) {
      const Eigen::VectorXd t = s.dirichlet(alpha_vec);
      tau.tau = Tensor({mc.tau_dim}, Tensor::Storage(t));
      d.prov.expert = route_expert(classify(params, tau));
    } else {
      // Without tau there is nothing to route on; pick an expert uniformly.
      d.prov.expert = std::size_t(s.below(mc.experts));
    }
    const Tensor z = draw_z(params, posts[d.prov.expert], s);
    d.prob = foreground(predict_seg(params, tau, z));
    d.prov.tau = tau.tau;
  });
  return collect(draws, cfg.binarize_threshold);
}

void write_predictions(const fs::path& dir, const PredictionSet& set) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + p.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!os) throw IoError("short write to " + p.string());
  };
  nlohmann::json prov = nlohmann::json::array();
  for (std::size_t j = 0; j < set.size(); ++j) {
    const Tensor& prob = set.probs[j];
    std::vector<std::uint8_t> f32(prob.size() * 4);
    for (std::size_t i = 0; i < prob.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(float(prob[i]));
      for (int b = 0; b < 4; ++b) f32[i * 4 + std::size_t(b)] = std::uint8_t(bits >> (8 * b));
    }
    write(dir / ("pred_" + std::to_string(j) + ".f32"), f32);
    const Mask& m = set.masks[j];
    write(dir / ("pred_" + std::to_string(j) + ".u8"), std::vector<std::uint8_t>(m.data(), m.data() + m.size()));

    const Provenance& p = set.provenance[j];
    std::vector<double> tau(p.tau.size());
    for (std::size_t k = 0; k < tau.size(); ++k) tau[k] = p.tau[k];
    prov.push_back({{"index", j},
                    {"mode", to_string(p.mode)},
                    {"expert", p.expert},
                    {"tau", tau},
                    {"stream_id", p.stream_id}});
  }
  const std::string text = prov.dump(2) + "\n";
  write(dir / "provenance.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace mrvi
