#include "mrvi/datasynth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "mrvi/errors.hpp"

namespace mrvi {

namespace {

constexpr std::uint64_t kSceneStream = ~std::uint64_t{0};

double to_f32(double v) { return double(float(v)); }

}  // namespace

void SceneSpec::validate() const {
  if (height == 0 || width == 0) throw ConfigError("scene grid must be non-empty");
  if (blob_min < 1 || blob_max < blob_min) throw ConfigError("blob_count_range must satisfy 1 <= min <= max");
  if (!(radius_min > 0.0) || radius_max < radius_min) throw ConfigError("radius_range must satisfy 0 < min <= max");
  if (!(radius_max < double(std::min(height, width)) / 2.0))
    throw ConfigError("radius_range max must be below min(H,W)/2");
  if (!(blur_sigma > 0.0)) throw ConfigError("blur_sigma must be positive");
  if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
}

std::string to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::dilate: return "dilate";
    case BiasKind::erode: return "erode";
    case BiasKind::threshold_shift: return "threshold_shift";
  }
  return "?";
}

BiasKind bias_kind_from_string(const std::string& s) {
  if (s == "dilate") return BiasKind::dilate;
  if (s == "erode") return BiasKind::erode;
  if (s == "threshold_shift") return BiasKind::threshold_shift;
  throw ConfigError("unknown rater bias '" + s + "'");
}

RaterProfile RaterProfile::from_dilation(int rater_id, int k, double jitter_std) {
  if (k == 0) return RaterProfile{rater_id, BiasKind::threshold_shift, 0.0, jitter_std};
  return RaterProfile{rater_id, k > 0 ? BiasKind::dilate : BiasKind::erode, double(std::abs(k)), jitter_std};
}

void RaterProfile::validate() const {
  if (rater_id < 0) throw ConfigError("rater_id must be non-negative");
  if (jitter_std < 0.0) throw ConfigError("jitter_std must be non-negative");
  if (bias == BiasKind::threshold_shift) {
    if (!(magnitude > -0.4 && magnitude < 0.4)) throw ConfigError("threshold_shift must lie in (-0.4, 0.4)");
  } else if (magnitude < 0.0 || magnitude != std::floor(magnitude)) {
    throw ConfigError("dilate/erode iterations must be a non-negative integer");
  }
}

bool operator==(const Sample& a, const Sample& b) {
  if (a.scene_id != b.scene_id || !(a.image == b.image) || !(a.soft_truth == b.soft_truth)) return false;
  if (a.rater_ids != b.rater_ids || a.masks.size() != b.masks.size()) return false;
  for (std::size_t i = 0; i < a.masks.size(); ++i) {
    if (a.masks[i].rows() != b.masks[i].rows() || a.masks[i].cols() != b.masks[i].cols()) return false;
    if (!(a.masks[i] == b.masks[i]).all()) return false;
  }
  return true;
}

Tensor render_soft_truth(const SceneSpec& spec, const std::vector<Ellipse>& blobs) {
  const auto H = spec.height, W = spec.width;
  Map2d hard = Map2d::Zero(Eigen::Index(H), Eigen::Index(W));
  for (const Ellipse& e : blobs) {
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double dy = double(y) - e.cy, dx = double(x) - e.cx;
        const double u = (dy * c + dx * s) / e.ry;
        const double v = (-dy * s + dx * c) / e.rx;
        if (u * u + v * v <= 1.0) hard(Eigen::Index(y), Eigen::Index(x)) = 1.0;
      }
    }
  }

  // Separable Gaussian blur, zero outside the grid.
  const int radius = std::max(1, int(std::ceil(3.0 * spec.blur_sigma)));
  Eigen::ArrayXd kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    kernel[i + radius] = std::exp(-double(i * i) / (2.0 * spec.blur_sigma * spec.blur_sigma));
  kernel /= kernel.sum();

  Map2d tmp = Map2d::Zero(hard.rows(), hard.cols());
  for (Eigen::Index y = 0; y < hard.rows(); ++y)
    for (Eigen::Index x = 0; x < hard.cols(); ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const Eigen::Index xx = x + i;
        if (xx >= 0 && xx < hard.cols()) acc += kernel[i + radius] * hard(y, xx);
      }
      tmp(y, x) = acc;
    }
  Tensor soft({H, W});
  for (Eigen::Index y = 0; y < hard.rows(); ++y)
    for (Eigen::Index x = 0; x < hard.cols(); ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const Eigen::Index yy = y + i;
        if (yy >= 0 && yy < hard.rows()) acc += kernel[i + radius] * tmp(yy, x);
      }
      soft.at(y, x) = to_f32(std::clamp(acc, 0.0, 1.0));
    }
  return soft;
}

Scene generate_scene(const SceneSpec& spec, RngStream& stream) {
  spec.validate();
  const int count = spec.blob_min + int(stream.below(std::uint64_t(spec.blob_max - spec.blob_min + 1)));
  std::vector<Ellipse> blobs;
  for (int b = 0; b < count; ++b) {
    Ellipse e{};
    e.ry = stream.uniform(spec.radius_min, spec.radius_max);
    e.rx = stream.uniform(spec.radius_min, spec.radius_max);
    const double r = std::max(e.ry, e.rx);
    e.cy = stream.uniform(r, double(spec.height) - 1.0 - r);
    e.cx = stream.uniform(r, double(spec.width) - 1.0 - r);
    e.angle = stream.uniform(0.0, std::numbers::pi);
    blobs.push_back(e);
  }
  Scene scene;
  scene.soft_truth = render_soft_truth(spec, blobs);
  scene.image = Tensor({1, spec.height, spec.width});
  for (std::size_t i = 0; i < scene.soft_truth.size(); ++i) {
    const double v = scene.soft_truth[i] * 0.6 + 0.2 + spec.noise_std * stream.normal();
    scene.image[i] = to_f32(std::clamp(v, 0.0, 1.0));
  }
  return scene;
}

Mask threshold(const Tensor& soft, double level) {
  Mask m(Eigen::Index(soft.dim(0)), Eigen::Index(soft.dim(1)));
  for (std::size_t i = 0; i < soft.size(); ++i) m.data()[i] = soft[i] > level ? 1 : 0;
  return m;
}

Mask dilate(const Mask& m, int iterations) {
  Mask cur = m;
  for (int it = 0; it < iterations; ++it) {
    Mask next = cur;
    for (Eigen::Index y = 0; y < cur.rows(); ++y)
      for (Eigen::Index x = 0; x < cur.cols(); ++x) {
        if (cur(y, x)) continue;
        const bool hit = (y > 0 && cur(y - 1, x)) || (y + 1 < cur.rows() && cur(y + 1, x)) ||
                         (x > 0 && cur(y, x - 1)) || (x + 1 < cur.cols() && cur(y, x + 1));
        next(y, x) = hit ? 1 : 0;
      }
    cur = std::move(next);
  }
  return cur;
}

Mask erode(const Mask& m, int iterations) {
  Mask cur = m;
  for (int it = 0; it < iterations; ++it) {
    Mask next = cur;
    for (Eigen::Index y = 0; y < cur.rows(); ++y)
      for (Eigen::Index x = 0; x < cur.cols(); ++x) {
        if (!cur(y, x)) continue;
        const bool keep = (y > 0 && cur(y - 1, x)) && (y + 1 < cur.rows() && cur(y + 1, x)) &&
                          (x > 0 && cur(y, x - 1)) && (x + 1 < cur.cols() && cur(y, x + 1));
        next(y, x) = keep ? 1 : 0;
      }
    cur = std::move(next);
  }
  return cur;
}

Mask render_rater_mask(const Tensor& soft_truth, const RaterProfile& profile, RngStream& stream) {
  // One jitter draw per (image, rater), applied to whichever quantity the bias acts on.
  const double jitter = profile.jitter_std > 0.0 ? profile.jitter_std * stream.normal() : 0.0;
  if (profile.bias == BiasKind::threshold_shift) {
    const double level = std::clamp(0.5 + profile.magnitude + jitter, 0.0, 1.0);
    return threshold(soft_truth, level);
  }
  const Mask base = threshold(soft_truth, 0.5);
  const int iterations = std::max(0, int(profile.magnitude) + int(std::lround(jitter)));
  return profile.bias == BiasKind::dilate ? dilate(base, iterations) : erode(base, iterations);
}

namespace {

void validate_profiles(const std::vector<RaterProfile>& profiles) {
  if (profiles.empty()) throw ConfigError("at least one rater profile is required");
  std::set<int> ids;
  for (const auto& p : profiles) {
    p.validate();
    if (!ids.insert(p.rater_id).second) throw ConfigError("duplicate rater_id " + std::to_string(p.rater_id));
  }
}

}  // namespace

Sample generate_sample(const SceneSpec& spec, const std::vector<RaterProfile>& profiles, std::uint64_t seed,
                       std::uint64_t scene_id) {
  RngStream scene_stream(hash64({seed, scene_id, kSceneStream}));
  Scene scene = generate_scene(spec, scene_stream);
  Sample s;
  s.scene_id = scene_id;
  s.image = std::move(scene.image);
  s.soft_truth = std::move(scene.soft_truth);
  for (const auto& p : profiles) {
    RngStream rater_stream(hash64({seed, scene_id, std::uint64_t(p.rater_id)}));
    s.masks.push_back(render_rater_mask(s.soft_truth, p, rater_stream));
    s.rater_ids.push_back(p.rater_id);
  }
  return s;
}

Dataset build_dataset(const SceneSpec& spec, const std::vector<RaterProfile>& profiles, std::size_t n,
                      std::uint64_t seed) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  spec.validate();
  validate_profiles(profiles);
  if (profiles.size() < 2) throw ConfigError("at least two raters are required");
  Dataset d;
  d.spec = spec;
  d.profiles = profiles;
  d.meta = DatasetMeta{profiles.size(), 2, spec.height, spec.width, n, seed};
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(spec, profiles, seed, i));
  return d;
}

Dataset slice_dataset(const Dataset& d, std::size_t begin, std::size_t end) {
  if (begin > end || end > d.samples.size()) throw ArgumentError("slice_dataset: range out of bounds");
  Dataset out;
  out.spec = d.spec;
  out.profiles = d.profiles;
  out.meta = d.meta;
  out.meta.sample_count = end - begin;
  out.samples.assign(d.samples.begin() + long(begin), d.samples.begin() + long(end));
  return out;
}

}  // namespace mrvi
