#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mrvi/rng.hpp"
#include "mrvi/tensor.hpp"

namespace mrvi {

// Random-ellipse scene generator settings.
struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  int blob_min = 1;
  int blob_max = 3;
  double radius_min = 4.0;
  double radius_max = 10.0;
  double blur_sigma = 2.0;
  double noise_std = 0.05;

  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

enum class BiasKind { dilate, erode, threshold_shift };

std::string to_string(BiasKind kind);
BiasKind bias_kind_from_string(const std::string& s);

// A simulated annotator with a consistent preference. For dilate/erode the
// magnitude is the iteration count k; for threshold_shift it is the offset
// added to the 0.5 threshold.
struct RaterProfile {
  int rater_id = 0;
  BiasKind bias = BiasKind::threshold_shift;
  double magnitude = 0.0;
  double jitter_std = 0.0;

  // Signed morphological bias: k > 0 dilates, k < 0 erodes, k = 0 is unbiased.
  static RaterProfile from_dilation(int rater_id, int k, double jitter_std);

  void validate() const;
  friend bool operator==(const RaterProfile&, const RaterProfile&) = default;
};

struct Sample {
  std::uint64_t scene_id = 0;
  Tensor image;       // [1,H,W], values in [0,1]
  Tensor soft_truth;  // [H,W], values in [0,1]
  std::vector<Mask> masks;
  std::vector<int> rater_ids;

  friend bool operator==(const Sample& a, const Sample& b);
};

struct DatasetMeta {
  std::size_t raters = 0;   // N
  std::size_t classes = 2;  // K
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;

  std::size_t pixels() const { return height * width; }
  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
  DatasetMeta meta;
  SceneSpec spec;
  std::vector<RaterProfile> profiles;
  std::vector<Sample> samples;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Ellipse {
  double cy, cx, ry, rx, angle;
};

struct Scene {
  Tensor image;
  Tensor soft_truth;
};

// Rasterize the union of ellipses and blur it into a soft map.
Tensor render_soft_truth(const SceneSpec& spec, const std::vector<Ellipse>& blobs);
Scene generate_scene(const SceneSpec& spec, RngStream& stream);

// 4-connected binary morphology with zero padding at the border.
Mask dilate(const Mask& m, int iterations);
Mask erode(const Mask& m, int iterations);
Mask threshold(const Tensor& soft, double level);

Mask render_rater_mask(const Tensor& soft_truth, const RaterProfile& profile, RngStream& stream);

// Sample `scene_id` regenerated in isolation; equals the corresponding entry of
// build_dataset with the same seed.
Sample generate_sample(const SceneSpec& spec, const std::vector<RaterProfile>& profiles, std::uint64_t seed,
                       std::uint64_t scene_id);

Dataset build_dataset(const SceneSpec& spec, const std::vector<RaterProfile>& profiles, std::size_t n,
                      std::uint64_t seed);

// Contiguous scene-id range [begin, end) of a dataset as its own dataset.
Dataset slice_dataset(const Dataset& d, std::size_t begin, std::size_t end);

// Container: manifest.json + raw per-sample files, CRC32-checked on read.
void write_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset read_dataset(const std::filesystem::path& dir);

std::uint32_t crc32_bytes(std::span<const std::uint8_t> bytes);

}  // namespace mrvi
