#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace mrvi {

// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Order-sensitive combination of a seed with stream coordinates, e.g.
// hash64({seed, sample_index, rater_index}).
std::uint64_t hash64(std::initializer_list<std::uint64_t> words);

// Seedable stream with platform-independent output. The engine is the
// standard-specified mt19937_64; all distributions are implemented here since
// the standard library's distributions are implementation-defined.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  // Independent child stream keyed by coordinates.
  RngStream child(std::initializer_list<std::uint64_t> coords) const;

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Gamma(shape, 1) by Marsaglia-Tsang, with the shape < 1 boost.
  double gamma(double shape);
  // Exact Dirichlet sample by Gamma normalization.
  Eigen::VectorXd dirichlet(const Eigen::VectorXd& alpha);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace mrvi
