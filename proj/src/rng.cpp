#include "mrvi/rng.hpp"

#include <cmath>
#include <numbers>

#include "mrvi/errors.hpp"

namespace mrvi {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash64(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t w : words) h = mix64(h ^ mix64(w));
  return h;
}

RngStream RngStream::child(std::initializer_list<std::uint64_t> coords) const {
  std::uint64_t h = mix64(seed_);
  for (std::uint64_t c : coords) h = mix64(h ^ mix64(c));
  return RngStream(h);
}

double RngStream::uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw ArgumentError("below(0)");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  // Box-Muller, one output per pair of uniforms so the stream position is
  // independent of call history.
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RngStream::gamma(double shape) {
  if (!(shape > 0.0)) throw DomainError("gamma shape must be positive");
  if (shape < 1.0) {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

Eigen::VectorXd RngStream::dirichlet(const Eigen::VectorXd& alpha) {
  Eigen::VectorXd g(alpha.size());
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    if (!(alpha[k] > 0.0)) throw DomainError("Dirichlet concentration must be positive");
    g[k] = gamma(alpha[k]);
  }
  const double total = g.sum();
  if (total > 0.0) return g / total;
  // Every gamma draw underflowed (tiny concentrations); fall back to the
  // largest-concentration vertex.
  Eigen::VectorXd out = Eigen::VectorXd::Zero(alpha.size());
  Eigen::Index best = 0;
  alpha.maxCoeff(&best);
  out[best] = 1.0;
  return out;
}

}  // namespace mrvi
