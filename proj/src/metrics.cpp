#include "mrvi/metrics.hpp"

#include <limits>
#include <string>

#include "mrvi/errors.hpp"

namespace mrvi {

namespace {

void require_same_shape(const Mask& a, const Mask& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(where) + ": mask shapes " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + " differ");
}

struct Overlap {
  std::size_t inter = 0, a = 0, b = 0;
};

Overlap overlap(const Mask& a, const Mask& b) {
  Overlap o;
  const std::uint8_t* pa = a.data();
  const std::uint8_t* pb = b.data();
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const bool x = pa[i] != 0, y = pb[i] != 0;
    o.a += x;
    o.b += y;
    o.inter += x && y;
  }
  return o;
}

double mean_pair_distance(std::span<const Mask> s, std::span<const Mask> t, bool same_set, bool include_self) {
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (same_set && !include_self && i == j) continue;
      acc += iou_distance(s[i], t[j]);
      ++pairs;
    }
  return pairs == 0 ? 0.0 : acc / double(pairs);
}

Mask threshold_mean(std::span<const Mask> set, double gamma) {
  Eigen::ArrayXXd mean = Eigen::ArrayXXd::Zero(set[0].rows(), set[0].cols());
  for (const Mask& m : set) {
    require_same_shape(m, set[0], "soft_dice");
    mean += m.cast<double>();
  }
  mean /= double(set.size());
  Mask out(mean.rows(), mean.cols());
  for (Eigen::Index y = 0; y < mean.rows(); ++y)
    for (Eigen::Index x = 0; x < mean.cols(); ++x) out(y, x) = mean(y, x) > gamma ? 1 : 0;
  return out;
}

}  // namespace

std::size_t area(const Mask& m) {
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) n += m.data()[i] != 0;
  return n;
}

double iou_distance(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "iou_distance");
  const Overlap o = overlap(a, b);
  const std::size_t uni = o.a + o.b - o.inter;
  if (uni == 0) return 0.0;
  return 1.0 - double(o.inter) / double(uni);
}

double dice(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "dice");
  const Overlap o = overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * double(o.inter) / double(o.a + o.b);
}

GedReport ged(std::span<const Mask> preds, std::span<const Mask> gts, bool include_self_pairs) {
  if (preds.empty() || gts.empty()) throw ArgumentError("ged: prediction and annotation sets must be non-empty");
  GedReport r;
  r.d_pa = mean_pair_distance(gts, preds, false, true);
  r.d_pp = mean_pair_distance(preds, preds, true, include_self_pairs);
  r.d_aa = mean_pair_distance(gts, gts, true, include_self_pairs);
  r.ged = 2.0 * r.d_pa - r.d_pp - r.d_aa;
  return r;
}

double soft_dice(std::span<const Mask> preds, std::span<const Mask> gts) {
  if (preds.empty() || gts.empty()) throw ArgumentError("soft_dice: prediction and annotation sets must be non-empty");
  require_same_shape(preds[0], gts[0], "soft_dice");
  double acc = 0.0;
  for (double gamma : kSoftDiceThresholds) acc += dice(threshold_mean(gts, gamma), threshold_mean(preds, gamma));
  return acc / double(std::size(kSoftDiceThresholds));
}

DiceMatrix dice_matrix(std::span<const Mask> gts, std::span<const Mask> preds) {
  DiceMatrix m;
  m.values.resize(Eigen::Index(gts.size()), Eigen::Index(preds.size()));
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (std::size_t j = 0; j < preds.size(); ++j) m.values(Eigen::Index(i), Eigen::Index(j)) = dice(gts[i], preds[j]);
  return m;
}

double d_max(const DiceMatrix& m) {
  if (m.values.size() == 0) throw ArgumentError("d_max: empty Dice matrix");
  // Sequential row order, same as d_match, so d_match <= d_max holds exactly.
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.values.rows(); ++i) acc += m.values.row(i).maxCoeff();
  return acc / double(m.values.rows());
}

std::vector<std::size_t> max_weight_assignment(const Eigen::MatrixXd& w) {
  const std::size_t n = std::size_t(w.rows()), m = std::size_t(w.cols());
  if (n == 0) return {};
  if (m < n)
    throw ArgumentError("assignment needs at least as many columns (" + std::to_string(m) + ") as rows (" +
                        std::to_string(n) + ")");
  // Shortest augmenting path Hungarian algorithm on cost = -weight, 1-based
  // potentials u (rows) and v (columns); p[j] is the row matched to column j.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = -w(Eigen::Index(i0 - 1), Eigen::Index(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) minv[j] = cur, way[j] = j0;
        if (minv[j] < delta) delta = minv[j], j1 = j;
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  return assign;
}

double d_match(const DiceMatrix& m) {
  if (m.values.size() == 0) throw ArgumentError("d_match: empty Dice matrix");
  if (m.values.cols() < m.values.rows())
    throw ArgumentError("d_match: needs at least as many predictions (" + std::to_string(m.values.cols()) +
                        ") as annotations (" + std::to_string(m.values.rows()) + ")");
  const auto assign = max_weight_assignment(m.values);
  double acc = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i) acc += m.values(Eigen::Index(i), Eigen::Index(assign[i]));
  return acc / double(assign.size());
}

Eigen::MatrixXd expert_distance_matrix(const Dataset& d) {
  const std::size_t n = d.meta.raters;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(Eigen::Index(n), Eigen::Index(n));
  if (d.samples.empty()) return out;
  for (const Sample& s : d.samples) {
    if (s.masks.size() != n) throw DimensionError("expert_distance_matrix: sample mask count differs from N");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) out(Eigen::Index(i), Eigen::Index(j)) += iou_distance(s.masks[i], s.masks[j]);
  }
  out /= double(d.samples.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out(Eigen::Index(j), Eigen::Index(i)) = out(Eigen::Index(i), Eigen::Index(j));
  return out;
}

}  // namespace mrvi
