#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mrvi/metrics.hpp"
#include "test_util.hpp"

using namespace mrvi;

namespace {

Mask mask_from(std::initializer_list<std::initializer_list<int>> rows) {
  Mask m(Eigen::Index(rows.size()), Eigen::Index(rows.begin()->size()));
  Eigen::Index y = 0;
  for (const auto& r : rows) {
    Eigen::Index x = 0;
    for (int v : r) m(y, x++) = std::uint8_t(v);
    ++y;
  }
  return m;
}

// Straight pixel-count IoU distance used as an independent reference.
double ref_distance(const Mask& a, const Mask& b) {
  int inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    inter += a.data()[i] && b.data()[i];
    uni += a.data()[i] || b.data()[i];
  }
  return uni == 0 ? 0.0 : 1.0 - double(inter) / double(uni);
}

double brute_match(const Eigen::MatrixXd& w) {
  std::vector<int> cols(std::size_t(w.cols()));
  std::iota(cols.begin(), cols.end(), 0);
  double best = -1.0;
  // Every injection rows -> cols appears as a prefix of some permutation.
  do {
    double s = 0.0;
    for (Eigen::Index r = 0; r < w.rows(); ++r) s += w(r, cols[std::size_t(r)]);
    best = std::max(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best / double(w.rows());
}

// The 4 x 5 worked example: rows are annotations, columns predictions.
Eigen::MatrixXd figure_matrix() {
  Eigen::MatrixXd m(4, 5);
  m << 0.832, 0.512, 0.701, 0.655, 0.433,  //
      0.610, 0.842, 0.598, 0.720, 0.377,   //
      0.590, 0.630, 0.841, 0.861, 0.402,   //
      0.575, 0.690, 0.780, 0.863, 0.455;
  return m;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("iou distance") {
  const Mask a = mask_from({{1, 1, 0}, {0, 1, 0}});
  const Mask none = Mask::Zero(2, 3);
  CHECK(iou_distance(a, a) == 0.0);
  CHECK(iou_distance(a, mask_from({{0, 0, 1}, {1, 0, 1}})) == 1.0);
  CHECK(iou_distance(mask_from({{1, 0, 0}}), mask_from({{1, 1, 1}})) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(iou_distance(none, none) == 0.0);
  CHECK_THROWS_AS(iou_distance(a, Mask::Zero(3, 2)), DimensionError);
}

TEST_CASE("dice") {
  const Mask a = mask_from({{1, 1, 0, 0}});
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, mask_from({{0, 0, 1, 1}})) == 0.0);
  CHECK(dice(a, mask_from({{0, 1, 1, 0}})) == 0.5);
  CHECK(dice(Mask::Zero(1, 4), Mask::Zero(1, 4)) == 1.0);
}

TEST_CASE("ged worked cases") {
  const Mask a = mask_from({{1, 1}, {0, 0}});
  const std::vector<Mask> one{a}, two{a, a};
  CHECK(ged(one, one).ged == 0.0);
  CHECK(ged(two, one).ged == 0.0);
  CHECK_THROWS_AS(ged(std::vector<Mask>{}, one), ArgumentError);

  const std::vector<Mask> p{mask_from({{1, 1}, {0, 0}}), mask_from({{1, 0}, {1, 0}})};
  const std::vector<Mask> g{mask_from({{1, 1}, {1, 0}}), mask_from({{0, 0}, {0, 1}})};
  double pa = 0, pp = 0, aa = 0;
  for (const auto& x : p)
    for (const auto& y : g) pa += ref_distance(x, y);
  for (const auto& x : p)
    for (const auto& y : p) pp += ref_distance(x, y);
  for (const auto& x : g)
    for (const auto& y : g) aa += ref_distance(x, y);
  const GedReport r = ged(p, g);
  CHECK(r.d_pa == doctest::Approx(pa / 4).epsilon(1e-15));
  CHECK(r.d_pp == doctest::Approx(pp / 4).epsilon(1e-15));
  CHECK(r.d_aa == doctest::Approx(aa / 4).epsilon(1e-15));
  CHECK(r.ged == doctest::Approx(2 * pa / 4 - pp / 4 - aa / 4).epsilon(1e-15));

  const GedReport ex = ged(p, g, false);
  CHECK(ex.d_pp == doctest::Approx(pp / 2).epsilon(1e-15));
  CHECK(ex.d_pa == doctest::Approx(pa / 4).epsilon(1e-15));
}

TEST_CASE("ged properties on random sets") {
  RngStream s(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t np = 1 + s.below(5), ng = 1 + s.below(5);
    std::vector<Mask> p, g;
    for (std::size_t i = 0; i < np; ++i) p.push_back(random_mask(4, 5, s, s.uniform()));
    for (std::size_t i = 0; i < ng; ++i) g.push_back(random_mask(4, 5, s, s.uniform()));
    const GedReport r = ged(p, g);
    CHECK(std::abs(r.ged - (2 * r.d_pa - r.d_pp - r.d_aa)) < 1e-12);
    CHECK(r.ged >= -2.0);
    CHECK(r.ged <= 2.0);
    CHECK(std::abs(ged(g, g).ged) < 1e-12);
  }
}

TEST_CASE("soft dice") {
  const std::vector<Mask> g{mask_from({{1, 1, 0}, {0, 1, 0}, {0, 0, 0}}), mask_from({{1, 0, 0}, {0, 1, 1}, {0, 0, 0}})};
  CHECK(soft_dice(g, g) == 1.0);
  const std::vector<Mask> zeros{Mask::Zero(3, 3)}, ones{Mask::Ones(3, 3)};
  CHECK(soft_dice(zeros, ones) == 0.0);

  // Hand case. gt mean: (0,0)=1, (0,1)=.5, (1,1)=1, (1,2)=.5, rest 0.
  // pred mean: (0,0)=.5, (1,1)=1, (2,2)=.5, rest 0.
  const std::vector<Mask> p{mask_from({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}), mask_from({{0, 0, 0}, {0, 1, 0}, {0, 0, 0}})};
  // gamma 0.1, 0.3: gt {00,01,11,12} (4), pred {00,11,22} (3), overlap 2 -> 4/7
  // gamma 0.5, 0.7, 0.9: gt {00,11} (2), pred {11} (1), overlap 1 -> 2/3
  const double expect = (2 * (4.0 / 7.0) + 3 * (2.0 / 3.0)) / 5.0;
  CHECK(soft_dice(p, g) == doctest::Approx(expect).epsilon(1e-15));

  std::vector<Mask> p2 = p, g2 = g;
  p2.insert(p2.end(), p.begin(), p.end());
  g2.insert(g2.end(), g.begin(), g.end());
  CHECK(soft_dice(p2, g2) == soft_dice(p, g));
  CHECK_THROWS_AS(soft_dice(std::vector<Mask>{}, g), ArgumentError);
}

TEST_CASE("dice matrix") {
  const std::vector<Mask> g{mask_from({{1, 1, 0, 0}}), mask_from({{0, 1, 1, 0}})};
  const std::vector<Mask> p{mask_from({{1, 1, 0, 0}}), mask_from({{0, 0, 0, 1}}), mask_from({{1, 1, 1, 0}})};
  const DiceMatrix m = dice_matrix(g, p);
  REQUIRE(m.values.rows() == 2);
  REQUIRE(m.values.cols() == 3);
  Eigen::MatrixXd hand(2, 3);
  hand << 1.0, 0.0, 0.8,  //
      0.5, 0.0, 0.8;
  CHECK((m.values - hand).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(dice_matrix(g, g).values.diagonal() == Eigen::Vector2d::Ones());
  CHECK(dice_matrix(std::span(g).first(1), std::span(p).first(1)).values(0, 0) == dice(g[0], p[0]));
}

TEST_CASE("worked 4x5 example") {
  const DiceMatrix m{figure_matrix()};
  CHECK(std::abs(d_max(m) - 0.8495) < 1e-12);
  CHECK(std::abs(d_match(m) - 0.8445) < 1e-12);
  const auto assign = max_weight_assignment(m.values);
  CHECK(assign == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("d_max and d_match on simple matrices") {
  CHECK(d_max(DiceMatrix{Eigen::MatrixXd::Identity(3, 3)}) == 1.0);
  Eigen::MatrixXd dom(3, 3);
  dom << 0.9, 0.2, 0.1, 0.3, 0.8, 0.2, 0.1, 0.4, 0.7;
  CHECK(max_weight_assignment(dom) == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(d_match(DiceMatrix{Eigen::MatrixXd::Ones(3, 2)}), ArgumentError);
}

TEST_CASE("hungarian equals exhaustive search and bounds d_max") {
  RngStream s(2);
  for (int t = 0; t < 1000; ++t) {
    const Eigen::Index rows = 1 + Eigen::Index(s.below(5));
    const Eigen::Index cols = rows + Eigen::Index(s.below(3));
    Eigen::MatrixXd w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = s.uniform();
    const DiceMatrix m{w};
    CHECK(d_match(m) <= d_max(m));
    CHECK(std::abs(d_match(m) - brute_match(w)) < 1e-12);
    const auto assign = max_weight_assignment(w);
    std::vector<std::size_t> sorted = assign;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  }
}

TEST_CASE("expert distance matrix") {
  Dataset d;
  d.meta.raters = 3;
  const Mask a = mask_from({{1, 1, 0}}), b = mask_from({{0, 1, 1}}), c = mask_from({{1, 0, 0}});
  Sample s1;
  s1.masks = {a, b, c};
  Sample s2;
  s2.masks = {a, a, b};
  d.samples = {s1, s2};
  d.meta.sample_count = 2;
  const Eigen::MatrixXd m = expert_distance_matrix(d);
  // s1: d(a,b)=2/3, d(a,c)=1/2, d(b,c)=1; s2: d(a,a)=0, d(a,b)=2/3, d(a,b)=2/3
  CHECK(m(0, 1) == doctest::Approx((2.0 / 3.0 + 0.0) / 2.0).epsilon(1e-15));
  CHECK(m(0, 2) == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
  CHECK(m(1, 2) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
  CHECK(m == m.transpose());
  CHECK(m.diagonal().isZero(0.0));

  Sample same;
  same.masks = {a, a, a};
  d.samples = {same, same};
  CHECK(expert_distance_matrix(d).isZero(0.0));
}

}  // TEST_SUITE
