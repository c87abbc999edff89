#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mrvi/datasynth.hpp"
#include "mrvi/tensor.hpp"

namespace mrvi {

// 1 - |a & b| / |a | b|; 0 when both masks are empty.
double iou_distance(const Mask& a, const Mask& b);
// 2|a & b| / (|a| + |b|); 1 when both masks are empty.
double dice(const Mask& a, const Mask& b);

struct GedReport {
  double ged = 0.0;
  double d_pp = 0.0;
  double d_pa = 0.0;
  double d_aa = 0.0;
};

// Pair means over the full |S|^2 grids (self-pairs included) by default;
// include_self_pairs = false averages over i != j instead (a singleton set
// then contributes 0).
GedReport ged(std::span<const Mask> preds, std::span<const Mask> gts, bool include_self_pairs = true);

inline constexpr double kSoftDiceThresholds[] = {0.1, 0.3, 0.5, 0.7, 0.9};

double soft_dice(std::span<const Mask> preds, std::span<const Mask> gts);

// Rows are ground-truth annotations, columns are predictions.
struct DiceMatrix {
  Eigen::MatrixXd values;
};

DiceMatrix dice_matrix(std::span<const Mask> gts, std::span<const Mask> preds);
// Mean over rows of the row maximum.
double d_max(const DiceMatrix& m);
// Mean Dice of the maximum-weight injective row -> column assignment.
double d_match(const DiceMatrix& m);

// Column assigned to each row by a maximum-weight injective assignment
// (Hungarian algorithm). Requires cols >= rows.
std::vector<std::size_t> max_weight_assignment(const Eigen::MatrixXd& weights);

// Mean over samples of iou_distance between rater masks; symmetric, zero diagonal.
Eigen::MatrixXd expert_distance_matrix(const Dataset& d);

std::size_t area(const Mask& m);

}  // namespace mrvi
