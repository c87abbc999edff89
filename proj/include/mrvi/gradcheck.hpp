#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mrvi/diff.hpp"

namespace mrvi {

using ScalarFn = std::function<Var(Graph&, Var)>;

// Relative error used throughout: |a - n| / (1e-8 + |a| + |n|).
double relative_error(double analytic, double numeric);

// Compares the reverse-mode gradient of scalar f at x with central differences
// using step eps * (1 + |x_i|) per coordinate. Returns the worst relative
// error over coordinates; +inf if either estimate is NaN. A coordinate whose
// central difference straddles a kink (relu, clamp) is also compared against
// second-order one-sided differences and keeps the smallest of the errors.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

// Same comparison for an externally computed gradient. `value` evaluates the
// function at a perturbed copy of x; only `coords` are checked (all when empty).
double grad_check_values(const std::function<double(const Eigen::VectorXd&)>& value,
                         const Eigen::VectorXd& x, const Eigen::VectorXd& analytic, double eps,
                         std::span<const std::size_t> coords = {});

}  // namespace mrvi
