#include "mrvi/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mrvi {

double relative_error(double analytic, double numeric) {
  if (std::isnan(analytic) || std::isnan(numeric)) return std::numeric_limits<double>::infinity();
  return std::abs(analytic - numeric) / (1e-8 + std::abs(analytic) + std::abs(numeric));
}

double grad_check_values(const std::function<double(const Eigen::VectorXd&)>& value, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& analytic, double eps, std::span<const std::size_t> coords) {
  double worst = 0.0;
  Eigen::VectorXd probe = x;
  auto at = [&](Eigen::Index i, double v) {
    probe[i] = v;
    const double f = value(probe);
    probe[i] = x[i];
    return f;
  };
  auto check = [&](std::size_t i) {
    const auto idx = Eigen::Index(i);
    const double h = eps * (1.0 + std::abs(x[idx]));
    const double fp = at(idx, x[idx] + h);
    const double fm = at(idx, x[idx] - h);
    double err = relative_error(analytic[idx], (fp - fm) / (2.0 * h));
    if (err > 1e-6 && !std::isnan(err)) {
      const double f0 = value(probe);
      const double fwd = (-3.0 * f0 + 4.0 * fp - at(idx, x[idx] + 2.0 * h)) / (2.0 * h);
      const double bwd = (3.0 * f0 - 4.0 * fm + at(idx, x[idx] - 2.0 * h)) / (2.0 * h);
      err = std::min({err, relative_error(analytic[idx], fwd), relative_error(analytic[idx], bwd)});
    }
    if (std::isnan(err) || err > worst) worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < std::size_t(x.size()); ++i) check(i);
  } else {
    for (std::size_t i : coords) check(i);
  }
  return worst;
}

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  Graph g;
  Var input = g.parameter(x);
  Var out = f(g, input);
  g.backward(out);
  const Eigen::VectorXd analytic = g.adjoint(input).data();

  auto value = [&](const Eigen::VectorXd& probe) {
    Graph eval(false);
    Var v = eval.constant(Tensor(x.shape(), probe));
    return f(eval, v).value().item();
  };
  return grad_check_values(value, x.data(), analytic, eps);
}

}  // namespace mrvi
