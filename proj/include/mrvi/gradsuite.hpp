#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mrvi {

struct GradSuiteOptions {
  std::size_t trials = 20;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  // Name of an op whose adjoint is deliberately scaled, to exercise failure reporting.
  std::string corrupt_op;
};

struct GradSuiteEntry {
  std::string op;
  double worst_error = 0.0;  // max relative error over trials and coordinates
  bool passed = false;
};

// Every differentiable operation covered by the suite, in report order.
std::vector<std::string> grad_suite_ops();

std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& opts);

}  // namespace mrvi
