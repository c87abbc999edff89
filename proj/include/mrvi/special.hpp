#pragma once

namespace mrvi::special {

// ln Gamma(x) for x > 0.
double lgamma(double x);
// psi(x) = d/dx ln Gamma(x) for x > 0.
double digamma(double x);
// psi'(x) for x > 0.
double trigamma(double x);

}  // namespace mrvi::special
