#include "mrvi/special.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <string>

#include "mrvi/errors.hpp"

namespace mrvi::special {

namespace {

void require_positive(double x, const char* fn) {
  if (!(x > 0.0)) throw DomainError(std::string(fn) + " requires a positive argument, got " + std::to_string(x));
}

}  // namespace

double lgamma(double x) {
  require_positive(x, "lgamma");
  return std::lgamma(x);
}

double digamma(double x) {
  require_positive(x, "digamma");
  return boost::math::digamma(x);
}

double trigamma(double x) {
  require_positive(x, "trigamma");
  return boost::math::trigamma(x);
}

}  // namespace mrvi::special
