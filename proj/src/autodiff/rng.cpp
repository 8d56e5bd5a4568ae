#include "fedoap/rng.hpp"

#include <cmath>
#include <numbers>

#include "fedoap/error.hpp"

namespace fedoap {

double Rng::gaussian(double mean, double variance) {
  require(variance >= 0.0, ErrorCode::NegativeVariance, "gaussian variance " + std::to_string(variance));
  const double u1 = uniform_open0();
  const double u2 = uniform_open0();
  if (variance == 0.0) return mean;
  return mean + std::sqrt(variance) * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace fedoap
