#pragma once

// Step size prescribed for Noisy-FedAvg and the minimum number of rounds for
// which the accompanying guarantee applies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace noisyfed {

/// eta = sqrt(r / K) / (gamma L E). For K >= 4r / gamma^2 this gives eta L E <= 1/2.
inline double learning_rate(double gamma, double smoothness, double local_steps, double r,
                            double rounds) {
  if (!(gamma > 4.0)) throw std::invalid_argument("learning_rate: gamma must exceed 4");
  if (!(smoothness > 0.0) || !(local_steps > 0.0) || !(r > 0.0) || !(rounds > 0.0))
    throw std::invalid_argument("learning_rate: L, E, r and K must be positive");
  return std::sqrt(r / rounds) / (gamma * smoothness * local_steps);
}

/// max(1024 r^3 / (9 gamma^2 (gamma^2 - 16)^2), 4 r / gamma^2)
inline double min_rounds(double r, double gamma) {
  if (!(gamma > 4.0)) throw std::invalid_argument("min_rounds: gamma must exceed 4");
  if (!(r >= 0.0)) throw std::invalid_argument("min_rounds: r must be non-negative");
  const double g2 = gamma * gamma;
  const double gap = g2 - 16.0;
  const double cubic = 1024.0 * r * r * r / (9.0 * g2 * gap * gap);
  const double linear = 4.0 * r / g2;
  return std::max(cubic, linear);
}

}  // namespace noisyfed
