#pragma once

// Additive Gaussian channel noise and the per-round variance schedules that
// implement SNR control.
//
// A schedule gives the per-coordinate variance of the noise on one link in
// round k. Decay is applied to the variance and evaluated at (k + 1), so
// round 0 carries the base variance:
//
//   off         0
//   constant    v^2
//   poly_decay  v^2 / (k + 1)^p            (further divided by E^2 if e_squared_scaling)
//
// The expected squared norm of a d-dimensional draw is d times that value.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "noisyfed/param_vector.hpp"
#include "noisyfed/rng.hpp"

namespace noisyfed {

enum class Direction { uplink, downlink };
enum class ScheduleKind { off, constant, poly_decay };

struct NoiseSchedule {
  Direction direction = Direction::uplink;
  ScheduleKind kind = ScheduleKind::off;
  double base_std = 0.0;
  double decay_exponent = 0.0;
  bool e_squared_scaling = false;

  static NoiseSchedule off(Direction dir) { return {dir, ScheduleKind::off, 0.0, 0.0, false}; }
  static NoiseSchedule constant(Direction dir, double base_std) {
    return {dir, ScheduleKind::constant, base_std, 0.0, false};
  }
  static NoiseSchedule poly_decay(Direction dir, double base_std, double exponent,
                                  bool e_squared = false) {
    return {dir, ScheduleKind::poly_decay, base_std, exponent, e_squared};
  }

  void validate() const {
    if (kind == ScheduleKind::off) return;
    if (!(base_std > 0.0) || !std::isfinite(base_std))
      throw std::invalid_argument("noise schedule: base_std must be positive and finite");
    if (!(decay_exponent >= 0.0) || !std::isfinite(decay_exponent))
      throw std::invalid_argument("noise schedule: decay_exponent must be >= 0");
    if (kind == ScheduleKind::constant && e_squared_scaling)
      throw std::invalid_argument("noise schedule: e_squared_scaling needs kind poly_decay");
  }

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

class UndefinedSnrError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class InfiniteBudgetError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Per-coordinate noise variance in round k for a run with E local steps.
inline double variance_at(const NoiseSchedule& s, std::size_t k, std::size_t local_steps) {
  if (local_steps < 1) throw std::invalid_argument("variance_at: E must be >= 1");
  const double v2 = s.base_std * s.base_std;
  switch (s.kind) {
    case ScheduleKind::off:
      return 0.0;
    case ScheduleKind::constant:
      return v2;
    case ScheduleKind::poly_decay: {
      double v = v2 / std::pow(static_cast<double>(k) + 1.0, s.decay_exponent);
      if (s.e_squared_scaling) {
        const double e = static_cast<double>(local_steps);
        v /= e * e;
      }
      return v;
    }
  }
  return 0.0;
}

/// vector + g, g_i ~ N(0, variance) independently.
inline ParamVector perturb(const ParamVector& vector, double variance, RngStream& rng) {
  if (!(variance >= 0.0)) throw std::invalid_argument("perturb: negative variance");
  if (variance == 0.0) return vector;
  const double sd = std::sqrt(variance);
  ParamVector out = vector;
  for (double& v : out) v += sd * rng.normal();
  return out;
}

/// One noise realisation on a link, tagged with where it was drawn.
struct ChannelDraw {
  ParamVector noise;
  double variance = 0.0;
  std::size_t round = 0;
  std::size_t client = 0;
};

inline ChannelDraw draw_noise(std::size_t dim, double variance, std::size_t round,
                              std::size_t client, RngStream& rng) {
  return {perturb(ParamVector(dim), variance, rng), variance, round, client};
}

inline double measured_snr(double signal_power, double noise_power) {
  if (!(noise_power > 0.0)) throw UndefinedSnrError("SNR undefined: noise power must be > 0");
  return signal_power / noise_power;
}

/// Sum over rounds of v^2 / variance_at(k): the cumulative transmit-power boost
/// needed to realise the schedule by amplifying the signal.
inline double power_budget(const NoiseSchedule& s, std::size_t rounds, std::size_t local_steps) {
  if (rounds < 1) throw std::invalid_argument("power_budget: K must be >= 1");
  const double v2 = s.base_std * s.base_std;
  double total = 0.0;
  for (std::size_t k = 0; k < rounds; ++k) {
    const double var = variance_at(s, k, local_steps);
    if (!(var > 0.0))
      throw InfiniteBudgetError("power budget infinite: zero noise variance in round " +
                                std::to_string(k));
    total += v2 / var;
  }
  return total;
}

struct PolicyComparison {
  std::size_t rounds = 0;
  std::size_t local_steps = 0;
  double ours_uplink = 0.0;
  double ours_downlink = 0.0;
  double prior_uplink = 0.0;
  double prior_downlink = 0.0;
  double uplink_ratio = 0.0;    // ours / prior
  double downlink_ratio = 0.0;  // ours / prior
  double total_ratio = 0.0;     // (ours up + down) / (prior up + down)
};

/// Asymmetric policy (downlink 1/(E^2 (k+1)), uplink 1/sqrt(k+1)) against the
/// symmetric 1/(k+1) policy on both links.
inline PolicyComparison compare_policies(std::size_t rounds, std::size_t local_steps) {
  constexpr double unit = 1.0;
  const auto ours_up = NoiseSchedule::poly_decay(Direction::uplink, unit, 0.5);
  const auto ours_down = NoiseSchedule::poly_decay(Direction::downlink, unit, 1.0, true);
  const auto prior_up = NoiseSchedule::poly_decay(Direction::uplink, unit, 1.0);
  const auto prior_down = NoiseSchedule::poly_decay(Direction::downlink, unit, 1.0);
  PolicyComparison c;
  c.rounds = rounds;
  c.local_steps = local_steps;
  c.ours_uplink = power_budget(ours_up, rounds, local_steps);
  c.ours_downlink = power_budget(ours_down, rounds, local_steps);
  c.prior_uplink = power_budget(prior_up, rounds, local_steps);
  c.prior_downlink = power_budget(prior_down, rounds, local_steps);
  c.uplink_ratio = c.ours_uplink / c.prior_uplink;
  c.downlink_ratio = c.ours_downlink / c.prior_downlink;
  c.total_ratio = (c.ours_uplink + c.ours_downlink) / (c.prior_uplink + c.prior_downlink);
  return c;
}

}  // namespace noisyfed
