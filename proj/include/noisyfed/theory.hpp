#pragma once

// Closed-form constants and convergence bounds for Noisy-SGD and Noisy-FedAvg.
//
// Noise inputs are TOTAL expected squared norms summed over rounds, i.e.
// sum_k E||e_k||^2 and sum_k E||nu_k||^2 (d times the per-coordinate variance
// for spherical noise).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "noisyfed/core_model.hpp"
#include "noisyfed/data_synth.hpp"
#include "noisyfed/rng.hpp"
#include "noisyfed/step_size.hpp"

namespace noisyfed {

/// (n - r) / (r (n - 1)): the variance factor of sampling r of n clients
/// without replacement. Zero under full participation.
inline double participation_factor(double n, double r) {
  if (r == n) return 0.0;
  return (n - r) / (r * (n - 1.0));
}

namespace detail {

inline void check_zeta_args(double eta, double smoothness, double local_steps, double n,
                            double r) {
  if (n < 2.0) throw std::invalid_argument("zeta: need n >= 2");
  if (r < 1.0 || r > n) throw std::invalid_argument("zeta: need 1 <= r <= n");
  if (!(eta >= 0.0) || !(smoothness >= 0.0) || !(local_steps >= 1.0))
    throw std::invalid_argument("zeta: eta, L must be >= 0 and E >= 1");
}

}  // namespace detail

/// Growth factor of the per-round recursion; sets the k* sampling weights.
inline double zeta(double eta, double smoothness, double local_steps, double n, double r) {
  detail::check_zeta_args(eta, smoothness, local_steps, n, r);
  const double a = eta * smoothness * local_steps;
  return 8.0 * a * a * (participation_factor(n, r) + 2.0 * a / 3.0);
}

/// Coefficient of the stochastic-gradient variance.
inline double zeta2(double eta, double smoothness, double local_steps, double n, double r) {
  detail::check_zeta_args(eta, smoothness, local_steps, n, r);
  const double a = eta * smoothness * local_steps;
  return (a / n) * (1.0 + 2.0 * n * local_steps / 3.0 + n) + 1.0 / r + participation_factor(n, r);
}

/// Coefficient of the downlink noise.
inline double zeta3(double eta, double smoothness, double local_steps, double n, double r) {
  detail::check_zeta_args(eta, smoothness, local_steps, n, r);
  const double b = eta * smoothness;
  const double a = b * local_steps;
  const double inner = 1.0 + 3.0 * b * b +
                       2.0 * a * (2.0 + 3.0 * b * b) * (2.0 * a / 3.0 + participation_factor(n, r));
  return 1.0 + 2.0 * b + 4.0 * local_steps * inner;
}

struct TheoryParams {
  double n = 50;
  double r = 10;
  double local_steps = 5;  // E
  double rounds = 100;     // K
  double gamma = 18;
  double smoothness = 1;   // L
  double eta = 0;
  double sigma2 = 0;       // stochastic-gradient variance bound
  double f0 = 0;           // f(w_0)
  double sum_uplink = 0;   // sum_k U_k^2
  double sum_downlink = 0; // sum_k N_k^2

  void validate() const {
    const double fields[] = {n, r, local_steps, rounds, gamma, smoothness,
                             eta, sigma2, f0, sum_uplink, sum_downlink};
    for (double v : fields)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw std::invalid_argument("theory params: every field must be finite and >= 0");
    if (!(gamma > 4.0)) throw std::invalid_argument("theory params: gamma must exceed 4");
    if (n < 2.0) throw std::invalid_argument("theory params: need n >= 2");
    if (r < 1.0 || r > n) throw std::invalid_argument("theory params: need 1 <= r <= n");
    if (local_steps < 1.0 || rounds < 1.0)
      throw std::invalid_argument("theory params: need E >= 1 and K >= 1");
    if (!(smoothness > 0.0)) throw std::invalid_argument("theory params: L must be positive");
  }
};

struct BoundReport {
  double leading = 0;
  double term_uplink = 0;
  double term_sgd_variance = 0;
  double term_downlink = 0;
  double total = 0;
  double zeta = 0;
  double zeta2 = 0;
  double zeta3 = 0;
  double min_rounds = 0;
  std::vector<std::string> warnings;
};

/// Bound on E||grad f(w_{k*})||^2 for Noisy-FedAvg with the prescribed step size.
/// The four terms are transcribed in terms of gamma; zeta values in the report
/// use p.eta.
inline BoundReport theorem2_bound(const TheoryParams& p) {
  p.validate();
  const double n = p.n, r = p.r, E = p.local_steps, K = p.rounds, g = p.gamma, L = p.smoothness;
  const double rk = std::sqrt(r / K);
  const double root_rk = std::sqrt(r * K);
  const double pf = participation_factor(n, r);

  BoundReport b;
  b.leading = 8.0 * g * L * p.f0 / root_rk;
  b.term_uplink = 4.0 / (g * E * E * K * root_rk) * p.sum_uplink;
  b.term_sgd_variance =
      4.0 / (g * E) * rk * (1.0 / (g * n) * rk * (1.0 + 2.0 * n * E / 3.0 + n) + 1.0 / r + pf) *
      p.sigma2;
  const double braces =
      3.0 / (g * E * E) * rk +
      2.0 * (2.0 + 3.0 / (g * g * E * E) * (r / K)) * (2.0 / (3.0 * g) * rk + pf);
  b.term_downlink =
      4.0 * L * L / (E * K) * (1.0 + 4.0 * E + 2.0 / (g * E) * rk * (1.0 + 2.0 * E * E * braces)) *
      p.sum_downlink;
  b.total = b.leading + b.term_uplink + b.term_sgd_variance + b.term_downlink;

  b.zeta = zeta(p.eta, L, E, n, r);
  b.zeta2 = zeta2(p.eta, L, E, n, r);
  b.zeta3 = zeta3(p.eta, L, E, n, r);
  b.min_rounds = min_rounds(r, g);
  if (K < b.min_rounds)
    b.warnings.push_back("K = " + std::to_string(K) + " is below the minimum " +
                         std::to_string(b.min_rounds) + " required by the bound");
  const double prescribed = learning_rate(g, L, E, r, K);
  if (std::abs(p.eta - prescribed) > 1e-9 * prescribed)
    b.warnings.push_back("eta = " + std::to_string(p.eta) + " differs from the prescribed " +
                         std::to_string(prescribed) + "; the bound's constants assume it");
  return b;
}

/// Average-iterate bound for Noisy-SGD with constant step eta <= 1/L:
///   2 (f0 - f*) / (T eta) + eta L sigma^2 + (L^2 / T) sum N^2 + (eta L / T) sum U^2
inline BoundReport theorem1_bound(double eta, double smoothness, double iterations, double f0,
                                  double f_star, double sigma2, double sum_uplink,
                                  double sum_downlink) {
  if (!(eta > 0.0)) throw std::invalid_argument("theorem1_bound: eta must be positive");
  if (!(iterations > 0.0)) throw std::invalid_argument("theorem1_bound: T must be positive");
  if (!(smoothness >= 0.0) || !(sigma2 >= 0.0) || !(sum_uplink >= 0.0) || !(sum_downlink >= 0.0))
    throw std::invalid_argument("theorem1_bound: L, sigma^2 and noise sums must be >= 0");
  if (!(f0 >= f_star)) throw std::invalid_argument("theorem1_bound: need f0 >= f*");
  BoundReport b;
  b.leading = 2.0 * (f0 - f_star) / (iterations * eta);
  b.term_sgd_variance = eta * smoothness * sigma2;
  b.term_downlink = smoothness * smoothness / iterations * sum_downlink;
  b.term_uplink = eta * smoothness / iterations * sum_uplink;
  b.total = b.leading + b.term_uplink + b.term_sgd_variance + b.term_downlink;
  if (eta * smoothness > 1.0)
    b.warnings.push_back("eta exceeds 1/L; the bound's hypothesis does not hold");
  return b;
}

struct OrderCoefficients {
  double sgd = 0;       // (1/E) sqrt(r/K)
  double uplink = 0;    // 1 / (E^2 sqrt(r K))
  double downlink = 0;  // 1
};

inline OrderCoefficients corollary2_orders(double local_steps, double r, double rounds) {
  if (!(local_steps > 0.0) || !(r > 0.0) || !(rounds > 0.0))
    throw std::invalid_argument("corollary2_orders: E, r, K must be positive");
  return {std::sqrt(r / rounds) / local_steps,
          1.0 / (local_steps * local_steps * std::sqrt(r * rounds)), 1.0};
}

/// ||grad f_n(w) - grad f(w)||^2 for the quadratic family f_i = w^2/2 (i < n),
/// f_n = w^2, which equals w^2 (1 - 1/n)^2.
inline double bcd_gap(double w, std::size_t n) {
  if (n < 1) throw std::invalid_argument("bcd_gap: need n >= 1");
  const double c = 1.0 - 1.0 / static_cast<double>(n);
  return w * w * c * c;
}

/// A point where bcd_gap exceeds G^2: w = 2G / (1 - 1/n).
inline double bcd_witness(double bound_g, std::size_t n) {
  if (n < 2) throw std::invalid_argument("bcd_witness: the gap is identically 0 for n = 1");
  if (!(bound_g > 0.0)) throw std::invalid_argument("bcd_witness: G must be positive");
  return 2.0 * bound_g / (1.0 - 1.0 / static_cast<double>(n));
}

/// Monte-Carlo estimate of max_{i, probe} E||grad~ f_i(w; B) - grad f_i(w)||^2,
/// inflated by 1.5.
inline double empirical_sigma2(const LossModel& model, const ClientPartition& partition,
                               const Dataset& data, std::span<const ParamVector> probes,
                               std::size_t batch_size, std::size_t trials, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("empirical_sigma2: need trials >= 1");
  if (probes.empty()) throw std::invalid_argument("empirical_sigma2: need at least one probe");
  double worst = 0.0;
  for (std::size_t i = 0; i < partition.num_clients(); ++i) {
    std::vector<std::size_t> shard = partition.shards[i];
    std::sort(shard.begin(), shard.end());
    for (std::size_t p = 0; p < probes.size(); ++p) {
      const ParamVector exact = gradient(model, probes[p], data, shard);
      RngStream rng = derive_stream(seed, p, i, StreamPurpose::probe);
      double acc = 0.0;
      for (std::size_t t = 0; t < trials; ++t) {
        auto batch = sample_batch(shard, batch_size, rng);
        std::sort(batch.begin(), batch.end());
        acc += (gradient(model, probes[p], data, batch) - exact).squared_norm();
      }
      worst = std::max(worst, acc / static_cast<double>(trials));
    }
  }
  return 1.5 * worst;
}

}  // namespace noisyfed
