#pragma once

// Noisy-FedAvg and Noisy-SGD training loops.
//
// Round k of Noisy-FedAvg:
//   S_k          r of n clients, uniformly without replacement
//   w_{k,0}^(i)  = w_k + nu          (downlink noise)
//   w_{k,E}^(i)  after E local mini-batch SGD steps with step eta
//   message      = w_{k,0} - w_{k,E} + s e   (uplink noise, s = eta or 1)
//   w_{k+1}      = w_k - (1/r) sum_i message_i
//
// Row k of the metrics describes w_k, the model entering round k:
//   train_loss    mean over participants of f(w_k + nu_i), the global
//                 objective at the model each client actually received
//                 (equals f(w_k) when the downlink is off)
//   server_loss   f(w_k)
//   grad_norm_sq  ||grad f(w_k)||^2 over all n shards

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "noisyfed/channel.hpp"
#include "noisyfed/core_model.hpp"
#include "noisyfed/data_synth.hpp"
#include "noisyfed/param_vector.hpp"
#include "noisyfed/rng.hpp"
#include "noisyfed/step_size.hpp"
#include "noisyfed/theory.hpp"

namespace noisyfed {

/// How the uplink noise enters the aggregate. `learning_rate` multiplies e by
/// the step size, as in the update analysed by the convergence bound; `none`
/// adds e to the message unscaled.
enum class UplinkNoiseScaling { learning_rate, none };

inline constexpr double kDivergenceNorm = 1e12;

struct FedAvgConfig {
  std::size_t n = 50;
  std::size_t r = 10;
  std::size_t local_steps = 5;  // E
  std::size_t rounds = 100;     // K
  double gamma = 18.0;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::optional<double> learning_rate_override;
  NoiseSchedule uplink = NoiseSchedule::off(Direction::uplink);
  NoiseSchedule downlink = NoiseSchedule::off(Direction::downlink);
  UplinkNoiseScaling uplink_noise_scaling = UplinkNoiseScaling::learning_rate;
  std::size_t threads = 1;  // clients simulated concurrently within a round
  std::optional<ParamVector> initial_params;  // zeros when absent

  void validate() const {
    if (n < 1) throw std::invalid_argument("fedavg config: n must be >= 1");
    if (r < 1 || r > n) throw std::invalid_argument("fedavg config: need 1 <= r <= n");
    if (local_steps < 1) throw std::invalid_argument("fedavg config: E must be >= 1");
    if (rounds < 1) throw std::invalid_argument("fedavg config: K must be >= 1");
    if (!(gamma > 4.0)) throw std::invalid_argument("fedavg config: gamma must exceed 4");
    if (batch_size < 1) throw std::invalid_argument("fedavg config: batch_size must be >= 1");
    if (threads < 1) throw std::invalid_argument("fedavg config: threads must be >= 1");
    if (learning_rate_override &&
        (!(*learning_rate_override > 0.0) || !std::isfinite(*learning_rate_override)))
      throw std::invalid_argument("fedavg config: learning_rate_override must be positive");
    if (uplink.direction != Direction::uplink || downlink.direction != Direction::downlink)
      throw std::invalid_argument("fedavg config: schedule directions swapped");
    uplink.validate();
    downlink.validate();
  }
};

struct RoundMetrics {
  std::size_t round = 0;
  double train_loss = 0.0;
  double server_loss = 0.0;
  double grad_norm_sq = 0.0;
  double uplink_variance = 0.0;
  double downlink_variance = 0.0;
  std::optional<double> mean_snr_up;
  std::optional<double> mean_snr_down;
  bool diverged = false;

  /// Placeholder row written when the iterate blows up.
  static RoundMetrics sentinel(std::size_t k, double up_var, double down_var) {
    RoundMetrics m;
    m.round = k;
    m.train_loss = -1.0;
    m.server_loss = -1.0;
    m.grad_norm_sq = -1.0;
    m.uplink_variance = up_var;
    m.downlink_variance = down_var;
    m.diverged = true;
    return m;
  }
};

struct RunResult {
  std::vector<RoundMetrics> metrics;
  ParamVector final_params;
  std::size_t k_star = 0;
  std::optional<std::size_t> diverged_at;  // empty on completion
  double learning_rate = 0.0;
  double zeta = 0.0;
  std::vector<std::string> warnings;

  [[nodiscard]] bool completed() const noexcept { return !diverged_at.has_value(); }
};

// ---------------------------------------------------------------------------
// k* sampling

/// P(k) proportional to (1 + zeta)^(K-1-k); computed as exp(-k log1p(zeta))
/// so the largest weight is 1.
inline std::vector<double> kstar_distribution(double zeta_value, std::size_t rounds) {
  if (!(zeta_value >= 0.0)) throw std::invalid_argument("kstar_distribution: zeta must be >= 0");
  if (rounds < 1) throw std::invalid_argument("kstar_distribution: K must be >= 1");
  const double lg = std::log1p(zeta_value);
  std::vector<double> w(rounds);
  double total = 0.0;
  for (std::size_t k = 0; k < rounds; ++k) {
    w[k] = std::exp(-static_cast<double>(k) * lg);
    total += w[k];
  }
  for (double& v : w) v /= total;
  return w;
}

inline std::size_t sample_kstar(double zeta_value, std::size_t rounds, RngStream& rng) {
  const auto p = kstar_distribution(zeta_value, rounds);
  const double u = rng.uniform01();
  double acc = 0.0;
  for (std::size_t k = 0; k < rounds; ++k) {
    acc += p[k];
    if (u < acc) return k;
  }
  return rounds - 1;
}

// ---------------------------------------------------------------------------
// building blocks

/// r distinct ids from [0, n), returned in increasing order.
inline std::vector<std::size_t> client_sample(std::size_t n, std::size_t r, RngStream& rng) {
  if (r < 1 || r > n) throw std::invalid_argument("client_sample: need 1 <= r <= n");
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  for (std::size_t i = 0; i < r; ++i) std::swap(ids[i], ids[i + rng.uniform_index(n - i)]);
  ids.resize(r);
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct LocalResult {
  ParamVector params;  // w_{k,E}
  ParamVector drift;   // w_{k,E} - w_{k,0}, accumulated step by step
};

/// E mini-batch SGD steps from w_start, a fresh batch per step. Each batch is
/// evaluated in increasing index order.
inline LocalResult run_local_steps(const LossModel& model, const Dataset& data,
                               std::span<const std::size_t> shard, ParamVector w_start,
                               double eta, std::size_t local_steps, std::size_t batch_size,
                               RngStream& rng) {
  if (local_steps < 1) throw std::invalid_argument("local_update: E must be >= 1");
  if (!(eta > 0.0)) throw std::invalid_argument("local_update: eta must be positive");
  LocalResult out{std::move(w_start), ParamVector()};
  out.drift = ParamVector(out.params.size());
  for (std::size_t t = 0; t < local_steps; ++t) {
    auto batch = sample_batch(shard, batch_size, rng);
    std::sort(batch.begin(), batch.end());
    const ParamVector g = gradient(model, out.params, data, batch);
    out.params.add_scaled(g, -eta);
    out.drift.add_scaled(g, -eta);
  }
  return out;
}

inline ParamVector local_update(const LossModel& model, const Dataset& data,
                                std::span<const std::size_t> shard, ParamVector w_start,
                                double eta, std::size_t local_steps_count, std::size_t batch_size,
                                RngStream& rng) {
  return run_local_steps(model, data, shard, std::move(w_start), eta, local_steps_count, batch_size,
                         rng)
      .params;
}

namespace detail {

inline bool is_diverged(double loss_value, const ParamVector& w) {
  return !std::isfinite(loss_value) || !w.all_finite() || w.norm() > kDivergenceNorm;
}

/// zeta for the sampling distribution; n = 1 (full participation) has no
/// sampling term.
inline double kstar_zeta(double eta, double smoothness, std::size_t E, std::size_t n,
                         std::size_t r) {
  if (n >= 2) return zeta(eta, smoothness, static_cast<double>(E), static_cast<double>(n),
                          static_cast<double>(r));
  const double a = eta * smoothness * static_cast<double>(E);
  return 8.0 * a * a * (2.0 * a / 3.0);
}

/// Runs fn(slot) for slot in [0, count) on up to `threads` workers and rethrows
/// the first failure (lowest slot).
template <class Fn>
void for_each_slot(std::size_t count, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t s = 0; s < count; ++s) fn(s);
    return;
  }
  const std::size_t workers = std::min(threads, count);
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t s = w; s < count; s += workers) {
        try {
          fn(s);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Noisy-FedAvg

inline RunResult run_noisy_fedavg(const FedAvgConfig& config, const LossModel& model,
                                  const ClientPartition& partition, const Dataset& data) {
  config.validate();
  if (partition.num_clients() != config.n)
    throw std::invalid_argument("run_noisy_fedavg: partition has " +
                                std::to_string(partition.num_clients()) + " shards, config n = " +
                                std::to_string(config.n));
  for (const auto& shard : partition.shards)
    if (shard.size() < config.batch_size)
      throw std::invalid_argument("run_noisy_fedavg: a shard is smaller than batch_size");
  if (config.initial_params && config.initial_params->size() != model.param_dim())
    throw std::invalid_argument("run_noisy_fedavg: initial_params has the wrong length");

  const std::size_t E = config.local_steps, K = config.rounds, r = config.r;
  RunResult result;
  result.learning_rate =
      config.learning_rate_override
          ? *config.learning_rate_override
          : learning_rate(config.gamma, model.smoothness, static_cast<double>(E),
                          static_cast<double>(r), static_cast<double>(K));
  const double eta = result.learning_rate;
  const double up_scale =
      config.uplink_noise_scaling == UplinkNoiseScaling::learning_rate ? eta : 1.0;
  result.zeta = detail::kstar_zeta(eta, model.smoothness, E, config.n, r);
  if (!config.learning_rate_override && config.gamma > 4.0 &&
      static_cast<double>(K) < min_rounds(static_cast<double>(r), config.gamma))
    result.warnings.push_back("K is below the minimum number of rounds for the bound");

  ParamVector w = config.initial_params ? *config.initial_params : ParamVector(model.param_dim());
  const double dim = static_cast<double>(w.size());
  result.metrics.reserve(K);

  struct Slot {
    ParamVector step;
    double received_loss = 0.0;
    double snr_up = 0.0;
  };
  std::vector<Slot> slots(r);

  for (std::size_t k = 0; k < K; ++k) {
    const double up_var = variance_at(config.uplink, k, E);
    const double down_var = variance_at(config.downlink, k, E);

    RoundMetrics m;
    m.round = k;
    m.uplink_variance = up_var;
    m.downlink_variance = down_var;
    m.server_loss = loss(model, w, data);
    if (detail::is_diverged(m.server_loss, w)) {
      result.metrics.push_back(RoundMetrics::sentinel(k, up_var, down_var));
      result.diverged_at = k;
      break;
    }
    m.grad_norm_sq = full_gradient(model, w, data).squared_norm();

    RngStream sampler = derive_stream(config.seed, k, 0, StreamPurpose::client_sampling);
    const auto chosen = client_sample(config.n, r, sampler);

    detail::for_each_slot(r, config.threads, [&](std::size_t s) {
      const std::size_t i = chosen[s];
      RngStream down_rng = derive_stream(config.seed, k, i, StreamPurpose::downlink);
      RngStream batch_rng = derive_stream(config.seed, k, i, StreamPurpose::batch);
      RngStream up_rng = derive_stream(config.seed, k, i, StreamPurpose::uplink);
      Slot& slot = slots[s];
      const ParamVector received = perturb(w, down_var, down_rng);
      slot.received_loss = down_var > 0.0 ? loss(model, received, data) : m.server_loss;
      LocalResult local = run_local_steps(model, data, partition.shards[i], received, eta, E,
                                      config.batch_size, batch_rng);
      // the message is -(drift) + s e; the slot holds its negation
      slot.step = std::move(local.drift);
      if (up_var > 0.0) {
        slot.snr_up = measured_snr(slot.step.squared_norm(), up_scale * up_scale * dim * up_var);
        const ParamVector e = perturb(ParamVector(w.size()), up_var, up_rng);
        slot.step.add_scaled(e, -up_scale);
      }
    });

    // Fixed client-id order keeps the reduction reproducible.
    ParamVector sum(w.size());
    double loss_sum = 0.0, snr_sum = 0.0;
    for (const Slot& slot : slots) {
      sum += slot.step;
      loss_sum += slot.received_loss;
      snr_sum += slot.snr_up;
    }
    const double inv_r = 1.0 / static_cast<double>(r);
    m.train_loss = down_var > 0.0 ? loss_sum * inv_r : m.server_loss;
    if (up_var > 0.0) m.mean_snr_up = snr_sum * inv_r;
    if (down_var > 0.0) m.mean_snr_down = measured_snr(w.squared_norm(), dim * down_var);
    if (!std::isfinite(m.train_loss)) {
      result.metrics.push_back(RoundMetrics::sentinel(k, up_var, down_var));
      result.diverged_at = k;
      break;
    }
    result.metrics.push_back(m);
    w.add_scaled(sum, inv_r);
  }

  if (!result.diverged_at && detail::is_diverged(loss(model, w, data), w)) {
    result.metrics.push_back(RoundMetrics::sentinel(K, 0.0, 0.0));
    result.diverged_at = K;
  }
  result.final_params = std::move(w);
  const std::size_t usable =
      result.diverged_at ? std::max<std::size_t>(1, std::min(*result.diverged_at, K)) : K;
  RngStream kstar_rng = derive_stream(config.seed, 0, 0, StreamPurpose::k_star);
  result.k_star = sample_kstar(result.zeta, usable, kstar_rng);
  return result;
}

// ---------------------------------------------------------------------------
// Noisy-SGD
//
//   w_{t+1} = w_t - eta (e_t + grad~ f(w_t + nu_t; B_t))
//
// Metrics as for FedAvg with a single participant. k* is uniform since the
// guarantee is on the average iterate.

inline RunResult run_noisy_sgd(const LossModel& model, const Dataset& data, double eta,
                               std::size_t iterations, std::size_t batch_size,
                               const NoiseSchedule& uplink, const NoiseSchedule& downlink,
                               std::uint64_t seed) {
  if (!(eta > 0.0)) throw std::invalid_argument("run_noisy_sgd: eta must be positive");
  if (iterations < 1) throw std::invalid_argument("run_noisy_sgd: T must be >= 1");
  if (batch_size < 1 || batch_size > data.size())
    throw std::invalid_argument("run_noisy_sgd: batch_size outside [1, m]");
  uplink.validate();
  downlink.validate();

  RunResult result;
  result.learning_rate = eta;
  if (eta * model.smoothness > 1.0)
    result.warnings.push_back("eta exceeds 1/L; the noisy-SGD bound does not apply");

  const auto everyone = data.all_indices();
  ParamVector w(model.param_dim());
  const double dim = static_cast<double>(w.size());
  result.metrics.reserve(iterations);

  for (std::size_t t = 0; t < iterations; ++t) {
    const double up_var = variance_at(uplink, t, 1);
    const double down_var = variance_at(downlink, t, 1);
    RoundMetrics m;
    m.round = t;
    m.uplink_variance = up_var;
    m.downlink_variance = down_var;
    m.server_loss = loss(model, w, data);
    if (detail::is_diverged(m.server_loss, w)) {
      result.metrics.push_back(RoundMetrics::sentinel(t, up_var, down_var));
      result.diverged_at = t;
      break;
    }
    m.grad_norm_sq = full_gradient(model, w, data).squared_norm();

    RngStream down_rng = derive_stream(seed, t, 0, StreamPurpose::downlink);
    RngStream batch_rng = derive_stream(seed, t, 0, StreamPurpose::batch);
    RngStream up_rng = derive_stream(seed, t, 0, StreamPurpose::uplink);
    const ParamVector received = perturb(w, down_var, down_rng);
    m.train_loss = down_var > 0.0 ? loss(model, received, data) : m.server_loss;
    auto batch = sample_batch(everyone, batch_size, batch_rng);
    std::sort(batch.begin(), batch.end());
    const ParamVector g = gradient(model, received, data, batch);
    if (down_var > 0.0) m.mean_snr_down = measured_snr(w.squared_norm(), dim * down_var);
    ParamVector step = g;
    if (up_var > 0.0) {
      m.mean_snr_up = measured_snr(g.squared_norm(), dim * up_var);
      step = perturb(g, up_var, up_rng);
    }
    if (!std::isfinite(m.train_loss)) {
      result.metrics.push_back(RoundMetrics::sentinel(t, up_var, down_var));
      result.diverged_at = t;
      break;
    }
    result.metrics.push_back(m);
    w.add_scaled(step, -eta);
  }

  result.final_params = std::move(w);
  const std::size_t usable =
      result.diverged_at ? std::max<std::size_t>(1, *result.diverged_at) : iterations;
  RngStream kstar_rng = derive_stream(seed, 0, 0, StreamPurpose::k_star);
  result.k_star = sample_kstar(0.0, usable, kstar_rng);
  return result;
}

}  // namespace noisyfed
