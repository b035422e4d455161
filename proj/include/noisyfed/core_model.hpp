#pragma once

// Loss functions for the synthetic tasks: exact and mini-batch gradients,
// smoothness constants, and a central-difference gradient used as a test
// oracle.
//
//   mse_linear      l(x, w) = 1/2 (<w, x> - y)^2           Hessian (1/m) X^T X
//   softmax_linear  l(x, w) = logsumexp(W x) - (W x)_y     W is C x d, row-major
//
// All functions are pure and thread-safe.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "noisyfed/param_vector.hpp"
#include "noisyfed/rng.hpp"

namespace noisyfed {

enum class TaskKind { regression, classification };
enum class LossKind { mse_linear, softmax_linear };

struct LabeledExample {
  std::vector<double> features;
  double target = 0.0;  // class index for classification
};

/// Row-major feature matrix plus targets.
struct Dataset {
  TaskKind kind = TaskKind::regression;
  std::size_t dim = 0;
  std::size_t num_classes = 0;  // classification only
  std::vector<double> features;
  std::vector<double> targets;

  [[nodiscard]] std::size_t size() const noexcept { return targets.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t j) const noexcept {
    return {features.data() + j * dim, dim};
  }
  [[nodiscard]] double target(std::size_t j) const noexcept { return targets[j]; }
  [[nodiscard]] std::size_t label(std::size_t j) const noexcept {
    return static_cast<std::size_t>(targets[j]);
  }

  void push_back(const LabeledExample& ex) {
    if (ex.features.size() != dim)
      throw std::invalid_argument("Dataset: example has " + std::to_string(ex.features.size()) +
                                  " features, expected " + std::to_string(dim));
    if (kind == TaskKind::classification) {
      const double c = ex.target;
      if (c < 0 || c != std::floor(c) || c >= static_cast<double>(num_classes))
        throw std::invalid_argument("Dataset: class index out of range");
    }
    features.insert(features.end(), ex.features.begin(), ex.features.end());
    targets.push_back(ex.target);
  }

  static Dataset regression(std::size_t dim, std::span<const LabeledExample> examples = {}) {
    Dataset d{TaskKind::regression, dim, 0, {}, {}};
    for (const auto& ex : examples) d.push_back(ex);
    return d;
  }
  static Dataset classification(std::size_t dim, std::size_t classes,
                                std::span<const LabeledExample> examples = {}) {
    Dataset d{TaskKind::classification, dim, classes, {}, {}};
    for (const auto& ex : examples) d.push_back(ex);
    return d;
  }

  [[nodiscard]] std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
};

struct LossModel {
  LossKind kind = LossKind::mse_linear;
  std::size_t dim = 0;          // feature dimension d
  std::size_t num_classes = 0;  // softmax only
  double smoothness = 0.0;      // L
  std::optional<double> f_star;

  /// Length of the parameter vector: d for regression, C*d for softmax.
  [[nodiscard]] std::size_t param_dim() const noexcept {
    return kind == LossKind::mse_linear ? dim : dim * num_classes;
  }
};

namespace detail {

inline void check_inputs(const LossModel& model, const ParamVector& params, const Dataset& data,
                         std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  if (data.dim != model.dim)
    throw std::invalid_argument("dataset dimension " + std::to_string(data.dim) +
                                " does not match model dimension " + std::to_string(model.dim));
  if (params.size() != model.param_dim())
    throw std::invalid_argument("parameter length " + std::to_string(params.size()) +
                                " does not match model (" + std::to_string(model.param_dim()) +
                                ")");
  if (model.kind == LossKind::softmax_linear &&
      (data.kind != TaskKind::classification || data.num_classes != model.num_classes))
    throw std::invalid_argument("softmax model needs a classification dataset with matching C");
  for (std::size_t j : batch)
    if (j >= data.size()) throw std::invalid_argument("batch index out of range");
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// logits = W x, returns log-sum-exp
inline double softmax_logits(const ParamVector& params, std::span<const double> x,
                             std::size_t classes, std::vector<double>& logits) {
  const std::size_t d = x.size();
  logits.resize(classes);
  double mx = -INFINITY;
  for (std::size_t c = 0; c < classes; ++c) {
    logits[c] = dot(std::span<const double>(params.values().data() + c * d, d), x);
    mx = std::max(mx, logits[c]);
  }
  double s = 0.0;
  for (double z : logits) s += std::exp(z - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Mean per-sample loss over `batch`.
inline double loss(const LossModel& model, const ParamVector& params, const Dataset& data,
                   std::span<const std::size_t> batch) {
  detail::check_inputs(model, params, data, batch);
  double acc = 0.0;
  if (model.kind == LossKind::mse_linear) {
    for (std::size_t j : batch) {
      const double r = detail::dot(params.span(), data.row(j)) - data.target(j);
      acc += 0.5 * r * r;
    }
  } else {
    std::vector<double> logits;
    for (std::size_t j : batch) {
      const double lse = detail::softmax_logits(params, data.row(j), model.num_classes, logits);
      // lse >= max logit, so the difference is >= 0 up to rounding
      acc += std::max(0.0, lse - logits[data.label(j)]);
    }
  }
  return acc / static_cast<double>(batch.size());
}

inline double loss(const LossModel& model, const ParamVector& params, const Dataset& data) {
  const auto idx = data.all_indices();
  return loss(model, params, data, idx);
}

/// Mean gradient over `batch`.
inline ParamVector gradient(const LossModel& model, const ParamVector& params, const Dataset& data,
                            std::span<const std::size_t> batch) {
  detail::check_inputs(model, params, data, batch);
  const std::size_t d = model.dim;
  ParamVector g(model.param_dim());
  if (model.kind == LossKind::mse_linear) {
    for (std::size_t j : batch) {
      const auto x = data.row(j);
      const double r = detail::dot(params.span(), x) - data.target(j);
      for (std::size_t i = 0; i < d; ++i) g[i] += r * x[i];
    }
  } else {
    std::vector<double> logits;
    for (std::size_t j : batch) {
      const auto x = data.row(j);
      const double lse = detail::softmax_logits(params, x, model.num_classes, logits);
      const std::size_t y = data.label(j);
      for (std::size_t c = 0; c < model.num_classes; ++c) {
        const double coef = std::exp(logits[c] - lse) - (c == y ? 1.0 : 0.0);
        for (std::size_t i = 0; i < d; ++i) g[c * d + i] += coef * x[i];
      }
    }
  }
  g *= 1.0 / static_cast<double>(batch.size());
  return g;
}

inline ParamVector full_gradient(const LossModel& model, const ParamVector& params,
                                 const Dataset& data) {
  const auto idx = data.all_indices();
  return gradient(model, params, data, idx);
}

/// Central-difference gradient of an arbitrary scalar function.
template <class Fn>
ParamVector finite_difference_gradient(Fn&& fn, const ParamVector& at, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  ParamVector g(at.size());
  ParamVector probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    probe[i] = at[i] + step;
    const double up = fn(probe);
    probe[i] = at[i] - step;
    const double down = fn(probe);
    probe[i] = at[i];
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline ParamVector finite_difference_gradient(const LossModel& model, const ParamVector& params,
                                              const Dataset& data,
                                              std::span<const std::size_t> batch, double step) {
  detail::check_inputs(model, params, data, batch);
  return finite_difference_gradient(
      [&](const ParamVector& w) { return loss(model, w, data, batch); }, params, step);
}

/// (1/m) X^T X, d x d row-major.
inline std::vector<double> gram_matrix(const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("gram_matrix: empty dataset");
  const std::size_t d = data.dim;
  std::vector<double> gram(d * d, 0.0);
  for (std::size_t j = 0; j < data.size(); ++j) {
    const auto x = data.row(j);
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x[a];
      for (std::size_t b = a; b < d; ++b) gram[a * d + b] += xa * x[b];
    }
  }
  const double inv_m = 1.0 / static_cast<double>(data.size());
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      gram[a * d + b] *= inv_m;
      gram[b * d + a] = gram[a * d + b];
    }
  return gram;
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, stopped
/// when the eigen-residual ||Av - lambda v|| falls below rel_tol * lambda.
inline double largest_eigenvalue(std::span<const double> sym, std::size_t d,
                                 double rel_tol = 1e-9, std::size_t max_iter = 200000) {
  RngStream rng(0x5EED'0F'F00DULL);
  std::vector<double> v(d), av(d);
  for (double& x : v) x = rng.normal();
  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    for (double& e : x) e /= n;
    return n;
  };
  auto apply = [&](const std::vector<double>& in, std::vector<double>& out) {
    for (std::size_t a = 0; a < d; ++a) {
      double acc = 0.0;
      for (std::size_t b = 0; b < d; ++b) acc += sym[a * d + b] * in[b];
      out[a] = acc;
    }
  };
  normalize(v);
  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    apply(v, av);
    lambda = 0.0;
    for (std::size_t a = 0; a < d; ++a) lambda += v[a] * av[a];
    if (lambda <= 0.0) return 0.0;
    double res = 0.0;
    for (std::size_t a = 0; a < d; ++a) res += (av[a] - lambda * v[a]) * (av[a] - lambda * v[a]);
    if (std::sqrt(res) <= rel_tol * lambda) break;
    v = av;
    normalize(v);
  }
  return lambda;
}

/// Upper bound on the gradient Lipschitz constant over `data`:
/// lambda_max((1/m) X^T X) for mse_linear, half of it for softmax_linear.
inline double smoothness_constant(LossKind kind, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("smoothness_constant: empty dataset");
  const auto gram = gram_matrix(data);
  const double lmax = largest_eigenvalue(gram, data.dim);
  return kind == LossKind::mse_linear ? lmax : 0.5 * lmax;
}

inline double smoothness_constant(const LossModel& model, const Dataset& data) {
  return smoothness_constant(model.kind, data);
}

/// Least-squares minimiser of the mse_linear objective, from the normal
/// equations X^T X w = X^T y solved by Cholesky.
inline ParamVector normal_equations_minimizer(const Dataset& data) {
  if (data.kind != TaskKind::regression)
    throw std::invalid_argument("normal equations need a regression dataset");
  const std::size_t d = data.dim;
  auto a = gram_matrix(data);
  std::vector<double> rhs(d, 0.0);
  for (std::size_t j = 0; j < data.size(); ++j) {
    const auto x = data.row(j);
    for (std::size_t i = 0; i < d; ++i) rhs[i] += x[i] * data.target(j);
  }
  for (double& v : rhs) v /= static_cast<double>(data.size());
  // in-place Cholesky, lower triangle
  for (std::size_t c = 0; c < d; ++c) {
    double diag = a[c * d + c];
    for (std::size_t k = 0; k < c; ++k) diag -= a[c * d + k] * a[c * d + k];
    if (!(diag > 0.0)) throw std::invalid_argument("normal equations: X^T X is singular");
    a[c * d + c] = std::sqrt(diag);
    for (std::size_t r = c + 1; r < d; ++r) {
      double s = a[r * d + c];
      for (std::size_t k = 0; k < c; ++k) s -= a[r * d + k] * a[c * d + k];
      a[r * d + c] = s / a[c * d + c];
    }
  }
  ParamVector w(d);
  for (std::size_t r = 0; r < d; ++r) {
    double s = rhs[r];
    for (std::size_t k = 0; k < r; ++k) s -= a[r * d + k] * w[k];
    w[r] = s / a[r * d + r];
  }
  for (std::size_t r = d; r-- > 0;) {
    double s = w[r];
    for (std::size_t k = r + 1; k < d; ++k) s -= a[k * d + r] * w[k];
    w[r] = s / a[r * d + r];
  }
  return w;
}

/// Regression model with L from the data and f_star from the normal equations.
inline LossModel make_mse_model(const Dataset& data) {
  LossModel m{LossKind::mse_linear, data.dim, 0, smoothness_constant(LossKind::mse_linear, data),
              std::nullopt};
  m.f_star = loss(m, normal_equations_minimizer(data), data);
  return m;
}

inline LossModel make_softmax_model(const Dataset& data) {
  if (data.kind != TaskKind::classification)
    throw std::invalid_argument("softmax model needs a classification dataset");
  return LossModel{LossKind::softmax_linear, data.dim, data.num_classes,
                   smoothness_constant(LossKind::softmax_linear, data), std::nullopt};
}

/// Fraction of examples whose arg-max logit equals the label.
inline double accuracy(const LossModel& model, const ParamVector& params, const Dataset& data) {
  if (model.kind != LossKind::softmax_linear)
    throw std::invalid_argument("accuracy is defined for softmax models only");
  const auto idx = data.all_indices();
  detail::check_inputs(model, params, data, idx);
  std::vector<double> logits;
  std::size_t hits = 0;
  for (std::size_t j : idx) {
    detail::softmax_logits(params, data.row(j), model.num_classes, logits);
    const auto best = static_cast<std::size_t>(
        std::max_element(logits.begin(), logits.end()) - logits.begin());
    hits += best == data.label(j) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace noisyfed
