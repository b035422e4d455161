#pragma once

// Synthetic datasets and client partitions.
//
// Regression follows the linear model y = <theta*, x> + c with standard
// normal features and Gaussian label noise. With normalize_hessian the
// features are divided by a single scalar sqrt(lambda_max((1/m) X^T X)) so
// the mse_linear smoothness constant is 1; theta* is reported in the
// rescaled coordinates so that <theta*, x> is unchanged.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "noisyfed/core_model.hpp"
#include "noisyfed/format.hpp"
#include "noisyfed/rng.hpp"

namespace noisyfed {

struct SyntheticRegressionSpec {
  std::size_t m = 15000;
  std::size_t d = 60;
  std::optional<ParamVector> theta_star;  // drawn N(0, I) from the seed when absent
  double label_noise_variance = 0.05;
  bool normalize_hessian = true;

  void validate() const {
    if (d < 1) throw std::invalid_argument("regression spec: d must be >= 1");
    if (m < d) throw std::invalid_argument("regression spec: need m >= d");
    if (!(label_noise_variance >= 0.0))
      throw std::invalid_argument("regression spec: label_noise_variance must be >= 0");
    if (theta_star && theta_star->size() != d)
      throw std::invalid_argument("regression spec: theta_star length must equal d");
  }
};

struct SyntheticRegression {
  Dataset dataset;
  ParamVector theta_star;     // in the (possibly rescaled) feature coordinates
  double feature_scale = 1.0;  // factor applied to every feature
};

inline SyntheticRegression generate_regression(const SyntheticRegressionSpec& spec,
                                               std::uint64_t seed) {
  spec.validate();
  RngStream rng = derive_stream(seed, 0, 0, StreamPurpose::data);
  Dataset data = Dataset::regression(spec.d);
  data.features.resize(spec.m * spec.d);
  for (double& v : data.features) v = rng.normal();

  ParamVector theta(spec.d);
  if (spec.theta_star) {
    theta = *spec.theta_star;
  } else {
    for (double& v : theta) v = rng.normal();
  }
  const double noise_std = std::sqrt(spec.label_noise_variance);
  data.targets.resize(spec.m);
  for (std::size_t j = 0; j < spec.m; ++j) {
    const double c = rng.normal();
    data.targets[j] = detail::dot(theta.span(), data.row(j)) + noise_std * c;
  }

  double scale = 1.0;
  if (spec.normalize_hessian) {
    const double lmax = smoothness_constant(LossKind::mse_linear, data);
    if (lmax > 0.0) {
      scale = 1.0 / std::sqrt(lmax);
      for (double& v : data.features) v *= scale;
      theta *= 1.0 / scale;
    }
  }
  return {std::move(data), std::move(theta), scale};
}

/// C Gaussian clusters with identity covariance; every cluster mean has norm
/// `cluster_separation`. Example j belongs to class j mod C.
inline Dataset generate_classification(std::size_t m, std::size_t d, std::size_t classes,
                                       double cluster_separation, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("classification: need C >= 2");
  if (m < classes) throw std::invalid_argument("classification: need m >= C");
  if (d < 1) throw std::invalid_argument("classification: need d >= 1");
  if (!(cluster_separation >= 0.0))
    throw std::invalid_argument("classification: separation must be >= 0");
  RngStream rng = derive_stream(seed, 0, 0, StreamPurpose::data);
  std::vector<double> means(classes * d);
  for (std::size_t c = 0; c < classes; ++c) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      means[c * d + i] = rng.normal();
      n2 += means[c * d + i] * means[c * d + i];
    }
    const double s = n2 > 0.0 ? cluster_separation / std::sqrt(n2) : 0.0;
    for (std::size_t i = 0; i < d; ++i) means[c * d + i] *= s;
  }
  Dataset data = Dataset::classification(d, classes);
  data.features.resize(m * d);
  data.targets.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t c = j % classes;
    data.targets[j] = static_cast<double>(c);
    for (std::size_t i = 0; i < d; ++i) data.features[j * d + i] = means[c * d + i] + rng.normal();
  }
  return data;
}

/// n pairwise-disjoint, non-empty index lists covering [0, m).
struct ClientPartition {
  std::vector<std::vector<std::size_t>> shards;

  [[nodiscard]] std::size_t num_clients() const noexcept { return shards.size(); }

  void validate(std::size_t m) const {
    std::vector<char> seen(m, 0);
    std::size_t total = 0;
    for (const auto& shard : shards) {
      if (shard.empty()) throw std::invalid_argument("partition: empty shard");
      for (std::size_t j : shard) {
        if (j >= m) throw std::invalid_argument("partition: index out of range");
        if (seen[j]) throw std::invalid_argument("partition: shards overlap");
        seen[j] = 1;
        ++total;
      }
    }
    if (total != m) throw std::invalid_argument("partition: shards do not cover the dataset");
  }
};

namespace detail {

template <class T>
void shuffle(std::vector<T>& v, RngStream& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

/// Random permutation split into n contiguous chunks of floor(m/n) or ceil(m/n).
inline ClientPartition partition_iid(std::size_t m, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("partition_iid: need n >= 1");
  if (m < n) throw std::invalid_argument("partition_iid: fewer examples than clients");
  RngStream rng = derive_stream(seed, 0, 0, StreamPurpose::partition);
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  detail::shuffle(perm, rng);
  ClientPartition p;
  p.shards.resize(n);
  const std::size_t base = m / n, extra = m % n;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    p.shards[i].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                       perm.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return p;
}

/// Label-skewed partition: every class is cut into slices, the n * labels_per_client
/// slices are shuffled, and client i receives slices [i*lpc, (i+1)*lpc). Each client
/// therefore sees at most labels_per_client distinct classes.
inline ClientPartition partition_label_shard(const Dataset& data, std::size_t n,
                                             std::size_t labels_per_client, std::uint64_t seed) {
  if (data.kind != TaskKind::classification)
    throw std::invalid_argument("partition_label_shard: needs a classification dataset");
  if (n == 0 || labels_per_client == 0)
    throw std::invalid_argument("partition_label_shard: need n >= 1 and labels_per_client >= 1");
  const std::size_t classes = data.num_classes;
  const std::size_t total_slices = n * labels_per_client;
  if (total_slices < classes)
    throw std::invalid_argument("partition_label_shard: n * labels_per_client < number of classes");

  RngStream rng = derive_stream(seed, 0, 0, StreamPurpose::partition);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t j = 0; j < data.size(); ++j) by_class[data.label(j)].push_back(j);

  std::vector<std::vector<std::size_t>> slices;
  slices.reserve(total_slices);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t count = total_slices / classes + (c < total_slices % classes ? 1 : 0);
    auto& members = by_class[c];
    if (members.size() < count)
      throw std::invalid_argument("partition_label_shard: class " + std::to_string(c) +
                                  " has fewer examples than slices");
    detail::shuffle(members, rng);
    const std::size_t base = members.size() / count, extra = members.size() % count;
    std::size_t pos = 0;
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t len = base + (s < extra ? 1 : 0);
      slices.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(pos),
                          members.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
  }
  detail::shuffle(slices, rng);

  ClientPartition p;
  p.shards.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < labels_per_client; ++s) {
      const auto& slice = slices[i * labels_per_client + s];
      p.shards[i].insert(p.shards[i].end(), slice.begin(), slice.end());
    }
  return p;
}

/// Uniform sample of `batch_size` distinct entries of `shard`, in draw order.
inline std::vector<std::size_t> sample_batch(std::span<const std::size_t> shard,
                                             std::size_t batch_size, RngStream& rng) {
  if (batch_size < 1 || batch_size > shard.size())
    throw std::invalid_argument("sample_batch: batch size " + std::to_string(batch_size) +
                                " outside [1, " + std::to_string(shard.size()) + "]");
  std::vector<std::size_t> pool(shard.begin(), shard.end());
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(batch_size);
  return pool;
}

// CSV dump/load: header f0..f{d-1},target, one example per line.

inline void write_dataset_csv(std::ostream& out, const Dataset& data) {
  for (std::size_t i = 0; i < data.dim; ++i) out << 'f' << i << ',';
  out << "target\n";
  for (std::size_t j = 0; j < data.size(); ++j) {
    for (double v : data.row(j)) out << format_roundtrip(v) << ',';
    out << format_roundtrip(data.target(j)) << '\n';
  }
}

inline Dataset read_dataset_csv(std::istream& in, TaskKind kind, std::size_t classes = 0) {
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("dataset csv: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header.back() != "target")
    throw std::invalid_argument("dataset csv: header must end with 'target'");
  const std::size_t d = header.size() - 1;
  for (std::size_t i = 0; i < d; ++i)
    if (header[i] != "f" + std::to_string(i))
      throw std::invalid_argument("dataset csv: unexpected column '" + header[i] + "'");
  Dataset data = kind == TaskKind::regression ? Dataset::regression(d)
                                              : Dataset::classification(d, classes);
  std::size_t line_no = 1;
  LabeledExample ex;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ex.features.clear();
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    try {
      while (std::getline(ss, cell, ',')) cells.push_back(parse_double(cell));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("dataset csv line " + std::to_string(line_no) + ": " + e.what());
    }
    if (cells.size() != d + 1)
      throw std::invalid_argument("dataset csv line " + std::to_string(line_no) +
                                  ": wrong number of columns");
    ex.target = cells.back();
    cells.pop_back();
    ex.features = std::move(cells);
    data.push_back(ex);
  }
  return data;
}

}  // namespace noisyfed
