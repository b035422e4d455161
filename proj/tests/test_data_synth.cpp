#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "noisyfed/core_model.hpp"
#include "noisyfed/data_synth.hpp"

using namespace noisyfed;

namespace {

double top_eigenvalue_oracle(const Dataset& data) {
  Eigen::MatrixXd x(data.size(), data.dim);
  for (std::size_t j = 0; j < data.size(); ++j)
    for (std::size_t i = 0; i < data.dim; ++i) x(j, i) = data.row(j)[i];
  const Eigen::MatrixXd h = x.transpose() * x / static_cast<double>(data.size());
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h).eigenvalues().maxCoeff();
}

// Full-batch gradient descent on the softmax objective.
double trained_accuracy(const Dataset& data) {
  const LossModel model = make_softmax_model(data);
  ParamVector w(model.param_dim());
  const double step = 1.0 / model.smoothness;
  for (int it = 0; it < 300; ++it) w.add_scaled(full_gradient(model, w, data), -step);
  return accuracy(model, w, data);
}

void expect_partition_laws(const ClientPartition& p, std::size_t m) {
  EXPECT_NO_THROW(p.validate(m));
  std::vector<int> hits(m, 0);
  for (const auto& shard : p.shards) {
    EXPECT_FALSE(shard.empty());
    for (std::size_t j : shard) ++hits[j];
  }
  for (int h : hits) EXPECT_EQ(h, 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// regression

TEST(GenerateRegression, DefaultTaskHasUnitHessianNorm) {
  const auto reg = generate_regression({}, 1);
  EXPECT_EQ(reg.dataset.size(), 15000u);
  EXPECT_EQ(reg.dataset.dim, 60u);
  EXPECT_NEAR(top_eigenvalue_oracle(reg.dataset), 1.0, 1e-6);
  EXPECT_NEAR(smoothness_constant(LossKind::mse_linear, reg.dataset), 1.0, 1e-6);
}

TEST(GenerateRegression, NoiselessLabelsFitExactlyAtRescaledTheta) {
  SyntheticRegressionSpec spec;
  spec.m = 300;
  spec.d = 5;
  spec.label_noise_variance = 0.0;
  const auto reg = generate_regression(spec, 9);
  const LossModel model = make_mse_model(reg.dataset);
  EXPECT_LT(loss(model, reg.theta_star, reg.dataset), 1e-26);
}

TEST(GenerateRegression, ExplicitThetaIsRescaled) {
  SyntheticRegressionSpec spec;
  spec.m = 200;
  spec.d = 3;
  spec.theta_star = ParamVector{1.0, -2.0, 0.5};
  const auto reg = generate_regression(spec, 4);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(reg.theta_star[i] * reg.feature_scale, (*spec.theta_star)[i], 1e-12);
}

TEST(GenerateRegression, LabelNoiseHasRequestedVariance) {
  SyntheticRegressionSpec spec;
  spec.m = 20000;
  spec.d = 2;
  spec.label_noise_variance = 0.05;
  spec.normalize_hessian = false;
  const auto reg = generate_regression(spec, 17);
  double ss = 0.0;
  for (std::size_t j = 0; j < spec.m; ++j) {
    const double resid =
        reg.dataset.target(j) - detail::dot(reg.theta_star.span(), reg.dataset.row(j));
    ss += resid * resid;
  }
  EXPECT_NEAR(ss / static_cast<double>(spec.m), 0.05, 0.05 * 4.0 * std::sqrt(2.0 / spec.m));
}

TEST(GenerateRegression, SameSeedIsBitIdentical) {
  SyntheticRegressionSpec spec;
  spec.m = 500;
  spec.d = 10;
  const auto a = generate_regression(spec, 5);
  const auto b = generate_regression(spec, 5);
  const auto c = generate_regression(spec, 6);
  EXPECT_EQ(a.dataset.features, b.dataset.features);
  EXPECT_EQ(a.dataset.targets, b.dataset.targets);
  EXPECT_EQ(a.theta_star, b.theta_star);
  EXPECT_NE(a.dataset.features, c.dataset.features);
}

TEST(GenerateRegression, SpecValidation) {
  SyntheticRegressionSpec spec;
  spec.m = 5;
  spec.d = 10;
  EXPECT_THROW(generate_regression(spec, 1), std::invalid_argument);
  spec.m = 20;
  spec.d = 0;
  EXPECT_THROW(generate_regression(spec, 1), std::invalid_argument);
  spec.d = 2;
  spec.label_noise_variance = -1.0;
  EXPECT_THROW(generate_regression(spec, 1), std::invalid_argument);
  spec.label_noise_variance = 0.0;
  spec.theta_star = ParamVector{1.0};
  EXPECT_THROW(generate_regression(spec, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// classification

TEST(GenerateClassification, BalancedClasses) {
  const Dataset data = generate_classification(103, 4, 5, 2.0, 3);
  std::vector<std::size_t> counts(5, 0);
  for (std::size_t j = 0; j < data.size(); ++j) ++counts[data.label(j)];
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  EXPECT_LE(*hi - *lo, 1u);
}

TEST(GenerateClassification, NoSeparationGivesChanceAccuracy) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const Dataset data = generate_classification(4000, 2, 2, 0.0, seed);
    EXPECT_NEAR(trained_accuracy(data), 0.5, 0.05) << "seed " << seed;
  }
}

TEST(GenerateClassification, WideSeparationIsLearnable) {
  const Dataset data = generate_classification(2000, 2, 2, 10.0, 8);
  EXPECT_GT(trained_accuracy(data), 0.95);
}

TEST(GenerateClassification, Preconditions) {
  EXPECT_THROW(generate_classification(10, 2, 1, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(generate_classification(2, 2, 3, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(generate_classification(10, 0, 2, 1.0, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// partitions

TEST(PartitionIid, EqualShardsOfThreeHundred) {
  const auto p = partition_iid(15000, 50, 1);
  ASSERT_EQ(p.num_clients(), 50u);
  for (const auto& shard : p.shards) EXPECT_EQ(shard.size(), 300u);
  expect_partition_laws(p, 15000);
}

TEST(PartitionIid, SingleClientHoldsEverything) {
  const auto p = partition_iid(37, 1, 1);
  ASSERT_EQ(p.num_clients(), 1u);
  auto shard = p.shards[0];
  std::sort(shard.begin(), shard.end());
  for (std::size_t j = 0; j < 37; ++j) EXPECT_EQ(shard[j], j);
}

TEST(PartitionIid, UnevenSizesDifferByOne) {
  const auto p = partition_iid(103, 10, 2);
  for (const auto& shard : p.shards) EXPECT_TRUE(shard.size() == 10 || shard.size() == 11);
  expect_partition_laws(p, 103);
  EXPECT_THROW(partition_iid(3, 5, 1), std::invalid_argument);
  EXPECT_THROW(partition_iid(3, 0, 1), std::invalid_argument);
}

TEST(PartitionProperty, LawsHoldAcrossSeedsAndSizes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t m = 50 + seed * 13, n = 1 + seed % 9;
    expect_partition_laws(partition_iid(m, n, seed), m);
    const Dataset data = generate_classification(m, 2, 4, 1.0, seed);
    expect_partition_laws(partition_label_shard(data, n + 3, 2, seed), m);
  }
}

TEST(PartitionValidate, DetectsViolations) {
  ClientPartition p;
  p.shards = {{0, 1}, {1, 2}};
  EXPECT_THROW(p.validate(3), std::invalid_argument);
  p.shards = {{0, 1}, {}};
  EXPECT_THROW(p.validate(2), std::invalid_argument);
  p.shards = {{0}, {1}};
  EXPECT_THROW(p.validate(3), std::invalid_argument);
  p.shards = {{0}, {5}};
  EXPECT_THROW(p.validate(3), std::invalid_argument);
}

TEST(PartitionLabelShard, OneLabelPerClientIsABijection) {
  const Dataset data = generate_classification(500, 3, 10, 2.0, 4);
  const auto p = partition_label_shard(data, 10, 1, 4);
  std::set<std::size_t> seen;
  for (const auto& shard : p.shards) {
    std::set<std::size_t> labels;
    for (std::size_t j : shard) labels.insert(data.label(j));
    ASSERT_EQ(labels.size(), 1u);
    seen.insert(*labels.begin());
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST(PartitionLabelShard, AtMostTwoLabelsAndEveryClassCovered) {
  const Dataset data = generate_classification(3000, 3, 10, 2.0, 5);
  const auto p = partition_label_shard(data, 100, 2, 5);
  expect_partition_laws(p, data.size());
  std::set<std::size_t> covered;
  for (const auto& shard : p.shards) {
    std::set<std::size_t> labels;
    for (std::size_t j : shard) labels.insert(data.label(j));
    EXPECT_LE(labels.size(), 2u);
    covered.insert(labels.begin(), labels.end());
  }
  EXPECT_EQ(covered.size(), 10u);
}

TEST(PartitionLabelShard, ErrorPaths) {
  SyntheticRegressionSpec spec;
  spec.m = 100;
  spec.d = 2;
  const auto reg = generate_regression(spec, 1);
  EXPECT_THROW(partition_label_shard(reg.dataset, 5, 1, 1), std::invalid_argument);
  const Dataset data = generate_classification(100, 2, 10, 1.0, 1);
  EXPECT_THROW(partition_label_shard(data, 4, 2, 1), std::invalid_argument);
  EXPECT_THROW(partition_label_shard(data, 100, 2, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// batches

TEST(SampleBatch, FullShardReturnsEveryIndex) {
  const std::vector<std::size_t> shard{4, 8, 15, 16, 23, 42};
  RngStream rng(1);
  auto batch = sample_batch(shard, shard.size(), rng);
  std::sort(batch.begin(), batch.end());
  EXPECT_EQ(batch, shard);
}

TEST(SampleBatch, DistinctEntriesAndErrors) {
  const std::vector<std::size_t> shard{1, 2, 3, 4, 5, 6, 7, 8};
  RngStream rng(2);
  for (int t = 0; t < 200; ++t) {
    auto batch = sample_batch(shard, 5, rng);
    std::sort(batch.begin(), batch.end());
    EXPECT_EQ(std::adjacent_find(batch.begin(), batch.end()), batch.end());
  }
  EXPECT_THROW(sample_batch(shard, 9, rng), std::invalid_argument);
  EXPECT_THROW(sample_batch(shard, 0, rng), std::invalid_argument);
}

TEST(SampleBatch, SingleDrawsAreUniform) {
  const std::vector<std::size_t> shard{0, 1, 2, 3, 4};
  RngStream rng(3);
  const int draws = 100000;
  std::vector<int> counts(5, 0);
  for (int t = 0; t < draws; ++t) ++counts[sample_batch(shard, 1, rng)[0]];
  const double p = 0.2, mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (int c : counts) EXPECT_NEAR(c, mean, 3.0 * sd);
}

TEST(SampleBatch, SameStreamStateSameBatch) {
  const std::vector<std::size_t> shard{10, 11, 12, 13, 14, 15, 16};
  RngStream a(77), b(77);
  EXPECT_EQ(sample_batch(shard, 4, a), sample_batch(shard, 4, b));
}

// ---------------------------------------------------------------------------
// CSV dump/load

TEST(DatasetCsv, WriteThenReadIsExact) {
  SyntheticRegressionSpec spec;
  spec.m = 40;
  spec.d = 3;
  const auto reg = generate_regression(spec, 12);
  std::stringstream buf;
  write_dataset_csv(buf, reg.dataset);
  EXPECT_EQ(buf.str().substr(0, buf.str().find('\n')), "f0,f1,f2,target");
  const Dataset back = read_dataset_csv(buf, TaskKind::regression);
  EXPECT_EQ(back.features, reg.dataset.features);
  EXPECT_EQ(back.targets, reg.dataset.targets);

  const Dataset cls = generate_classification(30, 2, 3, 1.0, 2);
  std::stringstream buf2;
  write_dataset_csv(buf2, cls);
  const Dataset cls_back = read_dataset_csv(buf2, TaskKind::classification, 3);
  EXPECT_EQ(cls_back.targets, cls.targets);
}

TEST(DatasetCsv, MalformedInputNamesTheLine) {
  std::stringstream bad_header("a,b\n1,2\n");
  EXPECT_THROW(read_dataset_csv(bad_header, TaskKind::regression), std::invalid_argument);
  std::stringstream bad_cell("f0,target\n1,2\n3,x\n");
  try {
    read_dataset_csv(bad_cell, TaskKind::regression);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  std::stringstream short_row("f0,f1,target\n1,2\n");
  EXPECT_THROW(read_dataset_csv(short_row, TaskKind::regression), std::invalid_argument);
  std::stringstream bad_class("f0,target\n1,7\n");
  EXPECT_THROW(read_dataset_csv(bad_class, TaskKind::classification, 3), std::invalid_argument);
}
