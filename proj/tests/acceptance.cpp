// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "noisyfed/noisyfed.hpp"

using namespace noisyfed;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail, double seconds) {
  std::printf("%s criterion %d: %s (%.1f s)\n", ok ? "PASS" : "FAIL", id, detail.c_str(), seconds);
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <class... Args>
std::string fmtn(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

ExperimentConfig preset(const std::string& name) {
  return load_config(std::filesystem::path(NOISYFED_PRESET_DIR) / (name + ".json"));
}

struct PresetRun {
  ExperimentConfig config;
  Problem problem;
  std::vector<RunResult> results;
  MeanStd finals;
};

PresetRun run_preset(ExperimentConfig c) {
  PresetRun out{c, build_problem(c), {}, {}};
  out.results = run_seeds(out.config, out.problem, out.config.repeat_seeds, max_parallel_seeds());
  std::vector<double> finals;
  for (const auto& r : out.results) finals.push_back(final_loss(r));
  out.finals = mean_std(finals);
  return out;
}

double pooled_std(const MeanStd& a, const MeanStd& b) {
  return std::sqrt((a.std * a.std + b.std * b.std) / 2.0);
}

// Least-squares slope of log(y) against log(x); NaN when some y <= 0.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(y[i] > 0.0)) return std::nan("");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::vector<double> excess_of(const std::vector<SweepRow>& rows, const std::string& variant) {
  std::vector<double> out;
  for (const auto& row : rows)
    if (row.variant == variant) out.push_back(row.excess);
  return out;
}

// ---------------------------------------------------------------------------

void criterion1() {
  Stopwatch sw;
  const double eta = learning_rate(18, 1, 5, 10, 100);
  report(1, std::abs(eta - 0.003514) <= 1e-4, fmt("learning_rate(18, 1, 5, 10, 100) = %.7f", eta),
         sw.seconds());
}

void criterion2_3_4() {
  Stopwatch sw;
  const PresetRun clean = run_preset(preset("v5a_noise_free"));
  const PresetRun up = run_preset(preset("v5a_uplink_only"));
  const PresetRun down = run_preset(preset("v5a_downlink_only"));
  const double t_three = sw.seconds();
  const double gap_up = up.finals.mean - clean.finals.mean;
  const double gap_down = down.finals.mean - up.finals.mean;
  const double need_up = 3.0 * pooled_std(clean.finals, up.finals);
  const double need_down = 3.0 * pooled_std(up.finals, down.finals);
  report(2, gap_up > need_up && gap_down > need_down,
         fmtn("final loss noise-free %.6f, uplink %.6f, downlink %.6f; gaps %.6f (need > %.6f), "
              "%.6f (need > %.6f)",
              clean.finals.mean, up.finals.mean, down.finals.mean, gap_up, need_up, gap_down,
              need_down),
         t_three);

  Stopwatch sw3;
  const PresetRun snr = run_preset(preset("v5a_snr_control"));
  const double diff = std::abs(snr.finals.mean - clean.finals.mean);
  report(3, diff <= 0.25,
         fmtn("SNR-controlled %.6f vs noise-free %.6f, |diff| = %.6f (tol 0.25)", snr.finals.mean,
              clean.finals.mean, diff),
         sw3.seconds());

  Stopwatch sw4;
  int violations = 0, checked = 0;
  double worst_ratio = 0.0;
  for (const PresetRun* run : {&clean, &up, &down, &snr}) {
    const json summary = build_summary(run->config, run->problem, run->results);
    const double total = summary["bound"]["total"].get<double>();
    for (const auto& r : run->results) {
      const double measured = weighted_grad_norm(r);
      ++checked;
      if (!r.completed() || !(measured <= total)) ++violations;
      worst_ratio = std::max(worst_ratio, measured / total);
    }
  }
  report(4, violations == 0,
         fmtn("%d of %d runs exceed the bound; largest measured/bound = %.4f", violations, checked,
              worst_ratio),
         sw4.seconds());
}

void criterion5() {
  Stopwatch sw;
  std::vector<double> values;
  for (std::size_t rounds : {25u, 100u, 400u}) {
    ExperimentConfig c = preset("v5a_noise_free");
    c.fedavg.rounds = rounds;
    const Problem p = build_problem(c);
    const auto results = run_seeds(c, p, c.repeat_seeds, max_parallel_seeds());
    double acc = 0.0;
    for (const auto& r : results) {
      double best = INFINITY;
      for (const auto& m : r.metrics) best = std::min(best, m.grad_norm_sq);
      acc += best;
    }
    values.push_back(acc / static_cast<double>(results.size()));
  }
  const double r1 = values[0] / values[1], r2 = values[1] / values[2];
  report(5, r1 >= 1.5 && r2 >= 1.5,
         fmtn("min grad_norm_sq K=25 %.5f, K=100 %.5f, K=400 %.5f; ratios %.3f, %.3f (need >= 1.5)",
              values[0], values[1], values[2], r1, r2),
         sw.seconds());
}

void criterion6() {
  Stopwatch sw;
  const ExperimentConfig base = preset("sweep");
  const std::vector<std::size_t> rs{5, 10, 20, 40}, es{1, 2, 5, 10};
  const auto r_rows = sweep_rows(base, SweepAxis::r, rs, max_parallel_seeds());
  const auto e_rows = sweep_rows(base, SweepAxis::E, es, max_parallel_seeds());
  const std::vector<double> rx(rs.begin(), rs.end()), ex(es.begin(), es.end());
  const double r_up = loglog_slope(rx, excess_of(r_rows, "uplink_only"));
  const double r_down = loglog_slope(rx, excess_of(r_rows, "downlink_only"));
  const double e_up = loglog_slope(ex, excess_of(e_rows, "uplink_only"));
  const bool ok = r_up >= -0.8 && r_up <= -0.2 && r_down >= -0.15 && r_down <= 0.15 &&
                  e_up >= -2.6 && e_up <= -1.4;
  report(6, ok,
         fmtn("slopes: uplink vs r %.3f in [-0.8, -0.2], downlink vs r %.3f in [-0.15, 0.15], "
              "uplink vs E %.3f in [-2.6, -1.4]",
              r_up, r_down, e_up),
         sw.seconds());
}

void criterion7() {
  Stopwatch sw;
  const PolicyComparison c = compare_policies(100, 5);
  report(7, std::abs(c.uplink_ratio - 0.1330) <= 0.001 && std::abs(c.downlink_ratio - 25.0) < 1e-9,
         fmtn("uplink ratio %.6f (671.46/5050), downlink ratio %.3f (E^2)", c.uplink_ratio,
              c.downlink_ratio),
         sw.seconds());
}

// Compact re-runs of the property suites.
void criterion8() {
  Stopwatch sw;
  std::vector<std::string> failed;

  {  // gradient vs finite differences, 100 cases per model
    SyntheticRegressionSpec spec;
    spec.m = 40;
    spec.d = 5;
    const auto reg = generate_regression(spec, 1);
    const Dataset cls = generate_classification(40, 5, 3, 1.0, 1);
    RngStream rng(21);
    double worst = 0.0;
    for (const auto& [model, data] : {std::pair{make_mse_model(reg.dataset), &reg.dataset},
                                      std::pair{make_softmax_model(cls), &cls}}) {
      for (int t = 0; t < 100; ++t) {
        ParamVector w(model.param_dim());
        for (double& v : w) v = rng.normal();
        auto batch = sample_batch(data->all_indices(), 1 + rng.uniform_index(data->size()), rng);
        const ParamVector g = gradient(model, w, *data, batch);
        const ParamVector fd = finite_difference_gradient(model, w, *data, batch, 1e-6);
        worst = std::max(worst, (g - fd).norm() / std::max(g.norm(), 1.0));
      }
    }
    if (!(worst < 1e-6)) failed.push_back(fmt("finite differences (worst %.2e)", worst));
  }
  {  // partition laws
    bool ok = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const std::size_t m = 97 + 31 * seed, n = 2 + seed;
      try {
        partition_iid(m, n, seed).validate(m);
        const Dataset data = generate_classification(m, 2, 5, 1.0, seed);
        partition_label_shard(data, n + 3, 2, seed).validate(m);
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (!ok) failed.push_back("partition laws");
  }
  {  // perturb moments
    RngStream rng(123);
    const int draws = 100000;
    const double variance = 0.04;
    double sum = 0, sum2 = 0;
    for (int t = 0; t < draws; ++t) {
      const double g = perturb(ParamVector(1), variance, rng)[0];
      sum += g;
      sum2 += g * g;
    }
    const double mean = sum / draws, var = sum2 / draws - mean * mean;
    if (std::abs(mean) > 3.0 * std::sqrt(variance / draws) || std::abs(var - variance) > 0.05 * variance)
      failed.push_back("perturb moments");
  }
  {  // k* uniform at zeta = 0
    RngStream rng(17);
    const int draws = 100000;
    std::vector<int> counts(10, 0);
    for (int t = 0; t < draws; ++t) ++counts[sample_kstar(0.0, 10, rng)];
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - draws / 10.0) * (c - draws / 10.0) / (draws / 10.0);
    if (!(chi2 < 21.666)) failed.push_back(fmt("k* chi-square %.2f", chi2));
  }
  {  // single client, single step, full batch: plain gradient descent
    SyntheticRegressionSpec spec;
    spec.m = 200;
    spec.d = 6;
    const auto reg = generate_regression(spec, 7);
    const LossModel model = make_mse_model(reg.dataset);
    ClientPartition p;
    p.shards.push_back(reg.dataset.all_indices());
    FedAvgConfig c;
    c.n = c.r = c.local_steps = 1;
    c.rounds = 5;
    c.batch_size = reg.dataset.size();
    c.learning_rate_override = 0.3;
    const RunResult res = run_noisy_fedavg(c, model, p, reg.dataset);
    ParamVector w(6);
    for (int k = 0; k < 5; ++k) w.add_scaled(full_gradient(model, w, reg.dataset), -0.3);
    if (!(res.final_params == w)) failed.push_back("degeneracy to gradient descent");
  }
  {  // a full preset run, twice, serialized
    ExperimentConfig c = preset("v5a_snr_control");
    c.repeat_seeds = {1};
    std::string first;
    for (int pass = 0; pass < 2; ++pass) {
      const Problem p = build_problem(c);
      const auto results = run_seeds(c, p, c.repeat_seeds, 1);
      const std::string bytes = metrics_csv(results[0].metrics) + build_summary(c, p, results).dump(2);
      if (pass == 0) first = bytes;
      else if (bytes != first) failed.push_back("byte determinism");
    }
  }

  std::string detail = "finite differences, partition laws, perturb moments, k* uniformity, "
                       "GD degeneracy, byte determinism";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  report(8, failed.empty(), detail, sw.seconds());
}

void criterion9() {
  Stopwatch sw;
  bool ok = true;
  std::string detail;
  for (double g : {1.0, 10.0, 100.0}) {
    const double w = bcd_witness(g, 50);
    const double gap = bcd_gap(w, 50);
    ok = ok && gap > g * g;
    detail += fmtn("G=%g: gap %.6g > %.6g; ", g, gap, g * g);
  }
  report(9, ok, detail.substr(0, detail.size() - 2), sw.seconds());
}

}  // namespace

int main() {
  criterion1();
  criterion2_3_4();
  criterion5();
  criterion6();
  criterion7();
  criterion8();
  criterion9();
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
