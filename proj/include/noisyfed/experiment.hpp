#pragma once

// Experiment configuration, output files and the subcommands behind the
// noisyfed executable.
//
// Configs are JSON objects with nested sections; every key is optional and
// unknown keys are rejected. Semantic errors carry the line of the offending
// key.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "noisyfed/algorithms.hpp"
#include "noisyfed/channel.hpp"
#include "noisyfed/core_model.hpp"
#include "noisyfed/data_synth.hpp"
#include "noisyfed/format.hpp"
#include "noisyfed/theory.hpp"

namespace noisyfed {

using json = nlohmann::ordered_json;

enum class TaskChoice { regression_v5a, classification_synth };
enum class ModeChoice { fedavg, sgd };
enum class PartitionChoice { iid, label_shard };

struct DataSection {
  std::size_t m = 15000;
  std::size_t d = 60;
  double label_noise_variance = 0.05;
  bool normalize_hessian = true;
  std::size_t classes = 10;
  double cluster_separation = 3.0;
  PartitionChoice partition = PartitionChoice::iid;
  std::size_t labels_per_client = 2;
  std::uint64_t seed = 0;  // dataset and partition; training seeds are separate

  friend bool operator==(const DataSection&, const DataSection&) = default;
};

struct FedAvgSection {
  std::size_t n = 50;
  std::size_t r = 10;
  std::size_t local_steps = 5;
  std::size_t rounds = 100;
  double gamma = 18.0;
  std::size_t batch_size = 16;
  std::optional<double> learning_rate;  // theory step size when absent
  UplinkNoiseScaling uplink_noise_scaling = UplinkNoiseScaling::learning_rate;
  std::size_t threads = 1;

  friend bool operator==(const FedAvgSection&, const FedAvgSection&) = default;
};

struct SgdSection {
  double learning_rate = 0.5;
  std::size_t iterations = 1000;
  std::size_t batch_size = 16;

  friend bool operator==(const SgdSection&, const SgdSection&) = default;
};

struct TheorySection {
  std::size_t sigma2_trials = 100;

  friend bool operator==(const TheorySection&, const TheorySection&) = default;
};

struct ExperimentConfig {
  TaskChoice task = TaskChoice::regression_v5a;
  ModeChoice mode = ModeChoice::fedavg;
  DataSection data;
  FedAvgSection fedavg;
  SgdSection sgd;
  NoiseSchedule uplink = NoiseSchedule::off(Direction::uplink);
  NoiseSchedule downlink = NoiseSchedule::off(Direction::downlink);
  TheorySection theory;
  std::vector<std::uint64_t> repeat_seeds{1, 2, 3};
  std::string output = "noisyfed_out/run";

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Invalid configuration; `line` is 1-based, 0 when unknown.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, std::size_t line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
        line_(line) {}
  [[nodiscard]] std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// enum names

namespace detail {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<TaskChoice> kTaskNames[] = {
    {TaskChoice::regression_v5a, "regression_v5a"},
    {TaskChoice::classification_synth, "classification_synth"}};
inline constexpr EnumName<ModeChoice> kModeNames[] = {{ModeChoice::fedavg, "fedavg"},
                                                      {ModeChoice::sgd, "sgd"}};
inline constexpr EnumName<PartitionChoice> kPartitionNames[] = {
    {PartitionChoice::iid, "iid"}, {PartitionChoice::label_shard, "label_shard"}};
inline constexpr EnumName<UplinkNoiseScaling> kScalingNames[] = {
    {UplinkNoiseScaling::learning_rate, "learning_rate"}, {UplinkNoiseScaling::none, "none"}};
inline constexpr EnumName<ScheduleKind> kScheduleNames[] = {{ScheduleKind::off, "off"},
                                                            {ScheduleKind::constant, "constant"},
                                                            {ScheduleKind::poly_decay, "poly_decay"}};

template <class E, std::size_t N>
const char* name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& entry : table)
    if (entry.value == v) return entry.name;
  return "?";
}

// ---------------------------------------------------------------------------
// strict JSON reading with line lookup

inline std::size_t line_at_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + offset, '\n'));
}

/// Line of the key reached by following `path` through the source text: each
/// component is searched for as "name": after the previous one.
inline std::size_t line_of_path(std::string_view text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const auto& key : path) {
    if (!key.empty() && std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; }))
      continue;
    const std::string quoted = "\"" + key + "\"";
    std::size_t found = pos;
    while (true) {
      found = text.find(quoted, found);
      if (found == std::string_view::npos) return 0;
      std::size_t after = found + quoted.size();
      while (after < text.size() && (text[after] == ' ' || text[after] == '\t' ||
                                     text[after] == '\n' || text[after] == '\r'))
        ++after;
      if (after < text.size() && text[after] == ':') break;
      found += quoted.size();
    }
    pos = found;
  }
  return line_at_offset(text, pos);
}

class ConfigReader {
 public:
  explicit ConfigReader(std::string_view text) : text_(text) {}

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& message) const {
    std::string dotted;
    for (const auto& p : path) dotted += (dotted.empty() ? "" : ".") + p;
    throw ConfigError((dotted.empty() ? "" : dotted + ": ") + message, line_of_path(text_, path));
  }

  void allow_only(const json& obj, const std::vector<std::string>& path,
                  std::initializer_list<std::string_view> keys) const {
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& item : obj.items()) {
      if (std::find(keys.begin(), keys.end(), item.key()) == keys.end()) {
        auto p = path;
        p.push_back(item.key());
        fail(p, "unknown key");
      }
    }
  }

  template <class T>
  void read(const json& obj, std::vector<std::string> path, const char* key, T& out) const {
    if (!obj.contains(key)) return;
    path.emplace_back(key);
    const json& v = obj.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(path, "expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) fail(path, "expected a number");
      out = v.get<double>();
      if (!std::isfinite(out)) fail(path, "expected a finite number");
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      if (v.is_null()) {
        out.reset();
      } else {
        if (!v.is_number()) fail(path, "expected a number or null");
        out = v.get<double>();
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(path, "expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) fail(path, "expected a non-negative integer");
      out = v.get<T>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  template <class E, std::size_t N>
  void read_enum(const json& obj, std::vector<std::string> path, const char* key,
                 const EnumName<E> (&table)[N], E& out) const {
    if (!obj.contains(key)) return;
    path.emplace_back(key);
    const json& v = obj.at(key);
    if (v.is_string()) {
      for (const auto& entry : table)
        if (v.get<std::string>() == entry.name) {
          out = entry.value;
          return;
        }
    }
    std::string allowed;
    for (const auto& entry : table) allowed += (allowed.empty() ? "" : ", ") + std::string(entry.name);
    fail(path, "expected one of: " + allowed);
  }

 private:
  std::string_view text_;
};

inline json schedule_to_json(const NoiseSchedule& s) {
  json j;
  j["kind"] = name_of(kScheduleNames, s.kind);
  j["base_std"] = s.base_std;
  j["decay_exponent"] = s.decay_exponent;
  j["e_squared_scaling"] = s.e_squared_scaling;
  return j;
}

inline NoiseSchedule schedule_from_json(const ConfigReader& rd, const json& j,
                                        const std::vector<std::string>& path, Direction dir) {
  rd.allow_only(j, path, {"kind", "base_std", "decay_exponent", "e_squared_scaling"});
  NoiseSchedule s = NoiseSchedule::off(dir);
  rd.read_enum(j, path, "kind", kScheduleNames, s.kind);
  rd.read(j, path, "base_std", s.base_std);
  rd.read(j, path, "decay_exponent", s.decay_exponent);
  rd.read(j, path, "e_squared_scaling", s.e_squared_scaling);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    auto p = path;
    const std::string what = e.what();
    p.push_back(what.find("decay") != std::string::npos     ? "decay_exponent"
                : what.find("e_squared") != std::string::npos ? "e_squared_scaling"
                                                              : "base_std");
    rd.fail(p, what);
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// parse / serialize

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["task"] = detail::name_of(detail::kTaskNames, c.task);
  j["mode"] = detail::name_of(detail::kModeNames, c.mode);
  json& d = j["data"];
  d["m"] = c.data.m;
  d["d"] = c.data.d;
  d["label_noise_variance"] = c.data.label_noise_variance;
  d["normalize_hessian"] = c.data.normalize_hessian;
  d["classes"] = c.data.classes;
  d["cluster_separation"] = c.data.cluster_separation;
  d["partition"] = detail::name_of(detail::kPartitionNames, c.data.partition);
  d["labels_per_client"] = c.data.labels_per_client;
  d["seed"] = c.data.seed;
  json& f = j["fedavg"];
  f["n"] = c.fedavg.n;
  f["r"] = c.fedavg.r;
  f["local_steps"] = c.fedavg.local_steps;
  f["rounds"] = c.fedavg.rounds;
  f["gamma"] = c.fedavg.gamma;
  f["batch_size"] = c.fedavg.batch_size;
  f["learning_rate"] = c.fedavg.learning_rate ? json(*c.fedavg.learning_rate) : json(nullptr);
  f["uplink_noise_scaling"] = detail::name_of(detail::kScalingNames, c.fedavg.uplink_noise_scaling);
  f["threads"] = c.fedavg.threads;
  json& s = j["sgd"];
  s["learning_rate"] = c.sgd.learning_rate;
  s["iterations"] = c.sgd.iterations;
  s["batch_size"] = c.sgd.batch_size;
  j["channel"]["uplink"] = detail::schedule_to_json(c.uplink);
  j["channel"]["downlink"] = detail::schedule_to_json(c.downlink);
  j["theory"]["sigma2_trials"] = c.theory.sigma2_trials;
  j["repeat_seeds"] = c.repeat_seeds;
  j["output"] = c.output;
  return j;
}

inline std::string serialize_config(const ExperimentConfig& c) {
  return config_to_json(c).dump(2) + "\n";
}

/// Parses and validates a config document. Throws ConfigError.
inline ExperimentConfig parse_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what(),
                      detail::line_at_offset(text, e.byte > 0 ? e.byte - 1 : 0));
  }
  const detail::ConfigReader rd(text);
  ExperimentConfig c;
  rd.allow_only(root, {}, {"task", "mode", "data", "fedavg", "sgd", "channel", "theory",
                           "repeat_seeds", "output"});
  rd.read_enum(root, {}, "task", detail::kTaskNames, c.task);
  rd.read_enum(root, {}, "mode", detail::kModeNames, c.mode);

  if (root.contains("data")) {
    const json& d = root["data"];
    const std::vector<std::string> p{"data"};
    rd.allow_only(d, p, {"m", "d", "label_noise_variance", "normalize_hessian", "classes",
                         "cluster_separation", "partition", "labels_per_client", "seed"});
    rd.read(d, p, "m", c.data.m);
    rd.read(d, p, "d", c.data.d);
    rd.read(d, p, "label_noise_variance", c.data.label_noise_variance);
    rd.read(d, p, "normalize_hessian", c.data.normalize_hessian);
    rd.read(d, p, "classes", c.data.classes);
    rd.read(d, p, "cluster_separation", c.data.cluster_separation);
    rd.read_enum(d, p, "partition", detail::kPartitionNames, c.data.partition);
    rd.read(d, p, "labels_per_client", c.data.labels_per_client);
    rd.read(d, p, "seed", c.data.seed);
  }
  if (root.contains("fedavg")) {
    const json& f = root["fedavg"];
    const std::vector<std::string> p{"fedavg"};
    rd.allow_only(f, p, {"n", "r", "local_steps", "rounds", "gamma", "batch_size", "learning_rate",
                         "uplink_noise_scaling", "threads"});
    rd.read(f, p, "n", c.fedavg.n);
    rd.read(f, p, "r", c.fedavg.r);
    rd.read(f, p, "local_steps", c.fedavg.local_steps);
    rd.read(f, p, "rounds", c.fedavg.rounds);
    rd.read(f, p, "gamma", c.fedavg.gamma);
    rd.read(f, p, "batch_size", c.fedavg.batch_size);
    rd.read(f, p, "learning_rate", c.fedavg.learning_rate);
    rd.read_enum(f, p, "uplink_noise_scaling", detail::kScalingNames, c.fedavg.uplink_noise_scaling);
    rd.read(f, p, "threads", c.fedavg.threads);
  }
  if (root.contains("sgd")) {
    const json& s = root["sgd"];
    const std::vector<std::string> p{"sgd"};
    rd.allow_only(s, p, {"learning_rate", "iterations", "batch_size"});
    rd.read(s, p, "learning_rate", c.sgd.learning_rate);
    rd.read(s, p, "iterations", c.sgd.iterations);
    rd.read(s, p, "batch_size", c.sgd.batch_size);
  }
  if (root.contains("channel")) {
    const json& ch = root["channel"];
    rd.allow_only(ch, {"channel"}, {"uplink", "downlink"});
    if (ch.contains("uplink"))
      c.uplink = detail::schedule_from_json(rd, ch["uplink"], {"channel", "uplink"}, Direction::uplink);
    if (ch.contains("downlink"))
      c.downlink =
          detail::schedule_from_json(rd, ch["downlink"], {"channel", "downlink"}, Direction::downlink);
  }
  if (root.contains("theory")) {
    const json& t = root["theory"];
    rd.allow_only(t, {"theory"}, {"sigma2_trials"});
    rd.read(t, {"theory"}, "sigma2_trials", c.theory.sigma2_trials);
  }
  if (root.contains("repeat_seeds")) {
    const json& seeds = root["repeat_seeds"];
    if (!seeds.is_array()) rd.fail({"repeat_seeds"}, "expected an array of integers");
    c.repeat_seeds.clear();
    for (const auto& s : seeds) {
      if (!s.is_number_unsigned()) rd.fail({"repeat_seeds"}, "seeds must be non-negative integers");
      c.repeat_seeds.push_back(s.get<std::uint64_t>());
    }
  }
  rd.read(root, {}, "output", c.output);

  // cross-field checks
  const auto& D = c.data;
  const auto& F = c.fedavg;
  if (D.d < 1) rd.fail({"data", "d"}, "must be >= 1");
  if (D.m < D.d) rd.fail({"data", "m"}, "need m >= d");
  if (!(D.label_noise_variance >= 0.0)) rd.fail({"data", "label_noise_variance"}, "must be >= 0");
  if (c.task == TaskChoice::classification_synth) {
    if (D.classes < 2) rd.fail({"data", "classes"}, "need at least 2 classes");
    if (!(D.cluster_separation >= 0.0)) rd.fail({"data", "cluster_separation"}, "must be >= 0");
  }
  if (D.partition == PartitionChoice::label_shard) {
    if (c.task != TaskChoice::classification_synth)
      rd.fail({"data", "partition"}, "label_shard needs task classification_synth");
    if (D.labels_per_client < 1) rd.fail({"data", "labels_per_client"}, "must be >= 1");
    if (F.n * D.labels_per_client < D.classes)
      rd.fail({"data", "labels_per_client"}, "n * labels_per_client must cover every class");
  }
  if (F.n < 1) rd.fail({"fedavg", "n"}, "must be >= 1");
  if (F.r < 1 || F.r > F.n) rd.fail({"fedavg", "r"}, "need 1 <= r <= n");
  if (F.local_steps < 1) rd.fail({"fedavg", "local_steps"}, "must be >= 1");
  if (F.rounds < 1) rd.fail({"fedavg", "rounds"}, "must be >= 1");
  if (!(F.gamma > 4.0)) rd.fail({"fedavg", "gamma"}, "must exceed 4");
  if (F.batch_size < 1) rd.fail({"fedavg", "batch_size"}, "must be >= 1");
  if (F.learning_rate && !(*F.learning_rate > 0.0))
    rd.fail({"fedavg", "learning_rate"}, "must be positive or null");
  if (F.threads < 1) rd.fail({"fedavg", "threads"}, "must be >= 1");
  if (c.mode == ModeChoice::fedavg) {
    if (D.m < F.n) rd.fail({"fedavg", "n"}, "more clients than examples");
    if (F.batch_size > D.m / F.n) rd.fail({"fedavg", "batch_size"}, "larger than the smallest shard");
  }
  if (!(c.sgd.learning_rate > 0.0)) rd.fail({"sgd", "learning_rate"}, "must be positive");
  if (c.sgd.iterations < 1) rd.fail({"sgd", "iterations"}, "must be >= 1");
  if (c.sgd.batch_size < 1 || c.sgd.batch_size > D.m)
    rd.fail({"sgd", "batch_size"}, "must lie in [1, m]");
  if (c.theory.sigma2_trials < 1) rd.fail({"theory", "sigma2_trials"}, "must be >= 1");
  if (c.repeat_seeds.empty()) rd.fail({"repeat_seeds"}, "need at least one seed");
  if (c.output.empty()) rd.fail({"output"}, "must not be empty");
  return c;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text_file(path));
}

// ---------------------------------------------------------------------------
// output files

inline constexpr std::string_view kMetricsHeader =
    "round,train_loss,grad_norm_sq,uplink_var,downlink_var,snr_up,snr_down,diverged";

inline std::string metrics_csv(const std::vector<RoundMetrics>& rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& m : rows) {
    out += std::to_string(m.round);
    out += ',' + format_fixed_sig(m.train_loss);
    out += ',' + format_fixed_sig(m.grad_norm_sq);
    out += ',' + format_fixed_sig(m.uplink_variance);
    out += ',' + format_fixed_sig(m.downlink_variance);
    out += ',' + (m.mean_snr_up ? format_fixed_sig(*m.mean_snr_up) : std::string());
    out += ',' + (m.mean_snr_down ? format_fixed_sig(*m.mean_snr_down) : std::string());
    out += m.diverged ? ",1\n" : ",0\n";
  }
  return out;
}

/// Writes every file or none: contents go to temporaries that are renamed
/// once all writes succeed.
inline void write_files_atomically(const std::vector<std::pair<std::filesystem::path, std::string>>& files) {
  namespace fs = std::filesystem;
  std::vector<fs::path> temps;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& t : temps) fs::remove(t, ec);
  };
  for (const auto& [path, content] : files) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    fs::path tmp = path;
    tmp += ".tmp";
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      cleanup();
      throw IoError("cannot write " + path.string());
    }
    temps.push_back(tmp);
    out << content;
    out.close();
    if (!out) {
      cleanup();
      throw IoError("write failed for " + path.string());
    }
  }
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::error_code ec;
    fs::rename(temps[i], files[i].first, ec);
    if (ec) {
      cleanup();
      throw IoError("cannot move " + temps[i].string() + " into place: " + ec.message());
    }
  }
}

// ---------------------------------------------------------------------------
// experiment execution

struct Problem {
  Dataset data;
  LossModel model;
  ClientPartition partition;
};

inline Problem build_problem(const ExperimentConfig& c) {
  Problem p;
  if (c.task == TaskChoice::regression_v5a) {
    SyntheticRegressionSpec spec;
    spec.m = c.data.m;
    spec.d = c.data.d;
    spec.label_noise_variance = c.data.label_noise_variance;
    spec.normalize_hessian = c.data.normalize_hessian;
    p.data = generate_regression(spec, c.data.seed).dataset;
    p.model = make_mse_model(p.data);
  } else {
    p.data = generate_classification(c.data.m, c.data.d, c.data.classes, c.data.cluster_separation,
                                     c.data.seed);
    p.model = make_softmax_model(p.data);
  }
  if (c.mode == ModeChoice::fedavg) {
    p.partition = c.data.partition == PartitionChoice::iid
                      ? partition_iid(p.data.size(), c.fedavg.n, c.data.seed)
                      : partition_label_shard(p.data, c.fedavg.n, c.data.labels_per_client,
                                              c.data.seed);
  } else {
    p.partition.shards.push_back(p.data.all_indices());
  }
  return p;
}

inline FedAvgConfig make_fedavg_config(const ExperimentConfig& c, std::uint64_t seed) {
  FedAvgConfig f;
  f.n = c.fedavg.n;
  f.r = c.fedavg.r;
  f.local_steps = c.fedavg.local_steps;
  f.rounds = c.fedavg.rounds;
  f.gamma = c.fedavg.gamma;
  f.batch_size = c.fedavg.batch_size;
  f.seed = seed;
  f.learning_rate_override = c.fedavg.learning_rate;
  f.uplink = c.uplink;
  f.downlink = c.downlink;
  f.uplink_noise_scaling = c.fedavg.uplink_noise_scaling;
  f.threads = c.fedavg.threads;
  return f;
}

inline RunResult run_single(const ExperimentConfig& c, const Problem& p, std::uint64_t seed) {
  if (c.mode == ModeChoice::fedavg)
    return run_noisy_fedavg(make_fedavg_config(c, seed), p.model, p.partition, p.data);
  return run_noisy_sgd(p.model, p.data, c.sgd.learning_rate, c.sgd.iterations, c.sgd.batch_size,
                       c.uplink, c.downlink, seed);
}

/// Cap on concurrently simulated seeds, from NOISYFED_THREADS.
inline std::size_t max_parallel_seeds() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NOISYFED_THREADS")) {
    try {
      const double v = parse_double(env);
      if (v >= 1.0) cap = static_cast<std::size_t>(v);
    } catch (const std::invalid_argument&) {
    }
  }
  return cap;
}

inline std::vector<RunResult> run_seeds(const ExperimentConfig& c, const Problem& p,
                                        const std::vector<std::uint64_t>& seeds,
                                        std::size_t parallel) {
  std::vector<RunResult> results(seeds.size());
  detail::for_each_slot(seeds.size(), parallel,
                        [&](std::size_t s) { results[s] = run_single(c, p, seeds[s]); });
  return results;
}

/// Final train loss of a run; NaN for diverged runs.
inline double final_loss(const RunResult& r) {
  if (!r.completed() || r.metrics.empty()) return std::nan("");
  return r.metrics.back().train_loss;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t count = 0;
};

inline MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  double sum = 0.0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++out.count;
    }
  if (out.count == 0) {
    out.mean = std::nan("");
    return out;
  }
  out.mean = sum / static_cast<double>(out.count);
  double ss = 0.0;
  for (double v : values)
    if (std::isfinite(v)) ss += (v - out.mean) * (v - out.mean);
  out.std = out.count > 1 ? std::sqrt(ss / static_cast<double>(out.count - 1)) : 0.0;
  return out;
}

/// Sum over rounds of d * variance_at(k): the total expected squared noise norm.
inline double schedule_sum(const NoiseSchedule& s, std::size_t rounds, std::size_t local_steps,
                           std::size_t dim) {
  double total = 0.0;
  for (std::size_t k = 0; k < rounds; ++k) total += variance_at(s, k, local_steps);
  return total * static_cast<double>(dim);
}

/// Probability-weighted mean of grad_norm_sq under the k* distribution.
inline double weighted_grad_norm(const RunResult& r) {
  const std::size_t rounds = r.completed() ? r.metrics.size() : r.metrics.size() - 1;
  if (rounds == 0) return std::nan("");
  const auto prob = kstar_distribution(r.zeta, rounds);
  double acc = 0.0;
  for (std::size_t k = 0; k < rounds; ++k) acc += prob[k] * r.metrics[k].grad_norm_sq;
  return acc;
}

/// Theory parameters for a FedAvg config, with sigma^2 measured at `probes`.
inline TheoryParams theory_params(const ExperimentConfig& c, const Problem& p,
                                  std::span<const ParamVector> probes) {
  const std::size_t dim = p.model.param_dim();
  TheoryParams t;
  t.n = static_cast<double>(c.fedavg.n);
  t.r = static_cast<double>(c.fedavg.r);
  t.local_steps = static_cast<double>(c.fedavg.local_steps);
  t.rounds = static_cast<double>(c.fedavg.rounds);
  t.gamma = c.fedavg.gamma;
  t.smoothness = p.model.smoothness;
  t.eta = c.fedavg.learning_rate.value_or(
      learning_rate(t.gamma, t.smoothness, t.local_steps, t.r, t.rounds));
  t.sigma2 = empirical_sigma2(p.model, p.partition, p.data, probes, c.fedavg.batch_size,
                              c.theory.sigma2_trials, c.data.seed);
  t.f0 = loss(p.model, ParamVector(dim), p.data);
  t.sum_uplink = schedule_sum(c.uplink, c.fedavg.rounds, c.fedavg.local_steps, dim);
  t.sum_downlink = schedule_sum(c.downlink, c.fedavg.rounds, c.fedavg.local_steps, dim);
  return t;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json bound_to_json(const BoundReport& b) {
  json j;
  j["leading"] = b.leading;
  j["term_uplink"] = b.term_uplink;
  j["term_sgd_variance"] = b.term_sgd_variance;
  j["term_downlink"] = b.term_downlink;
  j["total"] = b.total;
  j["zeta"] = b.zeta;
  j["zeta2"] = b.zeta2;
  j["zeta3"] = b.zeta3;
  j["min_rounds"] = b.min_rounds;
  j["warnings"] = b.warnings;
  return j;
}

inline std::filesystem::path metrics_path(const std::string& prefix, std::uint64_t seed) {
  return prefix + "_seed" + std::to_string(seed) + ".csv";
}

inline std::filesystem::path summary_path(const std::string& prefix) {
  return prefix + "_summary.json";
}

/// Summary document for a set of seed runs. Includes the convergence bound
/// when the run uses the prescribed FedAvg step size.
inline json build_summary(const ExperimentConfig& c, const Problem& p,
                          const std::vector<RunResult>& results) {
  json j;
  j["config"] = config_to_json(c);
  j["smoothness"] = p.model.smoothness;
  std::vector<double> finals;
  json runs = json::array();
  for (std::size_t s = 0; s < results.size(); ++s) {
    const RunResult& r = results[s];
    json run;
    run["seed"] = c.repeat_seeds[s];
    run["metrics_file"] = metrics_path(c.output, c.repeat_seeds[s]).string();
    run["status"] = r.completed() ? "completed" : "diverged";
    run["diverged_at"] = r.diverged_at ? json(*r.diverged_at) : json(nullptr);
    run["learning_rate"] = r.learning_rate;
    run["k_star"] = r.k_star;
    run["final_train_loss"] = number_or_null(final_loss(r));
    const double final_server =
        r.completed() && !r.metrics.empty() ? r.metrics.back().server_loss : std::nan("");
    run["final_server_loss"] = number_or_null(final_server);
    run["weighted_grad_norm_sq"] = number_or_null(weighted_grad_norm(r));
    run["warnings"] = r.warnings;
    runs.push_back(std::move(run));
    finals.push_back(final_loss(r));
  }
  const MeanStd ms = mean_std(finals);
  j["final_loss_mean"] = number_or_null(ms.mean);
  j["final_loss_std"] = number_or_null(ms.count > 0 ? ms.std : std::nan(""));
  j["runs"] = std::move(runs);

  if (c.mode == ModeChoice::fedavg && !c.fedavg.learning_rate && c.fedavg.n >= 2) {
    std::vector<ParamVector> probes{ParamVector(p.model.param_dim())};
    for (const auto& r : results)
      if (r.completed()) probes.push_back(r.final_params);
    const TheoryParams t = theory_params(c, p, probes);
    const BoundReport b = theorem2_bound(t);
    json bound = bound_to_json(b);
    bound["sigma2"] = t.sigma2;
    bound["f0"] = t.f0;
    bound["sum_uplink"] = t.sum_uplink;
    bound["sum_downlink"] = t.sum_downlink;
    std::size_t violations = 0;
    for (const auto& r : results)
      if (r.completed() && weighted_grad_norm(r) > b.total) ++violations;
    bound["violations"] = violations;
    j["bound"] = std::move(bound);
  }
  return j;
}

// ---------------------------------------------------------------------------
// subcommands; each returns the process exit status

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalidConfig = 2;
inline constexpr int kExitIo = 3;

namespace detail {

template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "invalid config: " << e.what() << '\n';
    return kExitInvalidConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "invalid config: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
}

inline ExperimentConfig load_with_overrides(const std::filesystem::path& path,
                                            const std::optional<std::string>& out_prefix,
                                            const std::optional<std::uint64_t>& seed_override) {
  ExperimentConfig c = load_config(path);
  if (out_prefix) c.output = *out_prefix;
  if (seed_override) c.repeat_seeds = {*seed_override};
  return c;
}

}  // namespace detail

struct CommonOptions {
  std::filesystem::path config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed_override;
};

inline int cmd_run(const CommonOptions& opt, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const ExperimentConfig c = detail::load_with_overrides(opt.config, opt.out, opt.seed_override);
    const Problem p = build_problem(c);
    const auto results = run_seeds(c, p, c.repeat_seeds, max_parallel_seeds());
    std::vector<std::pair<std::filesystem::path, std::string>> files;
    for (std::size_t s = 0; s < results.size(); ++s)
      files.emplace_back(metrics_path(c.output, c.repeat_seeds[s]), metrics_csv(results[s].metrics));
    const json summary = build_summary(c, p, results);
    files.emplace_back(summary_path(c.output), summary.dump(2) + "\n");
    write_files_atomically(files);
    for (std::size_t s = 0; s < results.size(); ++s) {
      const auto& r = results[s];
      out << "seed " << c.repeat_seeds[s] << ": ";
      if (r.completed())
        out << "final train loss " << format_roundtrip(final_loss(r)) << ", k* = " << r.k_star;
      else
        out << "diverged at round " << *r.diverged_at;
      out << '\n';
      for (const auto& w : r.warnings) err << "warning (seed " << c.repeat_seeds[s] << "): " << w << '\n';
    }
    out << "summary: " << summary_path(c.output).string() << '\n';
    return kExitOk;
  });
}

enum class SweepAxis { r, E };

struct SweepRow {
  std::size_t value = 0;
  std::string variant;
  double final_loss = 0.0;  // mean over seeds
  double final_loss_std = 0.0;
  double excess = 0.0;      // over the noise-free mean at the same value
};

/// Noise-free, uplink-only and downlink-only runs at every axis value; the
/// noisy variants reuse the config's schedules for their link.
inline std::vector<SweepRow> sweep_rows(const ExperimentConfig& base, SweepAxis axis,
                                        const std::vector<std::size_t>& values,
                                        std::size_t parallel) {
  if (base.mode != ModeChoice::fedavg) throw std::invalid_argument("sweep: needs mode fedavg");
  if (base.uplink.kind == ScheduleKind::off || base.downlink.kind == ScheduleKind::off)
    throw std::invalid_argument("sweep: both channel schedules must be on");
  if (values.empty()) throw std::invalid_argument("sweep: no values");
  for (std::size_t v : values) {
    if (axis == SweepAxis::r && (v < 1 || v > base.fedavg.n))
      throw std::invalid_argument("sweep: r = " + std::to_string(v) + " outside [1, n]");
    if (axis == SweepAxis::E && v < 1) throw std::invalid_argument("sweep: E must be >= 1");
  }
  const Problem p = build_problem(base);
  const char* names[] = {"noise_free", "uplink_only", "downlink_only"};

  struct Job {
    ExperimentConfig config;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t v : values)
    for (int variant = 0; variant < 3; ++variant)
      for (std::uint64_t seed : base.repeat_seeds) {
        ExperimentConfig c = base;
        (axis == SweepAxis::r ? c.fedavg.r : c.fedavg.local_steps) = v;
        if (variant != 1) c.uplink = NoiseSchedule::off(Direction::uplink);
        if (variant != 2) c.downlink = NoiseSchedule::off(Direction::downlink);
        jobs.push_back({std::move(c), seed});
      }
  std::vector<double> finals(jobs.size());
  detail::for_each_slot(jobs.size(), parallel, [&](std::size_t j) {
    finals[j] = final_loss(run_single(jobs[j].config, p, jobs[j].seed));
  });

  std::vector<SweepRow> rows;
  const std::size_t seeds = base.repeat_seeds.size();
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    double baseline = 0.0;
    for (int variant = 0; variant < 3; ++variant) {
      const std::size_t start = (vi * 3 + static_cast<std::size_t>(variant)) * seeds;
      const MeanStd ms = mean_std(std::vector<double>(finals.begin() + static_cast<std::ptrdiff_t>(start),
                                                      finals.begin() + static_cast<std::ptrdiff_t>(start + seeds)));
      if (variant == 0) baseline = ms.mean;
      rows.push_back({values[vi], names[variant], ms.mean, ms.std, ms.mean - baseline});
    }
  }
  return rows;
}

inline std::string sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::string out = axis == SweepAxis::r ? "r" : "E";
  out += ",variant,final_loss,excess,final_loss_std\n";
  for (const auto& row : rows)
    out += std::to_string(row.value) + ',' + row.variant + ',' + format_fixed_sig(row.final_loss) +
           ',' + format_fixed_sig(row.excess) + ',' + format_fixed_sig(row.final_loss_std) + '\n';
  return out;
}

inline int cmd_sweep(const CommonOptions& opt, SweepAxis axis, const std::vector<std::size_t>& values,
                     std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const ExperimentConfig c = detail::load_with_overrides(opt.config, opt.out, opt.seed_override);
    const auto rows = sweep_rows(c, axis, values, max_parallel_seeds());
    const std::string csv = sweep_csv(axis, rows);
    const std::filesystem::path path =
        c.output + (axis == SweepAxis::r ? "_sweep_r.csv" : "_sweep_E.csv");
    write_files_atomically({{path, csv}});
    out << csv;
    return kExitOk;
  });
}

inline void print_bound(std::ostream& out, const BoundReport& b, bool csv) {
  const std::pair<const char*, double> rows[] = {
      {"leading", b.leading},         {"term_uplink", b.term_uplink},
      {"term_sgd_variance", b.term_sgd_variance}, {"term_downlink", b.term_downlink},
      {"total", b.total},             {"zeta", b.zeta},
      {"zeta2", b.zeta2},             {"zeta3", b.zeta3},
      {"min_rounds", b.min_rounds}};
  if (csv) out << "quantity,value\n";
  for (const auto& [name, value] : rows)
    out << name << (csv ? "," : " = ") << format_roundtrip(value) << '\n';
}

inline int cmd_bounds(const CommonOptions& opt, bool csv, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const ExperimentConfig c = detail::load_with_overrides(opt.config, opt.out, opt.seed_override);
    if (c.mode != ModeChoice::fedavg) throw std::invalid_argument("bounds: needs mode fedavg");
    if (c.fedavg.n < 2) throw std::invalid_argument("bounds: needs n >= 2");
    const Problem p = build_problem(c);
    const std::vector<ParamVector> probes{ParamVector(p.model.param_dim())};
    const TheoryParams t = theory_params(c, p, probes);
    const BoundReport b = theorem2_bound(t);
    print_bound(out, b, csv);
    if (!csv) {
      out << "eta = " << format_roundtrip(t.eta) << ", L = " << format_roundtrip(t.smoothness)
          << ", sigma^2 = " << format_roundtrip(t.sigma2) << ", f0 = " << format_roundtrip(t.f0)
          << '\n';
      out << "sum U^2 = " << format_roundtrip(t.sum_uplink)
          << ", sum N^2 = " << format_roundtrip(t.sum_downlink) << '\n';
    }
    for (const auto& w : b.warnings) err << "warning: " << w << '\n';
    return kExitOk;
  });
}

inline int cmd_power(std::size_t rounds, std::size_t local_steps, bool csv, std::ostream& out,
                     std::ostream& err) {
  if (rounds < 1 || local_steps < 1) {
    err << "power: K and E must be >= 1\n";
    return kExitInvalidConfig;
  }
  const PolicyComparison pc = compare_policies(rounds, local_steps);
  if (csv) {
    out << "link,ours,prior,ratio\n";
    out << "uplink," << format_roundtrip(pc.ours_uplink) << ',' << format_roundtrip(pc.prior_uplink)
        << ',' << format_roundtrip(pc.uplink_ratio) << '\n';
    out << "downlink," << format_roundtrip(pc.ours_downlink) << ','
        << format_roundtrip(pc.prior_downlink) << ',' << format_roundtrip(pc.downlink_ratio) << '\n';
    out << "total," << format_roundtrip(pc.ours_uplink + pc.ours_downlink) << ','
        << format_roundtrip(pc.prior_uplink + pc.prior_downlink) << ','
        << format_roundtrip(pc.total_ratio) << '\n';
    return kExitOk;
  }
  out << "power budget, K = " << rounds << ", E = " << local_steps << '\n';
  out << "  link       ours            prior           ours/prior\n";
  auto row = [&](const char* name, double ours, double prior, double ratio) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %-9s  %-14.6g  %-14.6g  %.6g\n", name, ours, prior, ratio);
    out << buf;
  };
  row("uplink", pc.ours_uplink, pc.prior_uplink, pc.uplink_ratio);
  row("downlink", pc.ours_downlink, pc.prior_downlink, pc.downlink_ratio);
  row("total", pc.ours_uplink + pc.ours_downlink, pc.prior_uplink + pc.prior_downlink,
      pc.total_ratio);
  return kExitOk;
}

inline int cmd_bcd_demo(std::size_t n, double bound_g, std::ostream& out, std::ostream& err) {
  if (n < 1 || !(bound_g > 0.0)) {
    err << "bcd-demo: need n >= 1 and G > 0\n";
    return kExitInvalidConfig;
  }
  if (n == 1) {
    out << "n = 1: gap identically 0 (f = f_1), no witness exists\n";
    return kExitOk;
  }
  const double w = bcd_witness(bound_g, n);
  const double gap = bcd_gap(w, n);
  out << "n = " << n << ", G = " << format_roundtrip(bound_g) << '\n';
  out << "w = " << format_roundtrip(w) << '\n';
  out << "gap = " << format_roundtrip(gap) << " > G^2 = " << format_roundtrip(bound_g * bound_g)
      << '\n';
  return kExitOk;
}

}  // namespace noisyfed
