#pragma once

#include "pyrvit/adaptation.hpp"
#include "pyrvit/bench.hpp"
#include "pyrvit/config.hpp"
#include "pyrvit/metrics.hpp"

namespace pyrvit {

// End-to-end evaluation bundle: synthetic data -> probe/MIL fitting ->
// bootstrapped metric reports -> throughput, written to one report
// directory.
struct SuiteConfig {
  std::string checkpoint;
  DataConfig data;
  int probe_train = 192;
  int probe_eval = 96;
  int probe_patch_size = 16;
  std::vector<std::string> probe_heads = {"linear", "attentive", "center-cell"};
  FitConfig fit;
  bool run_mil = true;
  int mil_train_bags = 24;
  int mil_eval_bags = 16;
  int mil_tiles_per_bag = 6;
  bool run_throughput = true;
  double bench_duration = 0.5;
  int bench_batch = 4;
  int n_bootstrap = 1000;
  std::uint64_t seed = 0;
  std::string cache_dir;  // defaults to <out_dir>/cache

  static SuiteConfig load(const std::string& path);
};

struct SuiteResult {
  std::vector<MetricReport> reports;      // per task/metric
  std::vector<ThroughputReport> bench;
  std::string report_dir;
};

SuiteResult run_benchmark_suite(const SuiteConfig& cfg, const std::string& out_dir);

void write_metric_csv(const std::string& path, const std::vector<MetricReport>& reports,
                      const std::vector<std::string>& tasks);
void write_throughput_csv(const std::string& path, const std::vector<ThroughputReport>& reports);

}  // namespace pyrvit
