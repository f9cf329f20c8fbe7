#pragma once

#include "pyrvit/common.hpp"
#include "pyrvit/rng.hpp"

#include <functional>
#include <string>
#include <vector>

namespace pyrvit {

// Unweighted mean of per-class F1. Classes absent from both predictions and
// labels contribute F1 = 0.
double macro_f1(const std::vector<int>& predictions, const std::vector<int>& labels,
                int n_classes);

// Mann-Whitney AUROC: probability a random positive outscores a random
// negative, ties counted half. Throws NumericError when only one class is
// present.
double auroc(const std::vector<double>& scores, const std::vector<int>& binary_labels);

// One-vs-rest macro average over class columns of `scores`.
double auroc_ovr(const Mat& scores, const std::vector<int>& labels, int n_classes);

struct MetricReport {
  std::string metric;
  double point = 0.0;
  double boot_mean = 0.0;
  double boot_std = 0.0;
  int n_bootstrap = 0;
  std::uint64_t seed = 0;
  int redrawn = 0;  // degenerate resamples that were redrawn
};

// n resamples with replacement at full dataset size. metric_fn receives the
// resampled indices; a NumericError marks the resample degenerate and it is
// redrawn so n stays exact.
MetricReport bootstrap_metric(const std::string& name,
                              const std::function<double(const std::vector<int>&)>& metric_fn,
                              std::size_t n_items, int n_bootstrap = 1000, std::uint64_t seed = 0);

}  // namespace pyrvit
