#include "pyrvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pyrvit {

double macro_f1(const std::vector<int>& predictions, const std::vector<int>& labels,
                int n_classes) {
  check_arg(!labels.empty(), "empty input");
  check_arg(predictions.size() == labels.size(), "prediction/label count mismatch");
  check_arg(n_classes > 0, "n_classes must be positive");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_arg(labels[i] >= 0 && labels[i] < n_classes, "label outside [0, n_classes)");
  }

  double sum_f1 = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool pred_c = predictions[i] == c;
      const bool true_c = labels[i] == c;
      tp += pred_c && true_c;
      fp += pred_c && !true_c;
      fn += !pred_c && true_c;
    }
    // Absent classes (tp+fp+fn == 0) contribute F1 = 0.
    if (tp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
      sum_f1 += 2.0 * precision * recall / (precision + recall);
    }
  }
  return sum_f1 / static_cast<double>(n_classes);
}

double auroc(const std::vector<double>& scores, const std::vector<int>& binary_labels) {
  check_arg(scores.size() == binary_labels.size() && !scores.empty(), "bad AUROC inputs");
  std::int64_t n_pos = 0;
  for (int label : binary_labels) n_pos += label != 0;
  const std::int64_t n_neg = static_cast<std::int64_t>(binary_labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw NumericError("AUROC undefined: labels contain a single class");
  }

  // Average ranks over ties, then the Mann-Whitney statistic.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg_rank;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (binary_labels[k] != 0) rank_sum_pos += rank[k];
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auroc_ovr(const Mat& scores, const std::vector<int>& labels, int n_classes) {
  check_arg(scores.rows() == static_cast<Eigen::Index>(labels.size()), "score/label mismatch");
  check_arg(scores.cols() >= n_classes, "score columns < n_classes");
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> col(labels.size());
    std::vector<int> bin(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores(static_cast<Eigen::Index>(i), c);
      bin[i] = labels[i] == c;
    }
    total += auroc(col, bin);  // throws if class c is absent (or saturates)
  }
  return total / static_cast<double>(n_classes);
}

MetricReport bootstrap_metric(const std::string& name,
                              const std::function<double(const std::vector<int>&)>& metric_fn,
                              std::size_t n_items, int n_bootstrap, std::uint64_t seed) {
  check_arg(n_bootstrap >= 1, "n_bootstrap must be at least 1");
  check_arg(n_items > 0, "empty dataset");

  MetricReport report;
  report.metric = name;
  report.n_bootstrap = n_bootstrap;
  report.seed = seed;

  std::vector<int> full(n_items);
  std::iota(full.begin(), full.end(), 0);
  report.point = metric_fn(full);

  RngStream rng(seed);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(n_bootstrap));
  std::vector<int> resample(n_items);
  while (values.size() < static_cast<std::size_t>(n_bootstrap)) {
    for (std::size_t i = 0; i < n_items; ++i) {
      resample[i] = static_cast<int>(rng.randint(n_items));
    }
    try {
      values.push_back(metric_fn(resample));
    } catch (const NumericError&) {
      ++report.redrawn;  // degenerate resample (e.g. one class): draw again
    }
  }

  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var = values.size() > 1 ? var / static_cast<double>(values.size() - 1) : 0.0;

  report.boot_mean = mean;
  report.boot_std = std::sqrt(var);
  return report;
}

}  // namespace pyrvit
