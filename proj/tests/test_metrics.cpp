#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pyrvit/metrics.hpp"

#include <numeric>

using namespace pyrvit;

TEST_CASE("macro-F1 worked examples") {
  CHECK(macro_f1({0, 1, 0, 1}, {0, 1, 0, 1}, 2) == doctest::Approx(1.0));

  // Per class TP=1, FP=1, FN=1: F1 = 0.5 for both classes.
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<int> preds = {0, 1, 0, 1};
  CHECK(macro_f1(preds, labels, 2) == doctest::Approx(0.5));

  // All predictions one class in a balanced binary set: (2/3 + 0) / 2.
  CHECK(macro_f1({0, 0, 0, 0}, {0, 0, 1, 1}, 2) == doctest::Approx(1.0 / 3.0));

  // A class absent from both predictions and labels contributes zero.
  CHECK(macro_f1({0, 1, 0, 1}, {0, 1, 0, 1}, 3) == doctest::Approx(2.0 / 3.0));

  CHECK_THROWS_AS(macro_f1({}, {}, 2), InvalidArgument);
  CHECK_THROWS_AS(macro_f1({0}, {5}, 2), InvalidArgument);
}

TEST_CASE("macro-F1 is sample-permutation invariant and relabeling equivariant") {
  RngStream rng(1);
  std::vector<int> labels(60), preds(60);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<int>(rng.randint(3));
    preds[i] = static_cast<int>(rng.randint(3));
  }
  const double base = macro_f1(preds, labels, 3);

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<int> labels_p(60), preds_p(60);
  for (std::size_t i = 0; i < order.size(); ++i) {
    labels_p[i] = labels[order[i]];
    preds_p[i] = preds[order[i]];
  }
  CHECK(macro_f1(preds_p, labels_p, 3) == doctest::Approx(base).epsilon(1e-12));

  // Swap class ids 0 <-> 2 everywhere: the macro average is unchanged.
  const auto relabel = [](int c) { return c == 0 ? 2 : (c == 2 ? 0 : c); };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels_p[i] = relabel(labels[i]);
    preds_p[i] = relabel(preds[i]);
  }
  CHECK(macro_f1(preds_p, labels_p, 3) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("AUROC worked examples and the pair-counting oracle") {
  CHECK(auroc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(auroc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == doctest::Approx(0.5));
  CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), NumericError);

  RngStream rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> scores(40);
    std::vector<int> labels(40);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      scores[i] = std::round(rng.uniform() * 10.0) / 10.0;  // force ties
      labels[i] = rng.flip(0.4);
    }
    labels[0] = 1;
    labels[1] = 0;
    CHECK(auroc(scores, labels) ==
          doctest::Approx(oracles::auroc_pairs_oracle(scores, labels)).epsilon(1e-12));
  }
}

TEST_CASE("AUROC is invariant under strictly monotone score transforms") {
  RngStream rng(3);
  std::vector<double> scores(50);
  std::vector<int> labels(50);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.normal();
    labels[i] = rng.flip(0.5);
  }
  labels[0] = 1;
  labels[1] = 0;
  const double base = auroc(scores, labels);

  std::vector<double> warped = scores;
  for (auto& s : warped) s = std::exp(2.0 * s + 1.0);
  CHECK(auroc(warped, labels) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("one-vs-rest macro AUROC") {
  Mat scores(6, 3);
  scores << 0.8, 0.1, 0.1,  //
      0.7, 0.2, 0.1,        //
      0.2, 0.6, 0.2,        //
      0.1, 0.8, 0.1,        //
      0.1, 0.2, 0.7,        //
      0.3, 0.2, 0.5;
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  CHECK(auroc_ovr(scores, labels, 3) == doctest::Approx(1.0));

  const std::vector<int> missing = {0, 0, 1, 1, 1, 1};
  CHECK_THROWS_AS(auroc_ovr(scores, missing, 3), NumericError);
}

TEST_CASE("bootstrap: determinism, degenerate-resample redraws, constant metrics") {
  RngStream rng(4);
  std::vector<double> values(40);
  for (auto& v : values) v = rng.normal();

  const auto mean_metric = [&](const std::vector<int>& idx) {
    double sum = 0.0;
    for (int i : idx) sum += values[static_cast<std::size_t>(i)];
    return sum / static_cast<double>(idx.size());
  };

  const MetricReport a = bootstrap_metric("mean", mean_metric, values.size(), 1000, 9);
  const MetricReport b = bootstrap_metric("mean", mean_metric, values.size(), 1000, 9);
  CHECK(a.point == b.point);
  CHECK(a.boot_mean == b.boot_mean);
  CHECK(a.boot_std == b.boot_std);
  CHECK(a.n_bootstrap == 1000);

  // The resampling distribution of the mean is centered on the point value.
  CHECK(std::abs(a.boot_mean - a.point) <= 3.0 * a.boot_std / std::sqrt(1000.0));

  const MetricReport other = bootstrap_metric("mean", mean_metric, values.size(), 1000, 10);
  CHECK(other.boot_mean != a.boot_mean);

  // Constant metric: zero spread.
  const auto constant = [](const std::vector<int>&) { return 0.75; };
  const MetricReport c = bootstrap_metric("const", constant, 20, 200, 1);
  CHECK(c.boot_std == 0.0);
  CHECK(c.boot_mean == doctest::Approx(0.75));

  // AUROC with a rare positive: some resamples are single-class and must be
  // redrawn while n stays exact.
  std::vector<double> scores = {0.9, 0.1, 0.2, 0.3};
  std::vector<int> labels = {1, 0, 0, 0};
  const auto auroc_metric = [&](const std::vector<int>& idx) {
    std::vector<double> s(idx.size());
    std::vector<int> l(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      s[k] = scores[static_cast<std::size_t>(idx[k])];
      l[k] = labels[static_cast<std::size_t>(idx[k])];
    }
    return auroc(s, l);
  };
  const MetricReport d = bootstrap_metric("auroc", auroc_metric, labels.size(), 500, 2);
  CHECK(d.redrawn > 0);
  CHECK(d.n_bootstrap == 500);
  CHECK(std::isfinite(d.boot_mean));
}
