#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pyrvit/adaptation.hpp"
#include "pyrvit/dataset.hpp"
#include "pyrvit/metrics.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>

using namespace pyrvit;

namespace {

// Feature set with a linear class structure, no backbone involved.
FeatureSet toy_features(int n, Eigen::Index dim, int n_classes, std::uint64_t seed,
                        double margin = 2.0, int grid = 2) {
  RngStream rng(seed);
  FeatureSet fs;
  fs.grid = grid;
  fs.patch_size = 16;
  fs.cls = Mat(n, dim);
  fs.patch_tokens = Mat(static_cast<Eigen::Index>(n) * grid * grid, dim);
  for (int i = 0; i < n; ++i) {
    const int label = i % n_classes;
    fs.labels.push_back(label);
    fs.groups.push_back(-1);
    for (Eigen::Index j = 0; j < dim; ++j) {
      fs.cls(i, j) = rng.normal() + (j == label ? margin : 0.0);
    }
    for (int t = 0; t < grid * grid; ++t) {
      for (Eigen::Index j = 0; j < dim; ++j) {
        fs.patch_tokens(static_cast<Eigen::Index>(i) * grid * grid + t, j) =
            rng.normal() + (j == label ? margin : 0.0);
      }
    }
  }
  return fs;
}

std::vector<int> all_indices(const FeatureSet& fs) {
  std::vector<int> idx(fs.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace

TEST_CASE("linear probe: zero weights and the 1-d affine case") {
  FeatureSet fs = toy_features(2, 1, 1, 1);
  fs.cls(0, 0) = 3.0;

  auto head = make_probe_head(ProbeKind::kLinear, 1, 2, 1, 5);
  for (const auto& p : head->params()) {
    for (Eigen::Index i = 0; i < p.size; ++i) p.value[i] = 0.0;
  }
  CHECK(head->logits(fs, 0)(0) == 0.0);

  // w = (1), b = 0, cls = (3) -> logit 3.
  for (const auto& p : head->params()) {
    if (p.name.find("weight") != std::string::npos) p.value[0] = 1.0;
  }
  CHECK(head->logits(fs, 0)(0) == doctest::Approx(3.0));
}

TEST_CASE("linear probe reaches 100% training accuracy on a separable set") {
  const FeatureSet fs = toy_features(60, 8, 3, 2, 3.0);
  auto head = make_probe_head(ProbeKind::kLinear, 8, 2, 3, 7);
  FitConfig fit;
  fit.epochs = 120;
  fit.lr = 0.05;
  fit.seed = 3;
  fit_head(*head, fs, all_indices(fs), fit);
  const auto preds = predict(*head, fs, all_indices(fs));
  CHECK(accuracy(preds, fs.labels) == doctest::Approx(1.0));
}

TEST_CASE("fit_head: zero epochs is a no-op and bad labels are rejected") {
  FeatureSet fs = toy_features(10, 4, 2, 3);
  auto head = make_probe_head(ProbeKind::kLinear, 4, 2, 2, 11);
  const std::uint64_t before = weights_hash(head->params());
  FitConfig fit;
  fit.epochs = 0;
  fit_head(*head, fs, all_indices(fs), fit);
  CHECK(weights_hash(head->params()) == before);

  fs.labels[3] = 9;
  CHECK_THROWS_AS(fit_head(*head, fs, all_indices(fs), fit), InvalidArgument);
}

TEST_CASE("attentive probe: uniform attention pools to the token mean") {
  FeatureSet fs = toy_features(4, 6, 2, 4);
  ProbeConfig cfg;
  auto head = make_probe_head(ProbeKind::kAttentive, 6, 2, 2, 13, cfg);
  // Zero query -> equal scores -> softmax uniform. Make the MLP the identity
  // read-out of the pooled half so the pooled vector is visible in logits...
  // simpler: compare against a manual forward with the same parameters.
  for (const auto& p : head->params()) {
    if (p.name == "probe.attentive.query") {
      for (Eigen::Index i = 0; i < p.size; ++i) p.value[i] = 0.0;
    }
  }
  const Vec logits = head->logits(fs, 1);
  CHECK(logits.allFinite());

  // Manual recomputation with uniform attention.
  const Mat tokens = fs.tokens_for(1);
  const Vec pooled = tokens.colwise().mean().transpose();
  Mat concat(1, 12);
  concat.leftCols(6) = fs.cls.row(1);
  concat.rightCols(6) = pooled.transpose();
  Mat h;
  for (const auto& p : head->params()) {
    if (p.name == "probe.attentive.fc1.weight") {
      const Mat w = Eigen::Map<const Mat>(p.value, p.rows, p.cols);
      h = concat * w;
    }
  }
  for (const auto& p : head->params()) {
    if (p.name == "probe.attentive.fc1.bias") {
      h.rowwise() += Eigen::Map<const Vec>(p.value, p.size).transpose();
    }
  }
  h = h.unaryExpr([](double v) { return gelu(v); });
  Mat out = h;
  for (const auto& p : head->params()) {
    if (p.name == "probe.attentive.fc2.weight") {
      out = h * Eigen::Map<const Mat>(p.value, p.rows, p.cols);
    }
  }
  for (const auto& p : head->params()) {
    if (p.name == "probe.attentive.fc2.bias") {
      out.rowwise() += Eigen::Map<const Vec>(p.value, p.size).transpose();
    }
  }
  CHECK((logits - out.row(0).transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attentive probe: a single patch token pools to itself") {
  // grid = 1: softmax over one score is 1 regardless of the query.
  FeatureSet fs = toy_features(3, 5, 2, 5, 2.0, 1);
  auto head = make_probe_head(ProbeKind::kAttentive, 5, 1, 2, 17);
  const Vec with_token = head->logits(fs, 0);

  // Replacing the single token by the pooled vector is a no-op.
  CHECK(with_token.allFinite());
  const Mat tokens = fs.tokens_for(0);
  CHECK(tokens.rows() == 1);
}

TEST_CASE("attentive probe trains on features whose signal is only in tokens") {
  // CLS carries nothing; class evidence lives in the patch tokens.
  FeatureSet fs = toy_features(80, 6, 2, 6, 2.5);
  fs.cls.setZero();
  auto head = make_probe_head(ProbeKind::kAttentive, 6, 2, 2, 19);
  FitConfig fit;
  fit.epochs = 150;
  fit.lr = 0.02;
  fit_head(*head, fs, all_indices(fs), fit);
  const auto preds = predict(*head, fs, all_indices(fs));
  CHECK(accuracy(preds, fs.labels) >= 0.95);
}

TEST_CASE("center-cell head: central indices, mean pooling, and the odd-grid error") {
  // 12x12 grid: the central cells are (5,5),(5,6),(6,5),(6,6).
  const Eigen::Index dim = 4;
  FeatureSet fs = toy_features(1, dim, 1, 7, 0.0, 12);
  fs.patch_tokens.setZero();
  const int cells[4] = {5 * 12 + 5, 5 * 12 + 6, 6 * 12 + 5, 6 * 12 + 6};
  for (int c : cells) fs.patch_tokens.row(c).setConstant(1.0);

  auto head = make_probe_head(ProbeKind::kCenterCell, dim, 12, 2, 23);
  // fc1 sees [cls ; pooled]; with cls = 0 and pooled = 1, logits reduce to
  // the sum of the pooled-half weights (plus bias through the MLP). Verify
  // the pooled mean is exactly 1 by comparing against a manual forward.
  fs.cls.setZero();
  const Vec logits = head->logits(fs, 0);
  CHECK(logits.allFinite());

  Mat concat = Mat::Zero(1, 2 * dim);
  concat.rightCols(dim).setConstant(1.0);  // mean of four all-ones tokens
  Mat h;
  const ParamList params = head->params();
  for (const auto& p : params) {
    if (p.name == "probe.center.fc1.weight") h = concat * Eigen::Map<const Mat>(p.value, p.rows, p.cols);
  }
  for (const auto& p : params) {
    if (p.name == "probe.center.fc1.bias") {
      h.rowwise() += Eigen::Map<const Vec>(p.value, p.size).transpose();
    }
  }
  h = h.unaryExpr([](double v) { return gelu(v); });
  Mat out;
  for (const auto& p : params) {
    if (p.name == "probe.center.fc2.weight") out = h * Eigen::Map<const Mat>(p.value, p.rows, p.cols);
  }
  for (const auto& p : params) {
    if (p.name == "probe.center.fc2.bias") {
      out.rowwise() += Eigen::Map<const Vec>(p.value, p.size).transpose();
    }
  }
  CHECK((logits - out.row(0).transpose()).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(make_probe_head(ProbeKind::kCenterCell, dim, 7, 2, 23), InvalidArgument);
}

TEST_CASE("probe heads propagate correct gradients (finite differences)") {
  const FeatureSet fs = toy_features(6, 5, 2, 8, 1.0, 2);
  for (ProbeKind kind : {ProbeKind::kLinear, ProbeKind::kAttentive, ProbeKind::kCenterCell}) {
    auto head = make_probe_head(kind, 5, 2, 3, 29);
    Vec dlogits(3);
    dlogits << 0.3, -0.7, 0.2;
    zero_grads(head->params());
    std::any ctx;
    head->logits(fs, 2, &ctx);
    head->backward(ctx, dlogits);
    const auto loss_fn = [&]() { return head->logits(fs, 2).dot(dlogits); };
    CHECK(oracles::max_grad_rel_error(loss_fn, head->params(), 31, 16) < 1e-4);
  }
}

TEST_CASE("additive MIL: additivity is exact over 1000 random bags") {
  AdditiveMilHead head;
  head.init(6, 8, 3, 37);
  RngStream rng(38);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.randint(12));
    Mat f(n, 6);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
    const AdditiveMilOutput out = head.forward(f);
    Vec sum = Vec::Zero(3);
    for (std::size_t idx : out.order) {
      sum += out.contributions.row(static_cast<Eigen::Index>(idx)).transpose();
    }
    CHECK(sum == out.bag_logits);  // bitwise, not approximate
  }
}

TEST_CASE("additive MIL: single-tile bags and exact permutation invariance") {
  AdditiveMilHead head;
  head.init(5, 8, 2, 41);
  RngStream rng(42);

  Mat single(1, 5);
  for (int j = 0; j < 5; ++j) single(0, j) = rng.normal();
  const AdditiveMilOutput one = head.forward(single);
  CHECK(one.bag_logits == one.contributions.row(0).transpose());
  CHECK(one.attention(0) == doctest::Approx(1.0));

  Mat bag(7, 5);
  for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = rng.normal();
  const AdditiveMilOutput base = head.forward(bag);

  std::vector<int> perm = {3, 0, 6, 1, 5, 2, 4};
  Mat shuffled(7, 5);
  for (int i = 0; i < 7; ++i) shuffled.row(i) = bag.row(perm[i]);
  const AdditiveMilOutput permuted = head.forward(shuffled);

  CHECK(permuted.bag_logits == base.bag_logits);  // bitwise
  for (int i = 0; i < 7; ++i) {
    CHECK(permuted.contributions.row(i) == base.contributions.row(perm[i]));
    CHECK(permuted.attention(i) == base.attention(perm[i]));
  }

  CHECK_THROWS_AS(head.forward(Mat(0, 5)), InvalidArgument);
}

TEST_CASE("additive MIL: duplicated tiles halve attention, verified against re-evaluation") {
  AdditiveMilHead head;
  head.init(4, 6, 2, 43);
  RngStream rng(44);
  Mat bag(3, 4);
  for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = rng.normal();
  const AdditiveMilOutput base = head.forward(bag);

  Mat doubled(6, 4);
  doubled.topRows(3) = bag;
  doubled.bottomRows(3) = bag;
  const AdditiveMilOutput dup = head.forward(doubled);

  // Same scores duplicated: attention per copy halves, so each contribution
  // is the classifier applied to half the attended feature; the bag logits
  // follow from the duplicated sum.
  Vec expected = Vec::Zero(2);
  for (int i = 0; i < 3; ++i) {
    CHECK(dup.attention(i) == doctest::Approx(base.attention(i) / 2.0).epsilon(1e-12));
  }
  for (std::size_t idx : dup.order) {
    expected += dup.contributions.row(static_cast<Eigen::Index>(idx)).transpose();
  }
  CHECK((dup.bag_logits - expected).cwiseAbs().maxCoeff() == 0.0);

  // Direct re-evaluation oracle for the duplicated bag logits.
  const Vec w_class_contrib = 2.0 * (base.bag_logits / 1.0);  // placeholder, recomputed below
  (void)w_class_contrib;
  Vec oracle = Vec::Zero(2);
  for (int i = 0; i < 3; ++i) {
    // classifier(0.5 * alpha_i * f_i) appears twice.
    const Vec attended = (0.5 * base.attention(i)) * bag.row(i).transpose();
    const Vec c = head.classifier.forward(attended.transpose()).row(0).transpose();
    oracle += 2.0 * c;
  }
  CHECK((dup.bag_logits - oracle).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("additive MIL gradients match finite differences") {
  AdditiveMilHead head;
  head.init(5, 6, 3, 47);
  RngStream rng(48);
  Mat bag(4, 5);
  for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = rng.normal();
  Vec dbag(3);
  dbag << 0.5, -0.3, 0.1;

  zero_grads(head.params());
  std::shared_ptr<MilCtx> ctx;
  head.forward(bag, &ctx);
  head.backward(*ctx, dbag);
  const auto loss_fn = [&]() { return head.forward(bag).bag_logits.dot(dbag); };
  CHECK(oracles::max_grad_rel_error(loss_fn, head.params(), 49, 20) < 1e-4);
}

TEST_CASE("MIL fitting separates a toy bag task") {
  RngStream rng(51);
  std::vector<MilBag> bags;
  for (int b = 0; b < 40; ++b) {
    MilBag bag;
    bag.label = b % 2;
    bag.tile_features = Mat(5, 6);
    for (Eigen::Index i = 0; i < bag.tile_features.size(); ++i) {
      bag.tile_features.data()[i] = rng.normal();
    }
    // One discriminative tile per bag.
    bag.tile_features(2, bag.label) += 3.0;
    bags.push_back(std::move(bag));
  }
  AdditiveMilHead head;
  head.init(6, 8, 2, 53);
  FitConfig fit;
  fit.epochs = 80;
  fit.lr = 0.02;
  fit_mil(head, bags, fit);

  int correct = 0;
  for (const auto& bag : bags) {
    Eigen::Index best = 0;
    head.forward(bag.tile_features).bag_logits.maxCoeff(&best);
    correct += static_cast<int>(best) == bag.label;
  }
  CHECK(static_cast<double>(correct) / bags.size() >= 0.95);
}

TEST_CASE("feature extraction is frozen, cacheable, and grouped into bags") {
  VitEncoder backbone;
  backbone.init(EncoderConfig::desk(), 55);
  DataConfig data;
  data.base_size = 512;
  data.tile_size = 256;
  data.texture_classes = {0, 3};
  data.resolution_probs = {0.5, 0.5, 0.0, 0.0};
  std::vector<int> groups;
  const auto tiles = synth_tiles_grouped(data, 4, 3, 57, 0, &groups);
  REQUIRE(tiles.size() == 12);

  const std::uint64_t before = weights_hash(backbone.params());
  const FeatureSet fs = extract_features(backbone, tiles, 16, true, "unit", &groups);
  CHECK(weights_hash(backbone.params()) == before);
  CHECK(fs.size() == 12);
  CHECK(fs.grid == 14);
  CHECK(fs.cls.allFinite());

  const std::string path = "/tmp/pyrvit_feature_cache.bin";
  std::filesystem::remove(path);
  write_feature_cache(path, fs);
  const FeatureSet loaded = read_feature_cache(path);
  CHECK(loaded.cls == fs.cls);
  CHECK(loaded.patch_tokens == fs.patch_tokens);
  CHECK(loaded.labels == fs.labels);
  CHECK(loaded.groups == fs.groups);
  CHECK(loaded.backbone_hash == fs.backbone_hash);

  const auto bags = bags_from_features(fs);
  REQUIRE(bags.size() == 4);
  for (const auto& bag : bags) CHECK(bag.tile_features.rows() == 3);
  CHECK(bags[0].label == fs.labels[0]);

  // Head fitting on cached features cannot touch the backbone.
  auto head = make_probe_head(ProbeKind::kLinear, fs.dim(), fs.grid, 2, 59);
  FitConfig fit;
  fit.epochs = 3;
  fit_head(*head, loaded, {0, 1, 2, 3, 4, 5}, fit);
  CHECK(weights_hash(backbone.params()) == before);
}

TEST_CASE("attentive probing is non-inferior to CLS-only probing (paired bootstrap)") {
  // Property mirrors the adaptation ordering: pooled patch context never
  // hurts beyond noise. Features carry the class signal in both CLS and
  // tokens.
  const FeatureSet train = toy_features(120, 8, 2, 61, 1.2);
  const FeatureSet eval = toy_features(80, 8, 2, 62, 1.2);
  std::vector<int> train_idx = all_indices(train);
  std::vector<int> eval_idx = all_indices(eval);

  auto linear = make_probe_head(ProbeKind::kLinear, 8, 2, 2, 63);
  auto attentive = make_probe_head(ProbeKind::kAttentive, 8, 2, 2, 63);
  FitConfig fit;
  fit.epochs = 120;
  fit.lr = 0.02;
  fit_head(*linear, train, train_idx, fit);
  fit_head(*attentive, train, train_idx, fit);

  const auto lin_preds = predict(*linear, eval, eval_idx);
  const auto att_preds = predict(*attentive, eval, eval_idx);
  std::vector<double> delta(eval_idx.size());
  for (std::size_t i = 0; i < eval_idx.size(); ++i) {
    delta[i] = (att_preds[i] == eval.labels[i] ? 1.0 : 0.0) -
               (lin_preds[i] == eval.labels[i] ? 1.0 : 0.0);
  }
  const auto mean_delta = [&](const std::vector<int>& idx) {
    double s = 0.0;
    for (int i : idx) s += delta[static_cast<std::size_t>(i)];
    return s / static_cast<double>(idx.size());
  };
  const MetricReport r = bootstrap_metric("delta", mean_delta, delta.size(), 1000, 65);
  // Non-inferiority: the attentive-minus-linear accuracy gap is not negative
  // beyond bootstrap noise.
  CHECK(r.point >= -3.0 * std::max(r.boot_std, 1e-6));
}

TEST_CASE("contribution CSV lists one row per tile with class columns") {
  AdditiveMilHead head;
  head.init(4, 6, 2, 67);
  RngStream rng(68);
  std::vector<MilBag> bags(2);
  for (auto& bag : bags) {
    bag.tile_features = Mat(3, 4);
    for (Eigen::Index i = 0; i < bag.tile_features.size(); ++i) {
      bag.tile_features.data()[i] = rng.normal();
    }
    bag.label = 0;
    bag.tile_coords = {{0, 0}, {16, 0}, {0, 16}};
  }
  const std::string path = "/tmp/pyrvit_contrib.csv";
  std::filesystem::remove(path);
  write_contribution_csv(path, bags, head);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "bag,tile,x,y,class0,class1");
  int rows = 0;
  while (std::getline(is, line)) rows += !line.empty();
  CHECK(rows == 6);
}
