#include "pyrvit/adaptation.hpp"

#include "pyrvit/checkpoint.hpp"
#include "pyrvit/optim.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace pyrvit {

Mat FeatureSet::tokens_for(std::size_t i) const {
  check_arg(has_patch_tokens(), "feature set was extracted without patch tokens");
  const Eigen::Index n = static_cast<Eigen::Index>(grid) * grid;
  return patch_tokens.middleRows(static_cast<Eigen::Index>(i) * n, n);
}

FeatureSet extract_features(const VitEncoder& backbone, const std::vector<TileSample>& tiles,
                            int patch_size, bool keep_patch_tokens,
                            const std::string& dataset_id, const std::vector<int>* groups) {
  check_arg(!tiles.empty(), "no tiles to featurize");
  const int grid = kGlobalCropSize / patch_size;
  const Eigen::Index n_cells = static_cast<Eigen::Index>(grid) * grid;
  const Eigen::Index n = static_cast<Eigen::Index>(tiles.size());

  FeatureSet fs;
  fs.grid = grid;
  fs.patch_size = patch_size;
  fs.dataset_id = dataset_id;
  fs.cls = Mat::Zero(n, backbone.cfg.embed_dim);
  if (keep_patch_tokens) fs.patch_tokens = Mat::Zero(n * n_cells, backbone.cfg.embed_dim);
  fs.labels.resize(tiles.size());
  fs.groups.assign(tiles.size(), -1);

  parallel_for(tiles.size(), [&](std::size_t i) {
    const Image& px = tiles[i].pixels;
    check_arg(px.height >= kGlobalCropSize && px.width >= kGlobalCropSize,
              "tile smaller than the probe crop");
    const Image crop = px.crop((px.height - kGlobalCropSize) / 2,
                               (px.width - kGlobalCropSize) / 2, kGlobalCropSize, kGlobalCropSize);
    const TokenSequence seq = backbone.encode(crop, patch_size);
    fs.cls.row(static_cast<Eigen::Index>(i)) = seq.cls.transpose();
    if (keep_patch_tokens) {
      fs.patch_tokens.middleRows(static_cast<Eigen::Index>(i) * n_cells, n_cells) =
          seq.patch_tokens;
    }
    fs.labels[i] = tiles[i].label;
    if (groups) fs.groups[i] = (*groups)[i];
  });

  ParamList params = const_cast<VitEncoder&>(backbone).params("backbone");
  fs.backbone_hash = weights_hash(params);
  return fs;
}

std::string feature_cache_path(const std::string& cache_dir, std::uint64_t backbone_hash,
                               int patch_size, const std::string& dataset_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(backbone_hash));
  return cache_dir + "/feat_" + buf + "_p" + std::to_string(patch_size) + "_" + dataset_id +
         ".bin";
}

void write_feature_cache(const std::string& path, const FeatureSet& fs) {
  Checkpoint ck;
  ck.set_meta("kind", "feature_cache");
  ck.set_meta("dataset_id", fs.dataset_id);
  ck.set_meta("patch_size", std::to_string(fs.patch_size));
  ck.set_meta("grid", std::to_string(fs.grid));
  ck.set_meta("backbone_hash", std::to_string(fs.backbone_hash));
  ck.add_array("cls", {fs.cls.rows(), fs.cls.cols()}, fs.cls.data());
  if (fs.has_patch_tokens()) {
    ck.add_array("patch_tokens", {fs.patch_tokens.rows(), fs.patch_tokens.cols()},
                 fs.patch_tokens.data());
  }
  Vec labels(fs.labels.size());
  Vec groups(fs.groups.size());
  for (std::size_t i = 0; i < fs.labels.size(); ++i) {
    labels(static_cast<Eigen::Index>(i)) = fs.labels[i];
    groups(static_cast<Eigen::Index>(i)) = fs.groups[i];
  }
  ck.add_array("labels", {labels.size(), 1}, labels.data());
  ck.add_array("groups", {groups.size(), 1}, groups.data());
  ck.write(path);
}

FeatureSet read_feature_cache(const std::string& path) {
  const Checkpoint ck = Checkpoint::read(path);
  if (ck.meta("kind") != "feature_cache") throw CheckpointError("not a feature cache: " + path);
  FeatureSet fs;
  fs.dataset_id = ck.meta("dataset_id");
  fs.patch_size = std::stoi(ck.meta("patch_size"));
  fs.grid = std::stoi(ck.meta("grid"));
  fs.backbone_hash = std::stoull(ck.meta("backbone_hash"));
  const auto& cls = ck.array("cls");
  fs.cls = Eigen::Map<const Mat>(cls.data.data(), cls.shape[0], cls.shape[1]);
  if (ck.has_array("patch_tokens")) {
    const auto& pt = ck.array("patch_tokens");
    fs.patch_tokens = Eigen::Map<const Mat>(pt.data.data(), pt.shape[0], pt.shape[1]);
  }
  const auto& labels = ck.array("labels");
  const auto& groups = ck.array("groups");
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    fs.labels.push_back(static_cast<int>(labels.data[i]));
    fs.groups.push_back(static_cast<int>(groups.data[i]));
  }
  return fs;
}

// ---------------------------------------------------------------------------

ProbeKind probe_kind_from_string(const std::string& name) {
  if (name == "linear") return ProbeKind::kLinear;
  if (name == "attentive") return ProbeKind::kAttentive;
  if (name == "center-cell") return ProbeKind::kCenterCell;
  throw InvalidArgument("unknown probe head: " + name);
}

namespace {

struct LinearProbe final : ProbeHead {
  Linear fc;
  int classes;

  LinearProbe(Eigen::Index embed, int n_classes, std::uint64_t seed) : classes(n_classes) {
    RngStream rng(seed);
    fc.init(embed, n_classes, rng);
  }

  Vec logits(const FeatureSet& fs, std::size_t i, std::any* ctx) const override {
    LinearCtx lctx;
    const Mat out = fc.forward(fs.cls.row(static_cast<Eigen::Index>(i)), ctx ? &lctx : nullptr);
    if (ctx) *ctx = std::move(lctx);
    return out.row(0).transpose();
  }

  void backward(const std::any& ctx, const Vec& dlogits) override {
    fc.backward(std::any_cast<const LinearCtx&>(ctx), dlogits.transpose());
  }

  ParamList params() override {
    ParamList out;
    fc.collect("probe.linear", out);
    return out;
  }
  int n_classes() const override { return classes; }
};

struct AttentiveCtx {
  Mat tokens;
  Vec query;
  Vec alpha;
  Mat concat;  // [1, 2E]
  LinearCtx fc1;
  GeluCtx act;
  LinearCtx fc2;
  bool cls_query = false;
};

// Attention-pooled patch summary concatenated with CLS, then a small MLP.
struct AttentiveProbe final : ProbeHead {
  Param<Vec> query;
  Linear fc1, fc2;
  int classes;
  bool cls_as_query;

  AttentiveProbe(Eigen::Index embed, int n_classes, std::uint64_t seed, const ProbeConfig& cfg)
      : classes(n_classes), cls_as_query(cfg.cls_as_query) {
    RngStream rng(seed);
    query.set(trunc_normal_vec(rng, embed));
    fc1.init(2 * embed, cfg.mlp_hidden, rng);
    fc2.init(cfg.mlp_hidden, n_classes, rng);
  }

  Vec logits(const FeatureSet& fs, std::size_t i, std::any* ctx) const override {
    const Mat tokens = fs.tokens_for(i);
    check_arg(tokens.rows() > 0, "empty token grid");
    const Eigen::Index e = tokens.cols();
    const Vec q = cls_as_query ? Vec(fs.cls.row(static_cast<Eigen::Index>(i)).transpose())
                               : query.v;
    const Vec scores = tokens * q / std::sqrt(static_cast<double>(e));
    const Mat alpha_m = softmax_rows(scores.transpose());
    const Vec alpha = alpha_m.row(0).transpose();
    const Vec pooled = tokens.transpose() * alpha;

    Mat concat(1, 2 * e);
    concat.leftCols(e) = fs.cls.row(static_cast<Eigen::Index>(i));
    concat.rightCols(e) = pooled.transpose();

    AttentiveCtx actx;
    actx.cls_query = cls_as_query;
    Mat h = fc1.forward(concat, ctx ? &actx.fc1 : nullptr);
    h = gelu_forward(h, ctx ? &actx.act : nullptr);
    const Mat out = fc2.forward(h, ctx ? &actx.fc2 : nullptr);
    if (ctx) {
      actx.tokens = tokens;
      actx.query = q;
      actx.alpha = alpha;
      actx.concat = concat;
      *ctx = std::move(actx);
    }
    return out.row(0).transpose();
  }

  void backward(const std::any& any_ctx, const Vec& dlogits) override {
    const auto& ctx = std::any_cast<const AttentiveCtx&>(any_ctx);
    Mat dh = fc2.backward(ctx.fc2, dlogits.transpose());
    dh = gelu_backward(ctx.act, dh);
    const Mat dconcat = fc1.backward(ctx.fc1, dh);

    // Only the pooled half propagates: features (and CLS) are frozen.
    const Eigen::Index e = ctx.tokens.cols();
    const Vec dpooled = dconcat.row(0).rightCols(e).transpose();
    if (!ctx.cls_query) {
      const Vec dalpha = ctx.tokens * dpooled;
      const double dot = ctx.alpha.dot(dalpha);
      const Vec dscores = ctx.alpha.cwiseProduct((dalpha.array() - dot).matrix());
      query.g += ctx.tokens.transpose() * dscores / std::sqrt(static_cast<double>(e));
    }
  }

  ParamList params() override {
    ParamList out;
    if (!cls_as_query) collect_param(out, "probe.attentive.query", query, false);
    fc1.collect("probe.attentive.fc1", out);
    fc2.collect("probe.attentive.fc2", out);
    return out;
  }
  int n_classes() const override { return classes; }
};

struct CenterCellCtx {
  Mat concat;
  LinearCtx fc1;
  GeluCtx act;
  LinearCtx fc2;
};

// Mean of the four central patch tokens concatenated with CLS, then an MLP.
struct CenterCellProbe final : ProbeHead {
  Linear fc1, fc2;
  int classes;
  int grid;

  CenterCellProbe(Eigen::Index embed, int grid_size, int n_classes, std::uint64_t seed,
                  const ProbeConfig& cfg)
      : classes(n_classes), grid(grid_size) {
    check_arg(grid_size % 2 == 0, "center-cell head needs an even token grid");
    RngStream rng(seed);
    fc1.init(2 * embed, cfg.mlp_hidden, rng);
    fc2.init(cfg.mlp_hidden, n_classes, rng);
  }

  Vec logits(const FeatureSet& fs, std::size_t i, std::any* ctx) const override {
    check_arg(fs.grid == grid, "feature grid does not match the head");
    const Mat tokens = fs.tokens_for(i);
    const Eigen::Index e = tokens.cols();
    const int h = grid / 2;
    const int centers[4] = {(h - 1) * grid + (h - 1), (h - 1) * grid + h, h * grid + (h - 1),
                            h * grid + h};
    Vec pooled = Vec::Zero(e);
    for (int c : centers) pooled += tokens.row(c).transpose();
    pooled /= 4.0;

    Mat concat(1, 2 * e);
    concat.leftCols(e) = fs.cls.row(static_cast<Eigen::Index>(i));
    concat.rightCols(e) = pooled.transpose();

    CenterCellCtx cctx;
    Mat hdn = fc1.forward(concat, ctx ? &cctx.fc1 : nullptr);
    hdn = gelu_forward(hdn, ctx ? &cctx.act : nullptr);
    const Mat out = fc2.forward(hdn, ctx ? &cctx.fc2 : nullptr);
    if (ctx) {
      cctx.concat = concat;
      *ctx = std::move(cctx);
    }
    return out.row(0).transpose();
  }

  void backward(const std::any& any_ctx, const Vec& dlogits) override {
    const auto& ctx = std::any_cast<const CenterCellCtx&>(any_ctx);
    Mat dh = fc2.backward(ctx.fc2, dlogits.transpose());
    dh = gelu_backward(ctx.act, dh);
    fc1.backward(ctx.fc1, dh);  // feature gradients are discarded (frozen)
  }

  ParamList params() override {
    ParamList out;
    fc1.collect("probe.center.fc1", out);
    fc2.collect("probe.center.fc2", out);
    return out;
  }
  int n_classes() const override { return classes; }
};

Vec softmax_vec(const Vec& z) {
  const double m = z.maxCoeff();
  Vec e = (z.array() - m).exp();
  return e / e.sum();
}

}  // namespace

std::unique_ptr<ProbeHead> make_probe_head(ProbeKind kind, Eigen::Index embed_dim, int grid,
                                           int n_classes, std::uint64_t seed,
                                           const ProbeConfig& cfg) {
  switch (kind) {
    case ProbeKind::kLinear:
      return std::make_unique<LinearProbe>(embed_dim, n_classes, seed);
    case ProbeKind::kAttentive:
      return std::make_unique<AttentiveProbe>(embed_dim, n_classes, seed, cfg);
    case ProbeKind::kCenterCell:
      return std::make_unique<CenterCellProbe>(embed_dim, grid, n_classes, seed, cfg);
  }
  throw InvalidArgument("unknown probe kind");
}

FitResult fit_head(ProbeHead& head, const FeatureSet& fs, const std::vector<int>& indices,
                   const FitConfig& cfg) {
  check_arg(!indices.empty(), "empty training set");
  for (int i : indices) {
    check_arg(fs.labels[static_cast<std::size_t>(i)] >= 0 &&
                  fs.labels[static_cast<std::size_t>(i)] < head.n_classes(),
              "label outside the class set");
  }

  AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  const ParamList params = head.params();
  RngStream rng(cfg.seed);
  std::vector<int> order = indices;

  FitResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = static_cast<std::size_t>(order[k]);
        std::any ctx;
        const Vec z = head.logits(fs, i, &ctx);
        const Vec p = softmax_vec(z);
        const int label = fs.labels[i];
        epoch_loss -= std::log(std::max(p(label), 1e-300));
        Vec dz = p * scale;
        dz(label) -= scale;
        head.backward(ctx, dz);
      }
      opt.step(params, cfg.lr);
      zero_grads(params);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return result;
}

std::vector<int> predict(const ProbeHead& head, const FeatureSet& fs,
                         const std::vector<int>& indices) {
  std::vector<int> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Vec z = head.logits(fs, static_cast<std::size_t>(indices[k]));
    Eigen::Index best = 0;
    z.maxCoeff(&best);
    out[k] = static_cast<int>(best);
  }
  return out;
}

Mat predict_scores(const ProbeHead& head, const FeatureSet& fs, const std::vector<int>& indices) {
  Mat out(static_cast<Eigen::Index>(indices.size()), head.n_classes());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) =
        softmax_vec(head.logits(fs, static_cast<std::size_t>(indices[k]))).transpose();
  }
  return out;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  check_arg(predictions.size() == labels.size() && !labels.empty(), "bad accuracy inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------

struct MilCtx {
  Mat features;
  Mat hv, hu;
  Vec scores;
  Vec alpha;
  std::vector<std::size_t> order;
  Mat attended;
  LinearCtx cls_ctx;
};

void AdditiveMilHead::init(Eigen::Index embed_dim, Eigen::Index attn_dim, int n_classes,
                           std::uint64_t seed) {
  RngStream rng(seed);
  gate_v.set(trunc_normal_mat(rng, embed_dim, attn_dim, 0.1));
  gate_u.set(trunc_normal_mat(rng, embed_dim, attn_dim, 0.1));
  gate_w.set(trunc_normal_vec(rng, attn_dim, 0.1));
  classifier.init(embed_dim, n_classes, rng);
}

namespace {

// Permutation-independent summation order: tiles sorted by a content hash.
std::vector<std::size_t> hash_order(const Mat& features) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(
      static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    keyed[static_cast<std::size_t>(i)] = {
        hash_doubles(features.row(i).data(), static_cast<std::size_t>(features.cols())),
        static_cast<std::size_t>(i)};
  }
  std::sort(keyed.begin(), keyed.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> order(keyed.size());
  for (std::size_t k = 0; k < keyed.size(); ++k) order[k] = keyed[k].second;
  return order;
}

}  // namespace

AdditiveMilOutput AdditiveMilHead::forward(const Mat& tile_features,
                                           std::shared_ptr<MilCtx>* ctx) const {
  check_arg(tile_features.rows() > 0, "empty bag");
  const Eigen::Index n = tile_features.rows();

  const Mat hv = (tile_features * gate_v.v).unaryExpr([](double x) { return std::tanh(x); });
  const Mat hu =
      (tile_features * gate_u.v).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const Vec scores = hv.cwiseProduct(hu) * gate_w.v;

  const std::vector<std::size_t> order = hash_order(tile_features);
  const double smax = scores.maxCoeff();
  double denom = 0.0;
  for (std::size_t idx : order) {
    denom += std::exp(scores(static_cast<Eigen::Index>(idx)) - smax);
  }
  Vec alpha(n);
  for (Eigen::Index i = 0; i < n; ++i) alpha(i) = std::exp(scores(i) - smax) / denom;

  Mat attended = tile_features.array().colwise() * alpha.array();
  LinearCtx cls_ctx;
  const Mat contributions = classifier.forward(attended, ctx ? &cls_ctx : nullptr);

  AdditiveMilOutput out;
  out.contributions = contributions;
  out.attention = alpha;
  out.order = order;
  out.bag_logits = Vec::Zero(contributions.cols());
  for (std::size_t idx : order) {
    out.bag_logits += contributions.row(static_cast<Eigen::Index>(idx)).transpose();
  }
  if (ctx) {
    *ctx = std::make_shared<MilCtx>();
    (*ctx)->features = tile_features;
    (*ctx)->hv = hv;
    (*ctx)->hu = hu;
    (*ctx)->scores = scores;
    (*ctx)->alpha = alpha;
    (*ctx)->order = order;
    (*ctx)->attended = attended;
    (*ctx)->cls_ctx = std::move(cls_ctx);
  }
  return out;
}

void AdditiveMilHead::backward(const MilCtx& ctx, const Vec& dbag_logits, Mat* dfeatures) {
  const Eigen::Index n = ctx.features.rows();
  const Mat dcontrib = dbag_logits.transpose().replicate(n, 1);
  const Mat dattended = classifier.backward(ctx.cls_ctx, dcontrib);

  Vec dalpha(n);
  for (Eigen::Index i = 0; i < n; ++i) dalpha(i) = ctx.features.row(i).dot(dattended.row(i));
  if (dfeatures) *dfeatures = dattended.array().colwise() * ctx.alpha.array();

  const double dot = ctx.alpha.dot(dalpha);
  const Vec dscores = ctx.alpha.cwiseProduct((dalpha.array() - dot).matrix());

  const Mat dgate = dscores * gate_w.v.transpose();  // [n, A]
  gate_w.g += ctx.hv.cwiseProduct(ctx.hu).transpose() * dscores;
  const Mat dhv =
      dgate.cwiseProduct(ctx.hu).cwiseProduct((1.0 - ctx.hv.array().square()).matrix());
  const Mat dhu = dgate.cwiseProduct(ctx.hv)
                      .cwiseProduct(ctx.hu.cwiseProduct((1.0 - ctx.hu.array()).matrix()));
  gate_v.g += ctx.features.transpose() * dhv;
  gate_u.g += ctx.features.transpose() * dhu;
  if (dfeatures) {
    *dfeatures += dhv * gate_v.v.transpose() + dhu * gate_u.v.transpose();
  }
}

ParamList AdditiveMilHead::params() {
  ParamList out;
  collect_param(out, "mil.gate_v", gate_v, true);
  collect_param(out, "mil.gate_u", gate_u, true);
  collect_param(out, "mil.gate_w", gate_w, false);
  classifier.collect("mil.classifier", out);
  return out;
}

FitResult fit_mil(AdditiveMilHead& head, const std::vector<MilBag>& bags, const FitConfig& cfg) {
  check_arg(!bags.empty(), "no bags");
  for (const auto& bag : bags) {
    check_arg(bag.label >= 0 && bag.label < head.n_classes(), "bag label outside the class set");
  }
  AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  const ParamList params = head.params();
  RngStream rng(cfg.seed);
  std::vector<std::size_t> order(bags.size());
  std::iota(order.begin(), order.end(), 0);

  FitResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const MilBag& bag = bags[order[k]];
        std::shared_ptr<MilCtx> ctx;
        const AdditiveMilOutput out = head.forward(bag.tile_features, &ctx);
        const Vec p = softmax_vec(out.bag_logits);
        epoch_loss -= std::log(std::max(p(bag.label), 1e-300));
        Vec dz = p * scale;
        dz(bag.label) -= scale;
        head.backward(*ctx, dz);
      }
      opt.step(params, cfg.lr);
      zero_grads(params);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return result;
}

FitResult fit_mil_finetune(VitEncoder& encoder, AdditiveMilHead& head,
                           const std::vector<TileSample>& tiles,
                           const std::vector<std::vector<int>>& bag_tiles,
                           const std::vector<int>& bag_labels, int patch_size,
                           const FitConfig& cfg) {
  check_arg(bag_tiles.size() == bag_labels.size() && !bag_tiles.empty(), "bad bag definitions");
  AdamW opt;
  opt.weight_decay = cfg.weight_decay;
  ParamList params = head.params();
  ParamList enc_params = encoder.params("mil_encoder");
  params.insert(params.end(), enc_params.begin(), enc_params.end());

  RngStream rng(cfg.seed);
  std::vector<std::size_t> order(bag_tiles.size());
  std::iota(order.begin(), order.end(), 0);

  FitResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b : order) {
      const auto& members = bag_tiles[b];
      Mat features(static_cast<Eigen::Index>(members.size()), encoder.cfg.embed_dim);
      std::vector<EncodeTape> tapes(members.size());
      for (std::size_t t = 0; t < members.size(); ++t) {
        const Image& px = tiles[static_cast<std::size_t>(members[t])].pixels;
        const Image crop =
            px.crop((px.height - kGlobalCropSize) / 2, (px.width - kGlobalCropSize) / 2,
                    kGlobalCropSize, kGlobalCropSize);
        const TokenSequence seq =
            encoder.encode(crop, patch_size, TokenMasking::kNone, nullptr, &tapes[t]);
        features.row(static_cast<Eigen::Index>(t)) = seq.cls.transpose();
      }
      std::shared_ptr<MilCtx> ctx;
      const AdditiveMilOutput out = head.forward(features, &ctx);
      const Vec p = softmax_vec(out.bag_logits);
      epoch_loss -= std::log(std::max(p(bag_labels[b]), 1e-300));
      Vec dz = p;
      dz(bag_labels[b]) -= 1.0;
      Mat dfeatures;
      head.backward(*ctx, dz, &dfeatures);
      for (std::size_t t = 0; t < members.size(); ++t) {
        TokenSequenceGrad grad;
        grad.cls = dfeatures.row(static_cast<Eigen::Index>(t)).transpose();
        encoder.backward(tapes[t], grad);
      }
      opt.step(params, cfg.lr);
      zero_grads(params);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return result;
}

std::vector<MilBag> bags_from_features(const FeatureSet& fs) {
  int max_group = -1;
  for (int g : fs.groups) max_group = std::max(max_group, g);
  check_arg(max_group >= 0, "feature set has no bag grouping");

  std::vector<MilBag> bags(static_cast<std::size_t>(max_group) + 1);
  std::vector<std::vector<Eigen::Index>> members(bags.size());
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (fs.groups[i] < 0) continue;
    members[static_cast<std::size_t>(fs.groups[i])].push_back(static_cast<Eigen::Index>(i));
  }
  for (std::size_t b = 0; b < bags.size(); ++b) {
    check_arg(!members[b].empty(), "empty bag in grouping");
    bags[b].tile_features = Mat(static_cast<Eigen::Index>(members[b].size()), fs.dim());
    for (std::size_t k = 0; k < members[b].size(); ++k) {
      bags[b].tile_features.row(static_cast<Eigen::Index>(k)) = fs.cls.row(members[b][k]);
    }
    bags[b].label = fs.labels[static_cast<std::size_t>(members[b][0])];
  }
  return bags;
}

void write_contribution_csv(const std::string& path, const std::vector<MilBag>& bags,
                            const AdditiveMilHead& head) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "bag,tile,x,y";
  const int classes = head.n_classes();
  for (int c = 0; c < classes; ++c) os << ",class" << c;
  os << "\n";
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const AdditiveMilOutput out = head.forward(bags[b].tile_features);
    for (Eigen::Index t = 0; t < out.contributions.rows(); ++t) {
      int x = -1;
      int y = -1;
      if (static_cast<std::size_t>(t) < bags[b].tile_coords.size()) {
        x = bags[b].tile_coords[static_cast<std::size_t>(t)].first;
        y = bags[b].tile_coords[static_cast<std::size_t>(t)].second;
      }
      os << b << ',' << t << ',' << x << ',' << y;
      for (int c = 0; c < classes; ++c) os << ',' << out.contributions(t, c);
      os << "\n";
    }
  }
}

}  // namespace pyrvit
